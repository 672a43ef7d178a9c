//! Kernelized linear matching.
//!
//! With the feature map `φ` (row softmax over key channels) the similarity
//! `φ(K_q) φ(K_i)ᵀ` can be reassociated so that the memory is summarized by
//!
//! ```text
//! S = Σ_i φ(K_i)ᵀ V_i     (C_k × C_v)
//! Z = Σ_i φ(K_i)ᵀ 1       (C_k × 1)
//! ```
//!
//! and the readout becomes `φ(K_q) S ÷ φ(K_q) Z`. [`MatchState`] holds
//! `(S, Z)` and grows them one frame at a time; its size depends only on the
//! channel counts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    self, check_dtype, decode_payload, encode_payload, payload_path, DType, Scalar, Tensor2D,
    DEFAULT_EPSILON,
};
use crate::softmax_matching::MemoryBank;

/// The feature map: row softmax of the key matrix.
pub fn phi<T: Scalar>(k: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    numerics::row_softmax(k)
}

/// Parallel form: sums `φ(K_i)ᵀ V_i` and `φ(K_i)ᵀ 1` over the bank, then
/// reads out once.
pub fn linear_match_parallel<T: Scalar>(
    bank: &MemoryBank<T>,
    query_key: &Tensor2D<T>,
) -> Result<Tensor2D<T>> {
    linear_match_parallel_with_epsilon(bank, query_key, DEFAULT_EPSILON)
}

pub fn linear_match_parallel_with_epsilon<T: Scalar>(
    bank: &MemoryBank<T>,
    query_key: &Tensor2D<T>,
    epsilon: f64,
) -> Result<Tensor2D<T>> {
    bank.check_query(query_key)?;
    let ck = query_key.cols();
    let cv = bank.value_channels().expect("non-empty bank");
    let mut kv = Tensor2D::zeros(ck, cv)?;
    let mut k1 = Tensor2D::zeros(ck, 1)?;
    for (key, value) in bank.keys().iter().zip(bank.values()) {
        let fk = phi(key)?;
        numerics::add_assign(&mut kv, &numerics::matmul_tn(&fk, value)?)?;
        numerics::add_assign(&mut k1, &numerics::col_sums(&fk)?)?;
    }
    let fq = phi(query_key)?;
    let num = numerics::matmul(&fq, &kv)?;
    let den = numerics::matmul(&fq, &k1)?;
    numerics::safe_divide_in_place(num, &den, epsilon)
}

/// Recurrent memory `(S, Z)` plus the number of frames absorbed.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchState<T: Scalar = f64> {
    pub(crate) s: Tensor2D<T>,
    pub(crate) z: Tensor2D<T>,
    pub(crate) frames_absorbed: usize,
}

impl<T: Scalar> MatchState<T> {
    /// Zero state for `key_channels × value_channels`.
    pub fn new(key_channels: usize, value_channels: usize) -> Result<Self> {
        Ok(Self {
            s: Tensor2D::zeros(key_channels, value_channels)?,
            z: Tensor2D::zeros(key_channels, 1)?,
            frames_absorbed: 0,
        })
    }

    pub fn from_parts(s: Tensor2D<T>, z: Tensor2D<T>, frames_absorbed: usize) -> Result<Self> {
        if z.shape() != (s.rows(), 1) {
            return Err(shape_err(format!(
                "normalizer {:?} does not fit state {:?}",
                z.shape(),
                s.shape()
            )));
        }
        Ok(Self {
            s,
            z,
            frames_absorbed,
        })
    }

    pub fn key_channels(&self) -> usize {
        self.s.rows()
    }

    pub fn value_channels(&self) -> usize {
        self.s.cols()
    }

    /// `S`, shaped `C_k × C_v`.
    pub fn state(&self) -> &Tensor2D<T> {
        &self.s
    }

    /// `Z`, shaped `C_k × 1`.
    pub fn normalizer(&self) -> &Tensor2D<T> {
        &self.z
    }

    pub fn frames_absorbed(&self) -> usize {
        self.frames_absorbed
    }

    pub fn accounted_bytes(&self) -> usize {
        self.s.accounted_bytes() + self.z.accounted_bytes()
    }

    pub(crate) fn check_frame(&self, key: &Tensor2D<T>, value: &Tensor2D<T>) -> Result<()> {
        if key.rows() != value.rows() {
            return Err(shape_err(format!(
                "key has {} positions, value has {}",
                key.rows(),
                value.rows()
            )));
        }
        if key.cols() != self.key_channels() || value.cols() != self.value_channels() {
            return Err(shape_err(format!(
                "frame channels ({}, {}) do not match state ({}, {})",
                key.cols(),
                value.cols(),
                self.key_channels(),
                self.value_channels()
            )));
        }
        Ok(())
    }

    /// `S + φ(K)ᵀ V`, `Z + φ(K)ᵀ 1`. Returns the new state; `self` is left
    /// untouched.
    pub fn absorb(&self, key: &Tensor2D<T>, value: &Tensor2D<T>) -> Result<Self> {
        self.check_frame(key, value)?;
        let fk = phi(key)?;
        let s = numerics::add(&self.s, &numerics::matmul_tn(&fk, value)?)?;
        let z = numerics::add(&self.z, &numerics::col_sums(&fk)?)?;
        Ok(Self {
            s,
            z,
            frames_absorbed: self.frames_absorbed + 1,
        })
    }

    /// `φ(K_q) S ÷ φ(K_q) Z` with the default denominator guard.
    pub fn readout(&self, query_key: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        self.readout_with_epsilon(query_key, DEFAULT_EPSILON)
    }

    pub fn readout_with_epsilon(
        &self,
        query_key: &Tensor2D<T>,
        epsilon: f64,
    ) -> Result<Tensor2D<T>> {
        if self.frames_absorbed == 0 {
            return Err(Error::EmptyState);
        }
        if query_key.cols() != self.key_channels() {
            return Err(shape_err(format!(
                "query key has {} channels, state expects {}",
                query_key.cols(),
                self.key_channels()
            )));
        }
        let fq = phi(query_key)?;
        let num = numerics::matmul(&fq, &self.s)?;
        let den = numerics::matmul(&fq, &self.z)?;
        numerics::safe_divide_in_place(num, &den, epsilon)
    }

    /// Writes `{C_k, C_v, frames_absorbed, dtype}` to `header` and the raw
    /// `S` payload followed by `Z` to the matching `.bin`.
    pub fn save(&self, header: impl AsRef<Path>) -> Result<()> {
        let header = header.as_ref();
        let meta = StateHeader {
            key_channels: self.key_channels(),
            value_channels: self.value_channels(),
            frames_absorbed: self.frames_absorbed,
            dtype: T::DTYPE,
        };
        fs::write(header, serde_json::to_vec_pretty(&meta)?)?;
        let mut bytes = Vec::new();
        encode_payload(&self.s, &mut bytes);
        encode_payload(&self.z, &mut bytes);
        fs::write(payload_path(header), bytes)?;
        Ok(())
    }

    pub fn load(header: impl AsRef<Path>) -> Result<Self> {
        let header = header.as_ref();
        let meta: StateHeader = serde_json::from_slice(&fs::read(header)?)?;
        check_dtype::<T>(meta.dtype)?;
        let bytes = fs::read(payload_path(header))?;
        let (s, rest) = decode_payload(&bytes, meta.key_channels, meta.value_channels)?;
        let (z, rest) = decode_payload(rest, meta.key_channels, 1)?;
        if !rest.is_empty() {
            return Err(shape_err(format!("{} trailing state bytes", rest.len())));
        }
        Self::from_parts(s, z, meta.frames_absorbed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    #[serde(rename = "C_k")]
    key_channels: usize,
    #[serde(rename = "C_v")]
    value_channels: usize,
    frames_absorbed: usize,
    dtype: DType,
}
