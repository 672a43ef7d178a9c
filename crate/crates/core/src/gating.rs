//! Data-dependent forget gate for the recurrent state.
//!
//! The gate is a vector `α ∈ (0,1)^{C_k}` broadcast over value channels, so
//! the update `S ← (α 1ᵀ) ⊙ S + φ(K)ᵀ V` decays each key-channel row of `S`
//! by its own factor. `α` comes from frame features: a per-position linear
//! projection `C_f → C_k`, a reduction over positions, then a sigmoid.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linear_matching::{phi, MatchState};
use crate::numerics::{
    self, check_dtype, decode_payload, encode_payload, payload_path, DType, Scalar, Tensor2D,
};

/// Lower clamp applied to gates produced by [`GateProjector::gate`].
pub const GATE_MIN: f64 = 1e-7;
/// Upper clamp applied to gates produced by [`GateProjector::gate`].
pub const GATE_MAX: f64 = 1.0 - 1e-7;

/// Per key-channel forget factors, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector<T: Scalar = f64> {
    alpha: Vec<T>,
}

impl<T: Scalar> GateVector<T> {
    pub fn new(alpha: Vec<T>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(shape_err("gate vector is empty"));
        }
        if let Some(bad) = alpha.iter().find(|a| !(**a > T::zero() && **a < T::one())) {
            return Err(Error::Contract(format!("gate entry {bad} outside (0, 1)")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(len: usize, value: T) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// How projected features are pooled over spatial positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over positions. Large maps push the sigmoid into saturation.
    #[default]
    Sum,
    Mean,
}

/// Maps an `HW × C_f` feature map to a [`GateVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct GateProjector<T: Scalar = f64> {
    weights: Tensor2D<T>,
    bias: Vec<T>,
    reduction: Reduction,
}

impl<T: Scalar> GateProjector<T> {
    pub fn new(weights: Tensor2D<T>, bias: Vec<T>, reduction: Reduction) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(shape_err(format!(
                "{} bias entries for {} gate channels",
                bias.len(),
                weights.cols()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("non-finite gate bias".into()));
        }
        Ok(Self {
            weights,
            bias,
            reduction,
        })
    }

    /// Standard-normal weights scaled by `1/√C_f`, zero bias.
    pub fn seeded(
        feature_channels: usize,
        key_channels: usize,
        reduction: Reduction,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (feature_channels as f64).sqrt();
        let weights = Tensor2D::from_fn(feature_channels, key_channels, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(z * scale)
        })?;
        Self::new(weights, vec![T::zero(); key_channels], reduction)
    }

    pub fn feature_channels(&self) -> usize {
        self.weights.rows()
    }

    pub fn key_channels(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor2D<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn reduction(&self) -> Reduction {
        self.reduction
    }

    /// Project, pool, sigmoid, then clamp into `[GATE_MIN, GATE_MAX]`.
    pub fn gate(&self, features: &Tensor2D<T>) -> Result<GateVector<T>> {
        if features.cols() != self.feature_channels() {
            return Err(shape_err(format!(
                "features have {} channels, projector expects {}",
                features.cols(),
                self.feature_channels()
            )));
        }
        let projected = numerics::matmul(features, &self.weights)?;
        let mut pooled = numerics::col_sums(&projected)?.as_slice().to_vec();
        if self.reduction == Reduction::Mean {
            let n = T::from_f64(features.rows() as f64);
            pooled.iter_mut().for_each(|v| *v /= n);
        }
        let lo = T::from_f64(GATE_MIN);
        let hi = T::from_f64(GATE_MAX);
        let alpha = pooled
            .iter()
            .zip(&self.bias)
            .map(|(&p, &b)| sigmoid(p + b).max(lo).min(hi))
            .collect();
        GateVector::new(alpha)
    }

    /// Header `{C_f, C_k, reduction, dtype}`; payload is the weights then
    /// the bias.
    pub fn save(&self, header: impl AsRef<Path>) -> Result<()> {
        let header = header.as_ref();
        let meta = ProjectorHeader {
            feature_channels: self.feature_channels(),
            key_channels: self.key_channels(),
            reduction: self.reduction,
            dtype: T::DTYPE,
        };
        fs::write(header, serde_json::to_vec_pretty(&meta)?)?;
        let mut bytes = Vec::new();
        encode_payload(&self.weights, &mut bytes);
        for &b in &self.bias {
            b.write_le(&mut bytes);
        }
        fs::write(payload_path(header), bytes)?;
        Ok(())
    }

    pub fn load(header: impl AsRef<Path>) -> Result<Self> {
        let header = header.as_ref();
        let meta: ProjectorHeader = serde_json::from_slice(&fs::read(header)?)?;
        check_dtype::<T>(meta.dtype)?;
        let bytes = fs::read(payload_path(header))?;
        let (weights, rest) = decode_payload(&bytes, meta.feature_channels, meta.key_channels)?;
        let (bias, rest) = decode_payload::<T>(rest, 1, meta.key_channels)?;
        if !rest.is_empty() {
            return Err(shape_err(format!(
                "{} trailing projector bytes",
                rest.len()
            )));
        }
        Self::new(weights, bias.as_slice().to_vec(), meta.reduction)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjectorHeader {
    #[serde(rename = "C_f")]
    feature_channels: usize,
    #[serde(rename = "C_k")]
    key_channels: usize,
    reduction: Reduction,
    dtype: DType,
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> MatchState<T> {
    /// Gated update: row `r` of `S` is scaled by `α[r]` before the new
    /// frame is added. `Z` is scaled the same way only when
    /// `gate_normalizer` is set.
    pub fn gated_absorb(
        &self,
        gate: &GateVector<T>,
        key: &Tensor2D<T>,
        value: &Tensor2D<T>,
        gate_normalizer: bool,
    ) -> Result<Self> {
        self.check_frame(key, value)?;
        if gate.len() != self.key_channels() {
            return Err(shape_err(format!(
                "gate has {} entries, state has {} key channels",
                gate.len(),
                self.key_channels()
            )));
        }
        let fk = phi(key)?;
        let mut s = self.s.clone();
        numerics::scale_rows_in_place(&mut s, gate.as_slice())?;
        numerics::add_assign(&mut s, &numerics::matmul_tn(&fk, value)?)?;
        let mut z = self.z.clone();
        if gate_normalizer {
            numerics::scale_rows_in_place(&mut z, gate.as_slice())?;
        }
        numerics::add_assign(&mut z, &numerics::col_sums(&fk)?)?;
        Ok(Self {
            s,
            z,
            frames_absorbed: self.frames_absorbed + 1,
        })
    }
}

/// Closed-form gated state: frame `i` contributes `φ(K_i)ᵀ V_i` with row `r`
/// scaled by `Π_{j>i} α_j[r]`. `gates[i]` is the gate applied when frame `i`
/// is absorbed, so `gates[0]` never matters.
pub fn unrolled_gated_reference<T: Scalar>(
    keys: &[Tensor2D<T>],
    values: &[Tensor2D<T>],
    gates: &[GateVector<T>],
    gate_normalizer: bool,
) -> Result<MatchState<T>> {
    if keys.len() != values.len() || keys.len() != gates.len() {
        return Err(shape_err(format!(
            "{} keys, {} values, {} gates",
            keys.len(),
            values.len(),
            gates.len()
        )));
    }
    let (Some(k0), Some(v0)) = (keys.first(), values.first()) else {
        return Err(shape_err("no frames to unroll"));
    };
    let (ck, cv) = (k0.cols(), v0.cols());
    let t = keys.len();
    let mut s = vec![T::zero(); ck * cv];
    let mut z = vec![T::zero(); ck];
    for i in 0..t {
        if keys[i].rows() != values[i].rows() || keys[i].cols() != ck || values[i].cols() != cv {
            return Err(shape_err(format!(
                "frame {i} does not match the first frame"
            )));
        }
        if gates[i].len() != ck {
            return Err(shape_err(format!(
                "gate {i} has {} entries",
                gates[i].len()
            )));
        }
        let fk = phi(&keys[i])?;
        for r in 0..ck {
            let decay = gates[i + 1..]
                .iter()
                .fold(T::one(), |acc, g| acc * g.as_slice()[r]);
            for c in 0..cv {
                let contrib: T = (0..fk.rows())
                    .map(|p| fk.get(p, r) * values[i].get(p, c))
                    .sum();
                s[r * cv + c] += decay * contrib;
            }
            let count: T = (0..fk.rows()).map(|p| fk.get(p, r)).sum();
            z[r] += if gate_normalizer {
                decay * count
            } else {
                count
            };
        }
    }
    MatchState::from_parts(
        Tensor2D::from_vec(ck, cv, s)?,
        Tensor2D::from_vec(ck, 1, z)?,
        t,
    )
}
