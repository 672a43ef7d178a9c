//! Softmax memory matching over an explicit bank of past frames.
//!
//! For keys `K_i` (HW×C_k) and values `V_i` (HW×C_v) of frames `1..=T`, and
//! a query key `K_q`, the readout is
//!
//! ```text
//!        Σ_i exp(K_q K_iᵀ) V_i
//! V  = ─────────────────────────   (row-wise division)
//!        Σ_i exp(K_q K_iᵀ) 1
//! ```
//!
//! which is the row softmax of `K_q K_{1:T}ᵀ` applied to the stacked values.
//! No temperature is applied to the logits, so callers keep key magnitudes
//! small enough for `exp` to stay finite.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{self, matmul_acc, Scalar, Tensor2D};

/// Keys and values of every memorized frame, in insertion order.
#[derive(Clone, Debug)]
pub struct MemoryBank<T: Scalar = f64> {
    keys: Vec<Tensor2D<T>>,
    values: Vec<Tensor2D<T>>,
}

impl<T: Scalar> Default for MemoryBank<T> {
    fn default() -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_frames(
        frames: impl IntoIterator<Item = (Tensor2D<T>, Tensor2D<T>)>,
    ) -> Result<Self> {
        let mut bank = Self::new();
        for (k, v) in frames {
            bank.push(k, v)?;
        }
        Ok(bank)
    }

    /// Appends one frame. All frames must share `(HW, C_k)` for keys and
    /// `(HW, C_v)` for values.
    pub fn push(&mut self, key: Tensor2D<T>, value: Tensor2D<T>) -> Result<()> {
        if key.rows() != value.rows() {
            return Err(shape_err(format!(
                "key has {} positions, value has {}",
                key.rows(),
                value.rows()
            )));
        }
        if let (Some(k0), Some(v0)) = (self.keys.first(), self.values.first()) {
            if key.shape() != k0.shape() || value.shape() != v0.shape() {
                return Err(shape_err(format!(
                    "frame key {:?} / value {:?} differs from bank {:?} / {:?}",
                    key.shape(),
                    value.shape(),
                    k0.shape(),
                    v0.shape()
                )));
            }
        }
        self.keys.push(key);
        self.values.push(value);
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[Tensor2D<T>] {
        &self.keys
    }

    pub fn values(&self) -> &[Tensor2D<T>] {
        &self.values
    }

    pub fn positions_per_frame(&self) -> Option<usize> {
        self.keys.first().map(Tensor2D::rows)
    }

    pub fn key_channels(&self) -> Option<usize> {
        self.keys.first().map(Tensor2D::cols)
    }

    pub fn value_channels(&self) -> Option<usize> {
        self.values.first().map(Tensor2D::cols)
    }

    pub fn accounted_bytes(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(Tensor2D::accounted_bytes)
            .sum()
    }

    pub(crate) fn check_query(&self, query_key: &Tensor2D<T>) -> Result<()> {
        let ck = self
            .key_channels()
            .ok_or_else(|| Error::Input("memory bank is empty".into()))?;
        if query_key.cols() != ck {
            return Err(shape_err(format!(
                "query key has {} channels, bank keys have {ck}",
                query_key.cols()
            )));
        }
        Ok(())
    }
}

/// A non-negative similarity between a query key map and one memory frame's
/// key map, returning an `HW_q × HW_i` matrix.
pub trait Similarity<T: Scalar> {
    fn similarity(&self, query: &Tensor2D<T>, memory: &Tensor2D<T>) -> Result<Tensor2D<T>>;
}

impl<T: Scalar, F> Similarity<T> for F
where
    F: Fn(&Tensor2D<T>, &Tensor2D<T>) -> Result<Tensor2D<T>>,
{
    fn similarity(&self, query: &Tensor2D<T>, memory: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        self(query, memory)
    }
}

/// `exp(A Bᵀ)`: turns [`generalized_match`] into [`softmax_match`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpDot;

impl<T: Scalar> Similarity<T> for ExpDot {
    fn similarity(&self, query: &Tensor2D<T>, memory: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        let mut logits = numerics::matmul_nt(query, memory)?;
        numerics::exp_in_place(&mut logits)?;
        Ok(logits)
    }
}

/// `φ(A) φ(B)ᵀ` with the row-softmax feature map.
#[derive(Clone, Copy, Debug, Default)]
pub struct FeatureKernel;

impl<T: Scalar> Similarity<T> for FeatureKernel {
    fn similarity(&self, query: &Tensor2D<T>, memory: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        let fq = crate::linear_matching::phi(query)?;
        let fm = crate::linear_matching::phi(memory)?;
        numerics::matmul_nt(&fq, &fm)
    }
}

/// Softmax matching, accumulated one memory frame at a time.
///
/// Per frame only one `HW_q × HW` block of logits is alive, so apart from
/// the result the working set is that block plus the normalizer column.
pub fn softmax_match<T: Scalar>(
    bank: &MemoryBank<T>,
    query_key: &Tensor2D<T>,
) -> Result<Tensor2D<T>> {
    bank.check_query(query_key)?;
    let cv = bank.value_channels().expect("non-empty bank");
    let mut numerator = Tensor2D::zeros(query_key.rows(), cv)?;
    let mut denominator = Tensor2D::zeros(query_key.rows(), 1)?;
    for (key, value) in bank.keys.iter().zip(&bank.values) {
        let mut weights = numerics::matmul_nt(query_key, key)?;
        numerics::exp_in_place(&mut weights).map_err(|e| {
            Error::Numeric(format!("softmax logits overflow, scale the keys ({e})"))
        })?;
        accumulate_frame(&mut numerator, &mut denominator, &weights, value)?;
    }
    numerics::safe_divide_in_place(numerator, &denominator, 0.0)
}

fn accumulate_frame<T: Scalar>(
    numerator: &mut Tensor2D<T>,
    denominator: &mut Tensor2D<T>,
    weights: &Tensor2D<T>,
    value: &Tensor2D<T>,
) -> Result<()> {
    matmul_acc(numerator, weights, value)?;
    for r in 0..weights.rows() {
        let s: T = weights.row(r).iter().copied().sum();
        let d = denominator.get(r, 0) + s;
        denominator.set(r, 0, d);
    }
    denominator.ensure_finite("matching normalizer")
}

/// Matching with an arbitrary non-negative similarity, with no guard on the
/// denominator.
pub fn generalized_match<T: Scalar, S: Similarity<T> + ?Sized>(
    bank: &MemoryBank<T>,
    query_key: &Tensor2D<T>,
    sim: &S,
) -> Result<Tensor2D<T>> {
    generalized_match_with_epsilon(bank, query_key, sim, 0.0)
}

/// [`generalized_match`] with `epsilon` added to every denominator, the same
/// guard the linear matchers apply.
pub fn generalized_match_with_epsilon<T: Scalar, S: Similarity<T> + ?Sized>(
    bank: &MemoryBank<T>,
    query_key: &Tensor2D<T>,
    sim: &S,
    epsilon: f64,
) -> Result<Tensor2D<T>> {
    bank.check_query(query_key)?;
    let cv = bank.value_channels().expect("non-empty bank");
    let mut numerator = Tensor2D::zeros(query_key.rows(), cv)?;
    let mut denominator = Tensor2D::zeros(query_key.rows(), 1)?;
    for (i, (key, value)) in bank.keys.iter().zip(&bank.values).enumerate() {
        let weights = sim.similarity(query_key, key)?;
        if weights.shape() != (query_key.rows(), key.rows()) {
            return Err(shape_err(format!(
                "similarity returned {:?}, expected {:?}",
                weights.shape(),
                (query_key.rows(), key.rows())
            )));
        }
        if let Some(v) = weights.as_slice().iter().find(|v| **v < T::zero()) {
            return Err(Error::Contract(format!(
                "similarity for memory frame {i} has negative entry {v}"
            )));
        }
        accumulate_frame(&mut numerator, &mut denominator, &weights, value)?;
    }
    numerics::safe_divide_in_place(numerator, &denominator, epsilon)
}

/// Softmax matching with the full `HW_q × T·HW` attention matrix held in
/// memory at once, the footprint the complexity comparison is about.
///
/// Apart from the returned readout, the only accounted buffer is the
/// attention matrix itself: `T · HW_q · HW · size_of::<T>()` bytes.
pub fn softmax_match_materialized<T: Scalar>(
    bank: &MemoryBank<T>,
    query_key: &Tensor2D<T>,
) -> Result<Tensor2D<T>> {
    bank.check_query(query_key)?;
    let hw = bank.positions_per_frame().expect("non-empty bank");
    let cv = bank.value_channels().expect("non-empty bank");
    let total = hw * bank.frame_count();
    let mut attention = Tensor2D::zeros(query_key.rows(), total)?;
    for r in 0..query_key.rows() {
        let q = query_key.row(r);
        let row = attention.row_mut(r);
        for (i, key) in bank.keys.iter().enumerate() {
            for j in 0..hw {
                row[i * hw + j] = numerics::dot(q, key.row(j));
            }
        }
        numerics::softmax_slice(row);
    }
    attention.ensure_finite("attention")?;

    let mut out = Tensor2D::zeros(query_key.rows(), cv)?;
    for r in 0..query_key.rows() {
        let weights = attention.row(r);
        let out_row = out.row_mut(r);
        for (i, value) in bank.values.iter().enumerate() {
            for j in 0..hw {
                let w = weights[i * hw + j];
                for (o, &v) in out_row.iter_mut().zip(value.row(j)) {
                    *o += w * v;
                }
            }
        }
    }
    drop(attention);
    out.ensure_finite("materialized softmax readout")?;
    Ok(out)
}
