use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::accounting;
use crate::error::{shape_err, Error, Result};

/// Element precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(DType::F32),
            "f64" | "64" => Ok(DType::F64),
            other => Err(Error::Input(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Floating-point element type usable in a [`Tensor2D`].
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Dense row-major matrix with at least one row and one column.
///
/// The payload is registered with [`accounting`] for its whole lifetime.
pub struct Tensor2D<T: Scalar = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor2D<T> {
    fn wrap(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        accounting::record_alloc(data.len() * std::mem::size_of::<T>());
        Self { rows, cols, data }
    }

    fn check_dims(rows: usize, cols: usize) -> Result<()> {
        if rows == 0 || cols == 0 {
            return Err(shape_err(format!(
                "tensor dims must be positive, got {rows}x{cols}"
            )));
        }
        Ok(())
    }

    /// Builds a tensor from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::check_dims(rows, cols)?;
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("entry {pos} is {}", data[pos])));
        }
        Ok(Self::wrap(rows, cols, data))
    }

    /// Builds a tensor from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Result<Self> {
        Self::check_dims(rows, cols)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("fill value {value}")));
        }
        Ok(Self::wrap(rows, cols, vec![value; rows * cols]))
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::full(rows, cols, T::zero())
    }

    pub fn ones(rows: usize, cols: usize) -> Result<Self> {
        Self::full(rows, cols, T::one())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(n, n)?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// Entry `(r, c)` is `f(r, c)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        Self::check_dims(rows, cols)?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// Uniform entries in `[low, high)`.
    pub fn random_uniform<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        low: f64,
        high: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(rows, cols, |_, _| T::from_f64(rng.random_range(low..high)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the payload. Callers must keep entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.data.chunks(self.cols).map(<[T]>::to_vec).collect()
    }

    /// Payload size as registered with the accounting facility.
    pub fn accounted_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors if any entry is NaN or infinite. `what` names the operation.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(Error::Numeric(format!(
                "{what}: entry ({}, {}) is {}",
                pos / self.cols,
                pos % self.cols,
                self.data[pos]
            ))),
        }
    }

    /// Converts element precision.
    pub fn cast<U: Scalar>(&self) -> Result<Tensor2D<U>> {
        let data = self.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor2D::from_vec(self.rows, self.cols, data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<T: Scalar> Clone for Tensor2D<T> {
    fn clone(&self) -> Self {
        Self::wrap(self.rows, self.cols, self.data.clone())
    }
}

impl<T: Scalar> Drop for Tensor2D<T> {
    fn drop(&mut self) {
        accounting::record_free(self.accounted_bytes());
    }
}

impl<T: Scalar> PartialEq for Tensor2D<T> {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl<T: Scalar> fmt::Debug for Tensor2D<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor2D")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("dtype", &T::DTYPE)
            .field("data", &self.data)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_and_non_finite() {
        assert!(matches!(Tensor2D::<f64>::zeros(0, 3), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor2D::<f64>::from_vec(2, 2, vec![1.0, 2.0, 3.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor2D::<f32>::from_vec(1, 2, vec![1.0, f32::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Tensor2D::from_rows(&[vec![1.0f64], vec![1.0, 2.0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dtype_parsing() {
        assert_eq!("f32".parse::<DType>().unwrap(), DType::F32);
        assert_eq!("64".parse::<DType>().unwrap(), DType::F64);
        assert!("f16".parse::<DType>().is_err());
        assert_eq!(DType::F32.size_bytes(), 4);
    }
}
