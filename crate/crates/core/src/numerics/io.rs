//! Tensor files: a JSON sidecar `{rows, cols, dtype}` next to a raw
//! little-endian payload with the same stem and a `.bin` extension.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DType, Scalar, Tensor2D};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
}

/// Path of the raw payload belonging to a sidecar.
pub fn payload_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("bin")
}

pub fn encode_payload<T: Scalar>(tensor: &Tensor2D<T>, out: &mut Vec<u8>) {
    out.reserve(tensor.accounted_bytes());
    for &v in tensor.as_slice() {
        v.write_le(out);
    }
}

/// Decodes `rows × cols` values from the front of `bytes`, returning the
/// tensor and the unread tail.
pub fn decode_payload<T: Scalar>(
    bytes: &[u8],
    rows: usize,
    cols: usize,
) -> Result<(Tensor2D<T>, &[u8])> {
    let width = T::DTYPE.size_bytes();
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| shape_err("payload size overflows"))?;
    if bytes.len() < need {
        return Err(shape_err(format!(
            "payload holds {} bytes, {rows}x{cols} {} needs {need}",
            bytes.len(),
            T::DTYPE
        )));
    }
    let (head, tail) = bytes.split_at(need);
    let data = head.chunks_exact(width).map(T::read_le).collect();
    Ok((Tensor2D::from_vec(rows, cols, data)?, tail))
}

pub(crate) fn check_dtype<T: Scalar>(found: DType) -> Result<()> {
    if found != T::DTYPE {
        return Err(Error::Input(format!(
            "file holds {found} data, expected {}",
            T::DTYPE
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor2D<T> {
    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            rows: self.rows(),
            cols: self.cols(),
            dtype: T::DTYPE,
        }
    }

    /// Writes the sidecar to `sidecar` and the payload to
    /// [`payload_path`]`(sidecar)`.
    pub fn save(&self, sidecar: impl AsRef<Path>) -> Result<()> {
        let sidecar = sidecar.as_ref();
        fs::write(sidecar, serde_json::to_vec_pretty(&self.header())?)?;
        let mut bytes = Vec::new();
        encode_payload(self, &mut bytes);
        fs::write(payload_path(sidecar), bytes)?;
        Ok(())
    }

    pub fn load(sidecar: impl AsRef<Path>) -> Result<Self> {
        let sidecar = sidecar.as_ref();
        let header: TensorHeader = serde_json::from_slice(&fs::read(sidecar)?)?;
        check_dtype::<T>(header.dtype)?;
        let bytes = fs::read(payload_path(sidecar))?;
        let (tensor, tail) = decode_payload(&bytes, header.rows, header.cols)?;
        if !tail.is_empty() {
            return Err(shape_err(format!("{} trailing payload bytes", tail.len())));
        }
        Ok(tensor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sidecar_has_exact_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.json");
        let t = Tensor2D::<f32>::from_rows(&[vec![1.0, -2.5], vec![0.0, 3.25]]).unwrap();
        t.save(&path).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"rows": 2, "cols": 2, "dtype": "f32"})
        );
        let raw = fs::read(payload_path(&path)).unwrap();
        assert_eq!(raw.len(), 16);
        assert_eq!(&raw[4..8], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.json");
        Tensor2D::<f32>::ones(1, 1).unwrap().save(&path).unwrap();
        assert!(matches!(Tensor2D::<f64>::load(&path), Err(Error::Input(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        assert!(matches!(
            decode_payload::<f64>(&[0u8; 15], 1, 2),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn save_load_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor2D::<f64>::random_uniform(rows, cols, -1e3, 1e3, &mut rng).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.json");
            t.save(&path).unwrap();
            prop_assert_eq!(Tensor2D::<f64>::load(&path).unwrap(), t);
        }
    }
}
