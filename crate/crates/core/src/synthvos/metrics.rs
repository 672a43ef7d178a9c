use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::sequence::Mask;
use crate::error::{shape_err, Result};
use crate::multiobject::ObjectId;

/// Region Jaccard `|pred ∩ gt| / |pred ∪ gt|`, 1.0 when both are empty.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(shape_err(format!(
            "mask {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Binary PGM (P5): 255 inside the mask, 0 outside.
pub fn write_pgm(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JaccardRow {
    pub frame_index: usize,
    pub object_id: ObjectId,
    pub jaccard: f64,
}

pub fn write_jaccard_csv<W: Write>(writer: W, rows: &[JaccardRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}
