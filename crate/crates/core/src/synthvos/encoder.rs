//! Deterministic stand-ins for the image and mask encoders and the decoder.
//!
//! Frames are cut into non-overlapping `p × p` patches; each patch becomes
//! one memory position. Keys softly assign each patch's mean colour to a set
//! of seeded prototype colours; values and gate features are fixed seeded
//! projections of the flattened patch. Equal inputs always give equal
//! outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::sequence::{Image, Mask};
use crate::error::{shape_err, Error, Result};
use crate::gating::sigmoid;
use crate::multiobject::{ObjectId, ProbMap};
use crate::numerics::{self, Tensor2D};

/// Flattened `p × p × 3` patches, centered at 0.5, one row per patch in
/// row-major patch order.
pub fn patchify(frame: &Image, patch: usize) -> Result<Tensor2D<f64>> {
    check_divisible(frame.height, frame.width, patch)?;
    let (ph, pw) = (frame.height / patch, frame.width / patch);
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                for dx in 0..patch {
                    let rgb = frame.pixel(py * patch + dy, px * patch + dx);
                    data.extend(rgb.iter().map(|v| v - 0.5));
                }
            }
        }
    }
    Tensor2D::from_vec(ph * pw, dim, data)
}

/// Fraction of mask pixels inside each patch, as a column.
pub fn patch_occupancy(mask: &Mask, patch: usize) -> Result<Vec<f64>> {
    check_divisible(mask.height, mask.width, patch)?;
    let (ph, pw) = (mask.height / patch, mask.width / patch);
    let norm = (patch * patch) as f64;
    let mut occ = Vec::with_capacity(ph * pw);
    for py in 0..ph {
        for px in 0..pw {
            let mut n = 0usize;
            for dy in 0..patch {
                for dx in 0..patch {
                    n += usize::from(mask.get(py * patch + dy, px * patch + dx));
                }
            }
            occ.push(n as f64 / norm);
        }
    }
    Ok(occ)
}

/// Majority vote of each patch, as a mask on the patch grid.
pub fn downsample_mask(mask: &Mask, patch: usize) -> Result<Mask> {
    let occ = patch_occupancy(mask, patch)?;
    let pw = mask.width / patch;
    Ok(Mask {
        height: mask.height / patch,
        width: pw,
        data: occ.iter().map(|&o| o > 0.5).collect(),
    })
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(shape_err(format!(
            "frame {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok(())
}

/// A seeded linear map from flattened patches to `out_channels`.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    seed: u64,
    patch: usize,
    out_channels: usize,
    projection: Tensor2D<f64>,
}

impl StubEncoder {
    pub fn new(seed: u64, patch: usize, out_channels: usize) -> Result<Self> {
        let dim = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let projection = Tensor2D::from_fn(dim, out_channels, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })?;
        Ok(Self {
            seed,
            patch,
            out_channels,
            projection,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn project(&self, frame: &Image) -> Result<Tensor2D<f64>> {
        numerics::matmul(&patchify(frame, self.patch)?, &self.projection)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub patch: usize,
    pub key_channels: usize,
    pub value_channels: usize,
    pub feature_channels: usize,
    /// Value channels reserved for mask occupancy (the rest carry appearance).
    pub occupancy_channels: usize,
    /// Largest possible key entry.
    pub key_scale: f64,
    /// Temperature of the squared colour distance in the key assignment.
    pub color_temperature: f64,
    /// Decoder logit magnitude for a fully occupied (or empty) patch.
    pub occupancy_gain: f64,
    pub seed: u64,
}

/// Key, value and feature encoders sharing one patch grid, plus the probe
/// the decoder uses to read occupancy back out of a value readout.
#[derive(Clone, Debug)]
pub struct StubEncoders {
    config: EncoderConfig,
    prototypes: Vec<[f64; 3]>,
    value: StubEncoder,
    feature: StubEncoder,
    probe: Vec<f64>,
}

impl StubEncoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let m = config.occupancy_channels;
        if m == 0 || m >= config.value_channels {
            return Err(shape_err(format!(
                "{m} occupancy channels out of {} value channels",
                config.value_channels
            )));
        }
        if !(config.color_temperature > 0.0) {
            return Err(Error::Input("colour temperature must be positive".into()));
        }
        let mut proto_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let prototypes = (0..config.key_channels)
            .map(|_| std::array::from_fn(|_| proto_rng.random_range(0.0..1.0)))
            .collect();
        let value = StubEncoder::new(
            config.seed.wrapping_add(1),
            config.patch,
            config.value_channels - m,
        )?;
        let feature = StubEncoder::new(
            config.seed.wrapping_add(2),
            config.patch,
            config.feature_channels,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
        let mut probe: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = probe.iter().map(|v| v * v).sum::<f64>().sqrt();
        probe.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            config,
            prototypes,
            value,
            feature,
            probe,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Patch-grid height and width for a frame of the given size.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        check_divisible(height, width, self.config.patch)?;
        Ok((height / self.config.patch, width / self.config.patch))
    }

    /// Appearance-only key: `key_scale · softmax_c(−‖m − μ_c‖² / τ)` for the
    /// patch mean colour `m` and prototype colours `μ_c`.
    pub fn encode_key(&self, frame: &Image) -> Result<Tensor2D<f64>> {
        let (ph, pw) = self.grid(frame.height, frame.width)?;
        let p = self.config.patch;
        let tau = self.config.color_temperature;
        let mut keys = Tensor2D::zeros(ph * pw, self.prototypes.len())?;
        for py in 0..ph {
            for px in 0..pw {
                let mut mean = [0.0; 3];
                for dy in 0..p {
                    for dx in 0..p {
                        let rgb = frame.pixel(py * p + dy, px * p + dx);
                        mean.iter_mut().zip(rgb).for_each(|(m, v)| *m += v);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= (p * p) as f64);
                let row = keys.row_mut(py * pw + px);
                for (k, proto) in row.iter_mut().zip(&self.prototypes) {
                    *k = -mean
                        .iter()
                        .zip(proto)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        / tau;
                }
                numerics::softmax_slice(row);
                row.iter_mut().for_each(|k| *k *= self.config.key_scale);
            }
        }
        Ok(keys)
    }

    /// Projected appearance followed by `gain · (2·occupancy − 1)` along the
    /// probe direction.
    pub fn encode_value(&self, frame: &Image, mask: &Mask) -> Result<Tensor2D<f64>> {
        if (mask.height, mask.width) != (frame.height, frame.width) {
            return Err(shape_err("mask and frame sizes differ"));
        }
        let appearance = self.value.project(frame)?;
        let occ = patch_occupancy(mask, self.config.patch)?;
        let m = self.probe.len();
        let cv = self.config.value_channels;
        let gain = self.config.occupancy_gain;
        Tensor2D::from_fn(appearance.rows(), cv, |r, c| {
            if c < cv - m {
                appearance.get(r, c)
            } else {
                self.probe[c - (cv - m)] * gain * (2.0 * occ[r] - 1.0)
            }
        })
    }

    pub fn encode_features(&self, frame: &Image) -> Result<Tensor2D<f64>> {
        self.feature.project(frame)
    }

    /// Per-patch occupancy logit: probe · occupancy channels.
    pub fn occupancy_logits(&self, readout: &Tensor2D<f64>) -> Result<Vec<f64>> {
        let cv = self.config.value_channels;
        if readout.cols() != cv {
            return Err(shape_err(format!(
                "readout has {} channels, decoder expects {cv}",
                readout.cols()
            )));
        }
        let offset = cv - self.probe.len();
        Ok((0..readout.rows())
            .map(|r| numerics::dot(&readout.row(r)[offset..], &self.probe))
            .collect())
    }

    /// Patch probabilities upsampled to pixels by nearest neighbour.
    pub fn decode_mask(
        &self,
        id: ObjectId,
        readout: &Tensor2D<f64>,
        height: usize,
        width: usize,
    ) -> Result<ProbMap> {
        let (ph, pw) = self.grid(height, width)?;
        if readout.rows() != ph * pw {
            return Err(shape_err(format!(
                "readout has {} positions, a {height}x{width} frame has {}",
                readout.rows(),
                ph * pw
            )));
        }
        let patch_prob: Vec<f64> = self
            .occupancy_logits(readout)?
            .into_iter()
            .map(sigmoid)
            .collect();
        let p = self.config.patch;
        let pixels = (0..height * width)
            .map(|i| patch_prob[(i / width / p) * pw + (i % width) / p])
            .collect();
        ProbMap::new(height, width, vec![id], vec![pixels])
    }
}
