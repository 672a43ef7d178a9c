use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, StubEncoders};
use super::metrics::{jaccard, JaccardRow};
use super::sequence::{Mask, SyntheticSequence};
use crate::error::{Error, Result};
use crate::gating::{GateProjector, Reduction};
use crate::multiobject::{
    soft_aggregate, LabelMap, MultiObjectTracker, ObjectId, ProbMap, TrackerConfig, PROB_CLAMP,
};
use crate::numerics::Tensor2D;
use crate::softmax_matching::{softmax_match, MemoryBank};

/// Which matcher carries memory from frame to frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Softmax,
    Linear,
    GatedLinear,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Softmax => "softmax",
            Regime::Linear => "linear",
            Regime::GatedLinear => "gated-linear",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Regime::Softmax),
            "linear" => Ok(Regime::Linear),
            "gated-linear" | "gated" => Ok(Regime::GatedLinear),
            other => Err(Error::Input(format!(
                "unknown propagation regime {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationConfig {
    pub encoder: EncoderConfig,
    pub gate_reduction: Reduction,
    pub gate_normalizer: bool,
    pub gate_seed: u64,
    /// Absorb ground-truth masks instead of predictions.
    pub teacher_forcing: bool,
}

impl Default for PropagationConfig {
    /// 8-pixel patches, 64 key and 256 value channels.
    fn default() -> Self {
        Self::with_channels(64, 256)
    }
}

impl PropagationConfig {
    pub fn with_channels(key_channels: usize, value_channels: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                patch: 8,
                key_channels,
                value_channels,
                feature_channels: key_channels,
                occupancy_channels: (value_channels / 4).max(1),
                key_scale: 12.0,
                color_temperature: 0.01,
                occupancy_gain: 6.0,
                seed: 0x5eed,
            },
            // Summing over every patch saturates the sigmoid.
            gate_reduction: Reduction::Mean,
            gate_normalizer: false,
            gate_seed: 0x6a7e,
            teacher_forcing: false,
        }
    }

    /// 8 key and 16 value channels, small enough for brute-force checks.
    pub fn small() -> Self {
        Self::with_channels(8, 16)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub frame_index: usize,
    /// Merged probabilities, background first.
    pub probs: ProbMap,
    pub labels: LabelMap,
    /// Scores of objects annotated before this frame.
    pub jaccard: BTreeMap<ObjectId, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationResult {
    pub regime: Regime,
    pub frames: Vec<FrameOutput>,
}

impl PropagationResult {
    pub fn jaccard_rows(&self) -> Vec<JaccardRow> {
        self.frames
            .iter()
            .flat_map(|f| {
                f.jaccard
                    .iter()
                    .map(move |(&object_id, &jaccard)| JaccardRow {
                        frame_index: f.frame_index,
                        object_id,
                        jaccard,
                    })
            })
            .collect()
    }

    /// Mean over every scored (frame, object) pair; `NaN` if none.
    pub fn mean_jaccard(&self) -> f64 {
        let rows = self.jaccard_rows();
        rows.iter().map(|r| r.jaccard).sum::<f64>() / rows.len() as f64
    }

    /// Per-frame mean over objects, for frames with at least one score.
    pub fn per_frame_mean(&self) -> Vec<(usize, f64)> {
        self.frames
            .iter()
            .filter(|f| !f.jaccard.is_empty())
            .map(|f| {
                (
                    f.frame_index,
                    f.jaccard.values().sum::<f64>() / f.jaccard.len() as f64,
                )
            })
            .collect()
    }
}

enum Memory {
    Banks(BTreeMap<ObjectId, MemoryBank<f64>>),
    Tracker(MultiObjectTracker<f64>),
}

impl Memory {
    fn ids(&self) -> Vec<ObjectId> {
        match self {
            Memory::Banks(b) => b.keys().copied().collect(),
            Memory::Tracker(t) => t.ids().collect(),
        }
    }

    fn readout(&self, id: ObjectId, key: &Tensor2D<f64>) -> Result<Tensor2D<f64>> {
        match self {
            Memory::Banks(b) => softmax_match(&b[&id], key),
            Memory::Tracker(t) => t.readout(id, key),
        }
    }
}

fn hard_channel(mask: &Mask) -> Vec<f64> {
    mask.data
        .iter()
        .map(|&b| if b { 1.0 - PROB_CLAMP } else { PROB_CLAMP })
        .collect()
}

/// Semi-supervised propagation: each object's first non-empty ground-truth
/// mask is given, every later frame is matched, decoded, merged and (unless
/// teacher forcing) re-encoded from the prediction before being absorbed.
pub fn propagate(
    sequence: &SyntheticSequence,
    regime: Regime,
    config: &PropagationConfig,
) -> Result<PropagationResult> {
    let enc = StubEncoders::new(config.encoder)?;
    let (h, w) = (sequence.height(), sequence.width());
    enc.grid(h, w)?;
    let mut memory = match regime {
        Regime::Softmax => Memory::Banks(BTreeMap::new()),
        Regime::Linear | Regime::GatedLinear => {
            let gating = regime == Regime::GatedLinear;
            let projector = gating
                .then(|| {
                    GateProjector::seeded(
                        config.encoder.feature_channels,
                        config.encoder.key_channels,
                        config.gate_reduction,
                        config.gate_seed,
                    )
                })
                .transpose()?
                .map(Arc::new);
            Memory::Tracker(MultiObjectTracker::new(
                TrackerConfig {
                    key_channels: config.encoder.key_channels,
                    value_channels: config.encoder.value_channels,
                    gating,
                    gate_normalizer: config.gate_normalizer,
                },
                projector,
            )?)
        }
    };

    let mut frames = Vec::with_capacity(sequence.num_frames());
    for (t, (frame, gt)) in sequence.frames.iter().zip(&sequence.gt_masks).enumerate() {
        let key = enc.encode_key(frame)?;
        let existing = memory.ids();
        let new: Vec<ObjectId> = gt
            .iter()
            .filter(|(id, m)| !existing.contains(id) && !m.is_empty())
            .map(|(id, _)| *id)
            .collect();

        let mut ids = Vec::new();
        let mut channels = Vec::new();
        for &id in &existing {
            let readout = memory.readout(id, &key)?;
            let decoded = enc.decode_mask(id, &readout, h, w)?;
            ids.push(id);
            channels.push(decoded.channels()[0].clone());
        }
        for &id in &new {
            ids.push(id);
            channels.push(hard_channel(&gt[&id]));
        }
        let (probs, labels) = soft_aggregate(&ProbMap::new(h, w, ids, channels)?)?;

        let mut scores = BTreeMap::new();
        for &id in &existing {
            scores.insert(id, jaccard(&mask_from_labels(&labels, id), &gt[&id])?);
        }

        let registered: Vec<ObjectId> = existing.iter().chain(&new).copied().collect();
        let mut values = BTreeMap::new();
        for &id in &registered {
            let mask = if config.teacher_forcing {
                gt[&id].clone()
            } else {
                mask_from_labels(&labels, id)
            };
            values.insert(id, enc.encode_value(frame, &mask)?);
        }
        match &mut memory {
            Memory::Banks(banks) => {
                for (id, value) in values {
                    banks.entry(id).or_default().push(key.clone(), value)?;
                }
            }
            Memory::Tracker(tracker) => {
                for &id in &new {
                    tracker.register_object(id, t)?;
                }
                if !tracker.is_empty() {
                    let features = enc.encode_features(frame)?;
                    tracker.step(&key, &values, Some(&features))?;
                } else {
                    // Keep frame numbering aligned while nothing is tracked.
                    tracker.skip_frame();
                }
            }
        }
        frames.push(FrameOutput {
            frame_index: t,
            probs,
            labels,
            jaccard: scores,
        });
    }
    Ok(PropagationResult { regime, frames })
}

fn mask_from_labels(labels: &LabelMap, id: ObjectId) -> Mask {
    Mask {
        height: labels.height,
        width: labels.width,
        data: labels.mask_of(id),
    }
}

/// Jaccard of decoding each first-frame ground-truth value directly, with
/// no matching involved. This bounds what propagation can reach.
pub fn round_trip_jaccard(
    sequence: &SyntheticSequence,
    config: &PropagationConfig,
) -> Result<BTreeMap<ObjectId, f64>> {
    let enc = StubEncoders::new(config.encoder)?;
    let (h, w) = (sequence.height(), sequence.width());
    let frame = &sequence.frames[0];
    let gt = &sequence.gt_masks[0];
    let mut ids = Vec::new();
    let mut channels = Vec::new();
    for (&id, mask) in gt.iter().filter(|(_, m)| !m.is_empty()) {
        let value = enc.encode_value(frame, mask)?;
        ids.push(id);
        channels.push(enc.decode_mask(id, &value, h, w)?.channels()[0].clone());
    }
    let (_, labels) = soft_aggregate(&ProbMap::new(h, w, ids.clone(), channels)?)?;
    ids.into_iter()
        .map(|id| Ok((id, jaccard(&mask_from_labels(&labels, id), &gt[&id])?)))
        .collect()
}

/// Jaccard of the first annotated frame read back through the regime's own
/// matcher: its ground truth is absorbed, the same frame is queried, decoded
/// and merged. On a static sequence every propagated frame should score this.
pub fn matched_round_trip_jaccard(
    sequence: &SyntheticSequence,
    regime: Regime,
    config: &PropagationConfig,
) -> Result<BTreeMap<ObjectId, f64>> {
    let frame = sequence
        .frames
        .first()
        .ok_or_else(|| Error::Input("empty sequence".into()))?;
    let gt = &sequence.gt_masks[0];
    let twice = SyntheticSequence {
        spec: sequence.spec.clone(),
        frames: vec![frame.clone(), frame.clone()],
        gt_masks: vec![gt.clone(), gt.clone()],
    };
    let mut result = propagate(&twice, regime, config)?;
    Ok(result.frames.pop().expect("two frames").jaccard)
}
