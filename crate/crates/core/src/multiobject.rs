//! One recurrent state per tracked object, and soft-aggregation of
//! per-object probabilities into a single labeling.
//!
//! Objects share the frame key and the frame gate; only their values (and
//! therefore their states) differ. A state is created when its object first
//! appears and never interacts with the others.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gating::GateProjector;
use crate::linear_matching::MatchState;
use crate::numerics::{check_dtype, DType, Scalar, Tensor2D};

/// Object label. `0` is reserved for the background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u32);

impl ObjectId {
    pub const BACKGROUND: ObjectId = ObjectId(0);

    pub fn is_background(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub key_channels: usize,
    pub value_channels: usize,
    pub gating: bool,
    pub gate_normalizer: bool,
}

#[derive(Clone, Debug)]
pub struct MultiObjectTracker<T: Scalar = f64> {
    config: TrackerConfig,
    projector: Option<Arc<GateProjector<T>>>,
    states: BTreeMap<ObjectId, MatchState<T>>,
    creation_frame: BTreeMap<ObjectId, usize>,
    next_frame: usize,
}

impl<T: Scalar> MultiObjectTracker<T> {
    /// `projector` is required when `config.gating` is set.
    pub fn new(config: TrackerConfig, projector: Option<Arc<GateProjector<T>>>) -> Result<Self> {
        match (&projector, config.gating) {
            (None, true) => {
                return Err(Error::Input(
                    "gating enabled without a gate projector".into(),
                ))
            }
            (Some(p), _) if p.key_channels() != config.key_channels => {
                return Err(shape_err(format!(
                    "gate projector emits {} channels, tracker keys have {}",
                    p.key_channels(),
                    config.key_channels
                )))
            }
            _ => {}
        }
        Ok(Self {
            config,
            projector,
            states: BTreeMap::new(),
            creation_frame: BTreeMap::new(),
            next_frame: 0,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn projector(&self) -> Option<&Arc<GateProjector<T>>> {
        self.projector.as_ref()
    }

    /// Index of the frame the next [`step`](Self::step) will absorb.
    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    pub fn ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.states.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, id: ObjectId) -> Option<&MatchState<T>> {
        self.states.get(&id)
    }

    pub fn creation_frame(&self, id: ObjectId) -> Option<usize> {
        self.creation_frame.get(&id).copied()
    }

    /// Adds a zero state for `id`, first absorbed at `frame_index`, which
    /// must be the frame about to be stepped.
    pub fn register_object(&mut self, id: ObjectId, frame_index: usize) -> Result<()> {
        if id.is_background() {
            return Err(Error::Input(
                "object id 0 is reserved for the background".into(),
            ));
        }
        if self.states.contains_key(&id) {
            return Err(Error::Conflict(format!(
                "object {id} is already registered"
            )));
        }
        if frame_index != self.next_frame {
            return Err(Error::Input(format!(
                "object {id} registered at frame {frame_index}, tracker is at frame {}",
                self.next_frame
            )));
        }
        let state = MatchState::new(self.config.key_channels, self.config.value_channels)?;
        self.states.insert(id, state);
        self.creation_frame.insert(id, frame_index);
        Ok(())
    }

    /// Absorbs one frame into every registered object's state. With gating
    /// enabled a single gate is computed from `frame_features` and shared by
    /// all objects. Nothing is modified when an error is returned.
    pub fn step(
        &mut self,
        frame_key: &Tensor2D<T>,
        per_object_values: &BTreeMap<ObjectId, Tensor2D<T>>,
        frame_features: Option<&Tensor2D<T>>,
    ) -> Result<()> {
        if let Some(extra) = per_object_values
            .keys()
            .find(|id| !self.states.contains_key(id))
        {
            return Err(Error::Input(format!(
                "values given for unregistered object {extra}"
            )));
        }
        let gate = match (&self.projector, self.config.gating) {
            (Some(proj), true) => {
                let features = frame_features.ok_or_else(|| {
                    Error::Input("gating enabled but no frame features given".into())
                })?;
                Some(proj.gate(features)?)
            }
            _ => None,
        };
        let mut updated = Vec::with_capacity(self.states.len());
        for (&id, state) in &self.states {
            let value = per_object_values
                .get(&id)
                .ok_or_else(|| Error::Input(format!("no value map for object {id}")))?;
            let next = match &gate {
                Some(g) => state.gated_absorb(g, frame_key, value, self.config.gate_normalizer)?,
                None => state.absorb(frame_key, value)?,
            };
            updated.push((id, next));
        }
        for (id, next) in updated {
            self.states.insert(id, next);
        }
        self.next_frame += 1;
        Ok(())
    }

    /// Advances the frame counter of a tracker that holds no objects yet.
    pub(crate) fn skip_frame(&mut self) {
        debug_assert!(self.states.is_empty());
        self.next_frame += 1;
    }

    pub fn readout(&self, id: ObjectId, query_key: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        self.states
            .get(&id)
            .ok_or_else(|| Error::Input(format!("object {id} is not registered")))?
            .readout(query_key)
    }

    /// Writes `manifest.json`, one state file pair per object and, when
    /// present, the gate projector into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            config: self.config,
            dtype: T::DTYPE,
            next_frame: self.next_frame,
            objects: self
                .creation_frame
                .iter()
                .map(|(&id, &creation_frame)| ManifestObject {
                    id,
                    creation_frame,
                    state: format!("object_{id}.json"),
                })
                .collect(),
            gate_projector: self
                .projector
                .as_ref()
                .map(|_| "gate_projector.json".to_string()),
        };
        for obj in &manifest.objects {
            self.states[&obj.id].save(dir.join(&obj.state))?;
        }
        if let (Some(p), Some(name)) = (&self.projector, &manifest.gate_projector) {
            p.save(dir.join(name))?;
        }
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        check_dtype::<T>(manifest.dtype)?;
        let projector = manifest
            .gate_projector
            .as_ref()
            .map(|name| GateProjector::load(dir.join(name)).map(Arc::new))
            .transpose()?;
        let mut tracker = Self::new(manifest.config, projector)?;
        for obj in manifest.objects {
            let state = MatchState::load(dir.join(&obj.state))?;
            if state.key_channels() != manifest.config.key_channels
                || state.value_channels() != manifest.config.value_channels
            {
                return Err(shape_err(format!(
                    "state of object {} has wrong channels",
                    obj.id
                )));
            }
            tracker.states.insert(obj.id, state);
            tracker.creation_frame.insert(obj.id, obj.creation_frame);
        }
        tracker.next_frame = manifest.next_frame;
        Ok(tracker)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: TrackerConfig,
    dtype: DType,
    next_frame: usize,
    objects: Vec<ManifestObject>,
    gate_projector: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestObject {
    id: ObjectId,
    creation_frame: usize,
    state: String,
}

/// Per-object probability maps over an `H × W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    ids: Vec<ObjectId>,
    channels: Vec<Vec<f64>>,
}

impl ProbMap {
    pub fn new(
        height: usize,
        width: usize,
        ids: Vec<ObjectId>,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if ids.len() != channels.len() {
            return Err(shape_err(format!(
                "{} ids for {} channels",
                ids.len(),
                channels.len()
            )));
        }
        if let Some(c) = channels.iter().find(|c| c.len() != height * width) {
            return Err(shape_err(format!(
                "channel of {} entries for {height}x{width}",
                c.len()
            )));
        }
        let mut seen = ids.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != ids.len() {
            return Err(Error::Input(
                "duplicate object ids in probability map".into(),
            ));
        }
        if let Some(p) = channels
            .iter()
            .flatten()
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::Input(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            ids,
            channels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[ObjectId] {
        &self.ids
    }

    pub fn channel(&self, id: ObjectId) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(|k| self.channels[k].as_slice())
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }
}

/// Per-pixel object labels, background = [`ObjectId::BACKGROUND`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<ObjectId>,
}

impl LabelMap {
    pub fn mask_of(&self, id: ObjectId) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }
}

/// Probabilities are clamped into this range before odds are taken.
pub const PROB_CLAMP: f64 = 1e-7;

/// Soft-aggregation: background is `Π (1 − p_i)`, every channel is turned
/// into odds `p / (1 − p)` and the odds are normalized to sum to one.
///
/// Output channels are the background (id 0) followed by the input channels
/// in input order. Labels take the arg-max channel, ties going to the
/// smallest id. Products and sums run over per-pixel sorted values, so
/// relabeling the objects permutes the output without changing any bit.
pub fn soft_aggregate(prob: &ProbMap) -> Result<(ProbMap, LabelMap)> {
    let n = prob.ids.len();
    let pixels = prob.height * prob.width;
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    let mut merged = vec![vec![0.0; pixels]; n + 1];
    let mut labels = vec![ObjectId::BACKGROUND; pixels];
    let mut ids = Vec::with_capacity(n + 1);
    ids.push(ObjectId::BACKGROUND);
    ids.extend_from_slice(&prob.ids);

    let mut p = vec![0.0; n + 1];
    let mut scratch = vec![0.0; n + 1];
    for px in 0..pixels {
        for (k, ch) in prob.channels.iter().enumerate() {
            let v = ch[px];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("probability {v} outside [0, 1]")));
            }
            p[k + 1] = v.clamp(lo, hi);
        }
        scratch[..n].copy_from_slice(&p[1..]);
        scratch[..n].sort_by(f64::total_cmp);
        p[0] = scratch[..n]
            .iter()
            .fold(1.0, |acc, &v| acc * (1.0 - v))
            .clamp(lo, hi);

        for v in p.iter_mut() {
            *v /= 1.0 - *v;
        }
        scratch.copy_from_slice(&p);
        scratch.sort_by(f64::total_cmp);
        let total: f64 = scratch.iter().sum();

        let mut best = 0;
        for k in 0..=n {
            let m = p[k] / total;
            merged[k][px] = m;
            let better = m > merged[best][px] || (m == merged[best][px] && ids[k] < ids[best]);
            if k > 0 && better {
                best = k;
            }
        }
        labels[px] = ids[best];
    }
    let merged = ProbMap {
        height: prob.height,
        width: prob.width,
        ids,
        channels: merged,
    };
    Ok((
        merged,
        LabelMap {
            height: prob.height,
            width: prob.width,
            labels,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::Reduction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(gating: bool) -> TrackerConfig {
        TrackerConfig {
            key_channels: 3,
            value_channels: 2,
            gating,
            gate_normalizer: false,
        }
    }

    fn frame(
        seed: u64,
        ids: &[u32],
    ) -> (
        Tensor2D<f64>,
        BTreeMap<ObjectId, Tensor2D<f64>>,
        Tensor2D<f64>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key = Tensor2D::random_uniform(4, 3, -1.0, 1.0, &mut rng).unwrap();
        let values = ids
            .iter()
            .map(|&i| {
                (
                    ObjectId(i),
                    Tensor2D::random_uniform(4, 2, -1.0, 1.0, &mut rng).unwrap(),
                )
            })
            .collect();
        let feats = Tensor2D::random_uniform(4, 5, -1.0, 1.0, &mut rng).unwrap();
        (key, values, feats)
    }

    fn gated_tracker() -> MultiObjectTracker<f64> {
        let proj = GateProjector::seeded(5, 3, Reduction::Mean, 4).unwrap();
        MultiObjectTracker::new(config(true), Some(Arc::new(proj))).unwrap()
    }

    #[test]
    fn register_into_empty_tracker() {
        let mut t = MultiObjectTracker::<f64>::new(config(false), None).unwrap();
        t.register_object(ObjectId(1), 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.state(ObjectId(1)).unwrap().frames_absorbed(), 0);
        assert!(matches!(
            t.register_object(ObjectId(1), 0),
            Err(Error::Conflict(_))
        ));
        assert!(matches!(
            t.register_object(ObjectId(0), 0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            t.register_object(ObjectId(2), 3),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn late_registration_leaves_existing_state_alone() {
        let mut t = gated_tracker();
        t.register_object(ObjectId(1), 0).unwrap();
        for f in 0..5 {
            let (k, v, feats) = frame(f, &[1]);
            t.step(&k, &v, Some(&feats)).unwrap();
        }
        let before = t.state(ObjectId(1)).unwrap().clone();
        t.register_object(ObjectId(2), 5).unwrap();
        assert_eq!(t.state(ObjectId(1)).unwrap(), &before);
        assert_eq!(t.creation_frame(ObjectId(2)), Some(5));
    }

    #[test]
    fn step_counts_frames_per_object() {
        let mut t = MultiObjectTracker::<f64>::new(config(false), None).unwrap();
        for i in 1..=3 {
            t.register_object(ObjectId(i), 0).unwrap();
        }
        let (k, v, _) = frame(1, &[1, 2, 3]);
        t.step(&k, &v, None).unwrap();
        assert!(t
            .ids()
            .all(|id| t.state(id).unwrap().frames_absorbed() == 1));
        t.register_object(ObjectId(4), 1).unwrap();
        let (k, v, _) = frame(2, &[1, 2, 3, 4]);
        t.step(&k, &v, None).unwrap();
        for id in t.ids() {
            let expected = t.next_frame() - 1 - t.creation_frame(id).unwrap() + 1;
            assert_eq!(t.state(id).unwrap().frames_absorbed(), expected);
        }
    }

    #[test]
    fn single_object_step_is_gated_absorb() {
        let mut t = gated_tracker();
        t.register_object(ObjectId(1), 0).unwrap();
        let mut direct = MatchState::new(3, 2).unwrap();
        for f in 0..3 {
            let (k, v, feats) = frame(f, &[1]);
            t.step(&k, &v, Some(&feats)).unwrap();
            let g = t.projector().unwrap().gate(&feats).unwrap();
            direct = direct
                .gated_absorb(&g, &k, &v[&ObjectId(1)], false)
                .unwrap();
        }
        assert_eq!(t.state(ObjectId(1)).unwrap(), &direct);
    }

    #[test]
    fn identical_values_give_identical_states() {
        let mut t = gated_tracker();
        t.register_object(ObjectId(1), 0).unwrap();
        t.register_object(ObjectId(2), 0).unwrap();
        let (k, mut v, feats) = frame(0, &[1]);
        let shared = v[&ObjectId(1)].clone();
        v.insert(ObjectId(2), shared);
        t.step(&k, &v, Some(&feats)).unwrap();
        assert_eq!(t.state(ObjectId(1)), t.state(ObjectId(2)));
    }

    #[test]
    fn missing_values_fail_without_side_effects() {
        let mut t = MultiObjectTracker::<f64>::new(config(false), None).unwrap();
        t.register_object(ObjectId(1), 0).unwrap();
        t.register_object(ObjectId(2), 0).unwrap();
        let (k, v, _) = frame(0, &[1]);
        assert!(matches!(t.step(&k, &v, None), Err(Error::Input(_))));
        assert_eq!(t.next_frame(), 0);
        assert_eq!(t.state(ObjectId(1)).unwrap().frames_absorbed(), 0);
        let (k, v, _) = frame(0, &[1, 2, 9]);
        assert!(matches!(t.step(&k, &v, None), Err(Error::Input(_))));
        let mut g = gated_tracker();
        g.register_object(ObjectId(1), 0).unwrap();
        let (k, v, _) = frame(0, &[1]);
        assert!(matches!(g.step(&k, &v, None), Err(Error::Input(_))));
    }

    #[test]
    fn gating_requires_projector() {
        assert!(MultiObjectTracker::<f64>::new(config(true), None).is_err());
        let proj = Arc::new(GateProjector::seeded(5, 4, Reduction::Sum, 0).unwrap());
        assert!(matches!(
            MultiObjectTracker::<f64>::new(config(true), Some(proj)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut t = gated_tracker();
        t.register_object(ObjectId(3), 0).unwrap();
        let (k, v, feats) = frame(0, &[3]);
        t.step(&k, &v, Some(&feats)).unwrap();
        t.register_object(ObjectId(7), 1).unwrap();
        let (k, v, feats) = frame(1, &[3, 7]);
        t.step(&k, &v, Some(&feats)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let back = MultiObjectTracker::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.next_frame(), 2);
        assert_eq!(back.creation_frame(ObjectId(7)), Some(1));
        for id in [ObjectId(3), ObjectId(7)] {
            assert_eq!(back.state(id), t.state(id));
        }
        assert_eq!(
            back.projector().unwrap().as_ref(),
            t.projector().unwrap().as_ref()
        );
    }

    #[test]
    fn half_probability_ties_to_background() {
        let prob = ProbMap::new(2, 2, vec![ObjectId(1)], vec![vec![0.5; 4]]).unwrap();
        let (merged, labels) = soft_aggregate(&prob).unwrap();
        assert_eq!(merged.ids(), &[ObjectId(0), ObjectId(1)]);
        for ch in merged.channels() {
            assert!(ch.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        }
        assert!(labels.labels.iter().all(|l| l.is_background()));
    }

    #[test]
    fn confident_object_wins() {
        let prob = ProbMap::new(1, 3, vec![ObjectId(4)], vec![vec![1.0 - 1e-7; 3]]).unwrap();
        let (_, labels) = soft_aggregate(&prob).unwrap();
        assert!(labels.labels.iter().all(|&l| l == ObjectId(4)));
    }

    #[test]
    fn two_object_odds_normalization() {
        let prob = ProbMap::new(
            1,
            1,
            vec![ObjectId(1), ObjectId(2)],
            vec![vec![0.8], vec![0.3]],
        )
        .unwrap();
        let (merged, labels) = soft_aggregate(&prob).unwrap();
        let p0: f64 = 0.2 * 0.7;
        let odds = [p0 / (1.0 - p0), 0.8 / 0.2, 0.3 / 0.7];
        let total: f64 = odds.iter().sum();
        for (k, o) in odds.iter().enumerate() {
            assert!((merged.channels()[k][0] - o / total).abs() < 1e-12);
        }
        assert_eq!(labels.labels, vec![ObjectId(1)]);
    }

    #[test]
    fn out_of_range_probability_rejected() {
        assert!(matches!(
            ProbMap::new(1, 1, vec![ObjectId(1)], vec![vec![1.5]]),
            Err(Error::Input(_))
        ));
        assert!(ProbMap::new(1, 2, vec![ObjectId(1)], vec![vec![0.5]]).is_err());
    }
}
