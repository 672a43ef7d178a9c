//! Equivalence checks between every matcher and a plain scalar-loop
//! reference, run by `linmatch verify`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gating::{unrolled_gated_reference, GateVector};
use crate::linear_matching::{linear_match_parallel, MatchState};
use crate::multiobject::{soft_aggregate, MultiObjectTracker, ObjectId, ProbMap, TrackerConfig};
use crate::numerics::{max_relative_error, Tensor2D, DEFAULT_EPSILON};
use crate::softmax_matching::{
    generalized_match, generalized_match_with_epsilon, softmax_match, softmax_match_materialized,
    ExpDot, FeatureKernel, MemoryBank,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

type Rows = Vec<Vec<f64>>;

/// `out[q] = Σ_i Σ_j w(q,i,j) V_i[j] / Σ_i Σ_j w(q,i,j)`.
fn weighted_average_oracle(
    keys: &[Rows],
    values: &[Rows],
    query: &Rows,
    weight: impl Fn(&[f64], &[f64]) -> f64,
) -> Rows {
    let cv = values[0][0].len();
    query
        .iter()
        .map(|q| {
            let mut num = vec![0.0; cv];
            let mut den = 0.0;
            for (k, v) in keys.iter().zip(values) {
                for (kj, vj) in k.iter().zip(v) {
                    let w = weight(q, kj);
                    den += w;
                    for (n, x) in num.iter_mut().zip(vj) {
                        *n += w * x;
                    }
                }
            }
            num.iter().map(|n| n / den).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

struct Problem {
    keys: Vec<Tensor2D>,
    values: Vec<Tensor2D>,
    query: Tensor2D,
}

impl Problem {
    fn random(
        rng: &mut ChaCha8Rng,
        t: usize,
        hw: usize,
        hw_q: usize,
        ck: usize,
        cv: usize,
    ) -> Result<Self> {
        let keys = (0..t)
            .map(|_| Tensor2D::random_uniform(hw, ck, -1.0, 1.0, rng))
            .collect::<Result<_>>()?;
        let values = (0..t)
            .map(|_| Tensor2D::random_uniform(hw, cv, -1.0, 1.0, rng))
            .collect::<Result<_>>()?;
        let query = Tensor2D::random_uniform(hw_q, ck, -1.0, 1.0, rng)?;
        Ok(Self {
            keys,
            values,
            query,
        })
    }

    fn bank(&self) -> Result<MemoryBank> {
        MemoryBank::from_frames(self.keys.iter().cloned().zip(self.values.iter().cloned()))
    }

    fn state(&self) -> Result<MatchState> {
        let ck = self.query.cols();
        let cv = self.values[0].cols();
        self.keys
            .iter()
            .zip(&self.values)
            .try_fold(MatchState::new(ck, cv)?, |s, (k, v)| s.absorb(k, v))
    }

    fn oracle(&self, weight: impl Fn(&[f64], &[f64]) -> f64) -> Result<Tensor2D> {
        let keys: Vec<Rows> = self.keys.iter().map(Tensor2D::to_rows).collect();
        let values: Vec<Rows> = self.values.iter().map(Tensor2D::to_rows).collect();
        Tensor2D::from_rows(&weighted_average_oracle(
            &keys,
            &values,
            &self.query.to_rows(),
            weight,
        ))
    }
}

fn outcome(name: &'static str, a: &Tensor2D, b: &Tensor2D, tolerance: f64) -> Result<CheckOutcome> {
    Ok(CheckOutcome {
        name,
        error: max_relative_error(a, b)?,
        tolerance,
    })
}

/// Runs every check on data drawn from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Problem::random(&mut rng, 4, 9, 6, 5, 7)?;
    let bank = p.bank()?;
    let soft = softmax_match(&bank, &p.query)?;
    let state = p.state()?;
    let mut out = vec![
        outcome(
            "softmax matching vs scalar loops",
            &soft,
            &p.oracle(|q, k| dot(q, k).exp())?,
            1e-12,
        )?,
        outcome(
            "materialized vs accumulating softmax",
            &softmax_match_materialized(&bank, &p.query)?,
            &soft,
            1e-12,
        )?,
        outcome(
            "generalized exp-dot vs softmax",
            &generalized_match(&bank, &p.query, &ExpDot)?,
            &soft,
            1e-12,
        )?,
        outcome(
            "linear parallel vs scalar loops",
            &linear_match_parallel(&bank, &p.query)?,
            &p.oracle(|q, k| dot(&softmax(q), &softmax(k)))?,
            1e-7,
        )?,
        outcome(
            "feature-kernel matching vs linear parallel",
            &generalized_match_with_epsilon(&bank, &p.query, &FeatureKernel, DEFAULT_EPSILON)?,
            &linear_match_parallel(&bank, &p.query)?,
            1e-10,
        )?,
        outcome(
            "recurrent vs parallel linear",
            &state.readout(&p.query)?,
            &linear_match_parallel(&bank, &p.query)?,
            1e-10,
        )?,
    ];

    // Gated recurrence against the closed-form product of gates.
    let gates = (0..p.keys.len())
        .map(|_| GateVector::new((0..5).map(|_| rng.random_range(0.05..0.95)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let gated_cases = [
        (
            false,
            "gated state vs unrolled",
            "gated normalizer vs unrolled",
        ),
        (
            true,
            "gated state vs unrolled, normalizer gated",
            "gated normalizer vs unrolled, normalizer gated",
        ),
    ];
    for (gate_z, state_name, normalizer_name) in gated_cases {
        let rec = p
            .keys
            .iter()
            .zip(&p.values)
            .zip(&gates)
            .try_fold(MatchState::new(5, 7)?, |s, ((k, v), g)| {
                s.gated_absorb(g, k, v, gate_z)
            })?;
        let closed = unrolled_gated_reference(&p.keys, &p.values, &gates, gate_z)?;
        out.push(outcome(state_name, rec.state(), closed.state(), 1e-10)?);
        out.push(outcome(
            normalizer_name,
            rec.normalizer(),
            closed.normalizer(),
            1e-10,
        )?);
    }
    let near_one = GateVector::uniform(5, 1.0 - 1e-12)?;
    let gated = p
        .keys
        .iter()
        .zip(&p.values)
        .try_fold(MatchState::new(5, 7)?, |s, (k, v)| {
            s.gated_absorb(&near_one, k, v, false)
        })?;
    out.push(outcome(
        "near-identity gate vs ungated",
        &gated.readout(&p.query)?,
        &state.readout(&p.query)?,
        1e-9,
    )?);

    // One tracker per object against standalone states.
    let mut tracker = MultiObjectTracker::new(
        TrackerConfig {
            key_channels: 5,
            value_channels: 7,
            gating: false,
            gate_normalizer: false,
        },
        None,
    )?;
    let other: Vec<Tensor2D> = (0..p.keys.len())
        .map(|_| Tensor2D::random_uniform(9, 7, -1.0, 1.0, &mut rng))
        .collect::<Result<_>>()?;
    tracker.register_object(ObjectId(1), 0)?;
    tracker.register_object(ObjectId(2), 0)?;
    for (i, key) in p.keys.iter().enumerate() {
        let values = BTreeMap::from([
            (ObjectId(1), p.values[i].clone()),
            (ObjectId(2), other[i].clone()),
        ]);
        tracker.step(key, &values, None)?;
    }
    out.push(outcome(
        "tracker object vs standalone state",
        &tracker.readout(ObjectId(1), &p.query)?,
        &state.readout(&p.query)?,
        0.0,
    )?);

    out.push(relabeling_check(&mut rng)?);
    Ok(out)
}

fn relabeling_check(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (h, w) = (3, 4);
    let channels: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let ids = vec![ObjectId(1), ObjectId(2), ObjectId(3)];
    let permuted_ids = vec![ObjectId(7), ObjectId(4), ObjectId(9)];
    let (a, _) = soft_aggregate(&ProbMap::new(h, w, ids.clone(), channels.clone())?)?;
    let (b, _) = soft_aggregate(&ProbMap::new(
        h,
        w,
        permuted_ids.iter().rev().copied().collect(),
        channels.iter().rev().cloned().collect(),
    )?)?;
    let mut error = 0.0f64;
    for (id, pid) in ids.iter().zip(&permuted_ids) {
        let (x, y) = (a.channel(*id).expect("id"), b.channel(*pid).expect("id"));
        error = x
            .iter()
            .zip(y)
            .fold(error, |e, (p, q)| e.max((p - q).abs()));
    }
    let (bg_a, bg_b) = (&a.channels()[0], &b.channels()[0]);
    error = bg_a
        .iter()
        .zip(bg_b)
        .fold(error, |e, (p, q)| e.max((p - q).abs()));
    Ok(CheckOutcome {
        name: "soft aggregation relabeling",
        error,
        tolerance: 0.0,
    })
}
