//! Latency and accounted-memory benchmarks of the matching regimes.
//!
//! The timed unit is one query frame matched against memory that has
//! already been built (bank or states); key encoding and memory updates are
//! excluded. Memory figures come from [`accounting`], never from RSS, and
//! are checked against closed-form byte counts in [`expected`].

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GateProjector, Reduction};
use crate::linear_matching::MatchState;
use crate::numerics::{accounting, DType, Scalar, Tensor2D};
use crate::softmax_matching::{softmax_match, softmax_match_materialized, MemoryBank};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchRegime {
    Softmax,
    SoftmaxMaterialized,
    Linear,
    GatedLinear,
}

impl BenchRegime {
    pub const ALL: [BenchRegime; 4] = [
        BenchRegime::Softmax,
        BenchRegime::SoftmaxMaterialized,
        BenchRegime::Linear,
        BenchRegime::GatedLinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchRegime::Softmax => "softmax",
            BenchRegime::SoftmaxMaterialized => "softmax-materialized",
            BenchRegime::Linear => "linear",
            BenchRegime::GatedLinear => "gated-linear",
        }
    }

    fn is_softmax(self) -> bool {
        matches!(
            self,
            BenchRegime::Softmax | BenchRegime::SoftmaxMaterialized
        )
    }
}

impl fmt::Display for BenchRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown bench regime {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub regime: BenchRegime,
    /// Memory frames.
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub key_channels: usize,
    pub value_channels: usize,
    pub objects: usize,
    pub dtype: DType,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub mem_cap_bytes: u64,
    /// Each timed sample loops the unit until it lasts at least this long.
    pub min_sample_ns: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            regime: BenchRegime::Linear,
            t: 8,
            h: 32,
            w: 32,
            key_channels: 64,
            value_channels: 256,
            objects: 1,
            dtype: DType::F32,
            repeats: 5,
            warmup: 2,
            seed: 0,
            mem_cap_bytes: 3 << 30,
            min_sample_ns: 2_000_000,
        }
    }
}

impl BenchConfig {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::Input(format!(
                "repeats must be at least 3, got {}",
                self.repeats
            )));
        }
        let dims = [
            self.t,
            self.h,
            self.w,
            self.key_channels,
            self.value_channels,
            self.objects,
        ];
        if dims.contains(&0) {
            return Err(Error::Input(
                "all benchmark dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Sets `h × w = hw`, square when `hw` is a perfect square.
    pub fn with_hw(mut self, hw: usize) -> Self {
        let side = (hw as f64).sqrt().round() as usize;
        (self.h, self.w) = if side * side == hw {
            (side, side)
        } else {
            (1, hw)
        };
        self
    }
}

/// Closed-form accounted byte counts per regime.
pub mod expected {
    use super::{BenchConfig, BenchRegime};

    /// Bank (softmax) or states (linear) for all objects.
    pub fn memory_bytes(c: &BenchConfig) -> u64 {
        let (t, hw, ck, cv, n) = dims(c);
        let elems = if c.regime.is_softmax() {
            n * t * hw * (ck + cv)
        } else {
            n * (ck * cv + ck)
        };
        elems * c.dtype.size_bytes() as u64
    }

    /// Working memory of one query-frame matching, excluding its outputs.
    pub fn transient_bytes(c: &BenchConfig) -> u64 {
        let (t, hw, ck, _, _) = dims(c);
        let elems = match c.regime {
            BenchRegime::Softmax => hw * (hw + 1),
            BenchRegime::SoftmaxMaterialized => t * hw * hw,
            BenchRegime::Linear | BenchRegime::GatedLinear => hw * (ck + 1),
        };
        elems * c.dtype.size_bytes() as u64
    }

    /// Readouts of every object for one query frame.
    pub fn output_bytes(c: &BenchConfig) -> u64 {
        let (_, hw, _, cv, n) = dims(c);
        n * hw * cv * c.dtype.size_bytes() as u64
    }

    pub fn query_bytes(c: &BenchConfig) -> u64 {
        let (_, hw, ck, _, _) = dims(c);
        hw * ck * c.dtype.size_bytes() as u64
    }

    /// What the refusal check compares against the memory cap.
    pub fn predicted_bytes(c: &BenchConfig) -> u64 {
        memory_bytes(c) + query_bytes(c) + transient_bytes(c) + output_bytes(c)
    }

    fn dims(c: &BenchConfig) -> (u64, u64, u64, u64, u64) {
        (
            c.t as u64,
            c.hw() as u64,
            c.key_channels as u64,
            c.value_channels as u64,
            c.objects as u64,
        )
    }
}

/// One benchmark measurement. Times are nanoseconds per query frame,
/// memory is accounted bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub regime: BenchRegime,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub hw: usize,
    pub key_channels: usize,
    pub value_channels: usize,
    pub objects: usize,
    pub dtype: DType,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub inner_iterations: u64,
    pub median_ns: f64,
    pub min_ns: f64,
    pub max_ns: f64,
    /// Bank or state bytes held while matching.
    pub memory_bytes: u64,
    /// Working bytes of the matching step alone.
    pub transient_bytes: u64,
    /// Highest accounted bytes over setup and matching.
    pub peak_bytes: u64,
}

/// Refuses up front when [`expected::predicted_bytes`] exceeds the cap.
pub fn check_memory_cap(config: &BenchConfig) -> Result<u64> {
    let predicted = expected::predicted_bytes(config);
    if predicted > config.mem_cap_bytes {
        return Err(Error::PredictedOom {
            predicted,
            cap: config.mem_cap_bytes,
        });
    }
    Ok(predicted)
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchRecord> {
    let mut records = run_interleaved(std::slice::from_ref(config))?;
    Ok(records.remove(0))
}

/// Prepares every config, then times them in rounds: repeat `r` of each
/// config runs before repeat `r + 1` of any, in a shuffled order, so slow
/// spells on the host hit all of them alike. All configs are held in memory
/// at once.
fn run_interleaved(configs: &[BenchConfig]) -> Result<Vec<BenchRecord>> {
    let mut resident = 0u64;
    let mut worst_call = 0u64;
    for c in configs {
        c.validate()?;
        check_memory_cap(c)?;
        if c.dtype != configs[0].dtype {
            return Err(Error::Input(
                "interleaved configs must share a dtype".into(),
            ));
        }
        resident += expected::memory_bytes(c) + expected::query_bytes(c);
        worst_call = worst_call.max(expected::transient_bytes(c) + expected::output_bytes(c));
    }
    let cap = configs.iter().map(|c| c.mem_cap_bytes).min().unwrap_or(0);
    if resident + worst_call > cap {
        return Err(Error::PredictedOom {
            predicted: resident + worst_call,
            cap,
        });
    }
    match configs.first().map(|c| c.dtype) {
        Some(DType::F32) => run_typed::<f32>(configs),
        Some(DType::F64) => run_typed::<f64>(configs),
        None => Ok(Vec::new()),
    }
}

enum Prepared<T: Scalar> {
    Banks(Vec<MemoryBank<T>>),
    States(Vec<MatchState<T>>),
}

impl<T: Scalar> Prepared<T> {
    fn build(config: &BenchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (hw, ck, cv, n) = (
            config.hw(),
            config.key_channels,
            config.value_channels,
            config.objects,
        );
        let key_range = 1.0 / (ck as f64).sqrt();
        match config.regime {
            BenchRegime::Softmax | BenchRegime::SoftmaxMaterialized => {
                let mut banks: Vec<MemoryBank<T>> = (0..n).map(|_| MemoryBank::new()).collect();
                for _ in 0..config.t {
                    let key = Tensor2D::random_uniform(hw, ck, -key_range, key_range, rng)?;
                    for bank in &mut banks {
                        let value = Tensor2D::random_uniform(hw, cv, -1.0, 1.0, rng)?;
                        bank.push(key.clone(), value)?;
                    }
                }
                Ok(Prepared::Banks(banks))
            }
            BenchRegime::Linear | BenchRegime::GatedLinear => {
                let projector = (config.regime == BenchRegime::GatedLinear)
                    .then(|| {
                        GateProjector::<T>::seeded(ck, ck, Reduction::Mean, config.seed ^ 0x9a7e)
                    })
                    .transpose()?;
                let mut states = (0..n)
                    .map(|_| MatchState::new(ck, cv))
                    .collect::<Result<Vec<_>>>()?;
                for _ in 0..config.t {
                    let key = Tensor2D::random_uniform(hw, ck, -key_range, key_range, rng)?;
                    let gate = match &projector {
                        Some(p) => {
                            Some(p.gate(&Tensor2D::random_uniform(hw, ck, -1.0, 1.0, rng)?)?)
                        }
                        None => None,
                    };
                    for state in &mut states {
                        let value = Tensor2D::random_uniform(hw, cv, -1.0, 1.0, rng)?;
                        *state = match &gate {
                            Some(g) => state.gated_absorb(g, &key, &value, false)?,
                            None => state.absorb(&key, &value)?,
                        };
                    }
                }
                Ok(Prepared::States(states))
            }
        }
    }

    fn accounted_bytes(&self) -> usize {
        match self {
            Prepared::Banks(b) => b.iter().map(MemoryBank::accounted_bytes).sum(),
            Prepared::States(s) => s.iter().map(MatchState::accounted_bytes).sum(),
        }
    }

    fn match_query(&self, regime: BenchRegime, query: &Tensor2D<T>) -> Result<Vec<Tensor2D<T>>> {
        match (self, regime) {
            (Prepared::Banks(banks), BenchRegime::Softmax) => {
                banks.iter().map(|b| softmax_match(b, query)).collect()
            }
            (Prepared::Banks(banks), _) => banks
                .iter()
                .map(|b| softmax_match_materialized(b, query))
                .collect(),
            (Prepared::States(states), _) => states.iter().map(|s| s.readout(query)).collect(),
        }
    }
}

struct Session<T: Scalar> {
    config: BenchConfig,
    prepared: Prepared<T>,
    query: Tensor2D<T>,
    inner: u64,
    memory_bytes: u64,
    transient_bytes: u64,
    peak_bytes: u64,
    samples: Vec<f64>,
}

impl<T: Scalar> Session<T> {
    fn open(config: &BenchConfig) -> Result<Self> {
        let whole = accounting::Scope::begin();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let prepared = Prepared::<T>::build(config, &mut rng)?;
        let key_range = 1.0 / (config.key_channels as f64).sqrt();
        let query = Tensor2D::<T>::random_uniform(
            config.hw(),
            config.key_channels,
            -key_range,
            key_range,
            &mut rng,
        )?;
        let memory_bytes = prepared.accounted_bytes() as u64;
        debug_assert_eq!(memory_bytes, expected::memory_bytes(config));

        // First call: byte accounting and calibration of the inner loop.
        let start = Instant::now();
        let (outputs, usage) = accounting::measure(|| prepared.match_query(config.regime, &query));
        let first_ns = start.elapsed().as_nanos().max(1) as u64;
        black_box(outputs?);
        let transient_bytes = usage.transient() as u64;
        debug_assert_eq!(transient_bytes, expected::transient_bytes(config));
        debug_assert_eq!(usage.retained() as u64, expected::output_bytes(config));
        let peak_bytes = whole.finish().peak_delta() as u64;

        Ok(Self {
            config: *config,
            prepared,
            query,
            inner: config.min_sample_ns.div_ceil(first_ns).clamp(1, 1_000_000),
            memory_bytes,
            transient_bytes,
            peak_bytes,
            samples: Vec::with_capacity(config.repeats),
        })
    }

    fn call(&self) -> Result<()> {
        black_box(
            self.prepared
                .match_query(self.config.regime, black_box(&self.query))?,
        );
        Ok(())
    }

    fn sample(&mut self) -> Result<()> {
        let start = Instant::now();
        for _ in 0..self.inner {
            self.call()?;
        }
        self.samples
            .push(start.elapsed().as_nanos() as f64 / self.inner as f64);
        Ok(())
    }

    fn finish(mut self) -> BenchRecord {
        let c = self.config;
        self.samples.sort_by(f64::total_cmp);
        BenchRecord {
            regime: c.regime,
            t: c.t,
            h: c.h,
            w: c.w,
            hw: c.hw(),
            key_channels: c.key_channels,
            value_channels: c.value_channels,
            objects: c.objects,
            dtype: c.dtype,
            repeats: c.repeats,
            warmup: c.warmup,
            seed: c.seed,
            inner_iterations: self.inner,
            median_ns: median(&self.samples),
            min_ns: self.samples[0],
            max_ns: self.samples[self.samples.len() - 1],
            memory_bytes: self.memory_bytes,
            transient_bytes: self.transient_bytes,
            peak_bytes: self.peak_bytes,
        }
    }
}

fn run_typed<T: Scalar>(configs: &[BenchConfig]) -> Result<Vec<BenchRecord>> {
    let mut sessions = configs
        .iter()
        .map(Session::<T>::open)
        .collect::<Result<Vec<_>>>()?;
    for s in &sessions {
        for _ in 1..s.config.warmup {
            s.call()?;
        }
    }
    let rounds = configs.iter().map(|c| c.repeats).max().unwrap_or(0);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(configs[0].seed ^ 0x07de);
    for round in 0..rounds {
        order.shuffle(&mut rng);
        for &i in &order {
            if round < sessions[i].config.repeats {
                sessions[i].sample()?;
            }
        }
    }
    Ok(sessions.into_iter().map(Session::finish).collect())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    T,
    HW,
    N,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" | "t" => Ok(SweepAxis::T),
            "HW" | "hw" => Ok(SweepAxis::HW),
            "N" | "n" | "objects" => Ok(SweepAxis::N),
            other => Err(Error::Input(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// One record per value of `axis`, everything else taken from `base`.
/// The points are timed round-robin rather than one after another.
pub fn sweep(axis: SweepAxis, values: &[usize], base: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if values.len() < 4 {
        return Err(Error::Input(format!(
            "a sweep needs at least 4 values, got {}",
            values.len()
        )));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input(
            "sweep values must be strictly increasing".into(),
        ));
    }
    let configs: Vec<BenchConfig> = values
        .iter()
        .map(|&v| match axis {
            SweepAxis::T => BenchConfig { t: v, ..*base },
            SweepAxis::HW => base.with_hw(v),
            SweepAxis::N => BenchConfig {
                objects: v,
                ..*base
            },
        })
        .collect();
    run_interleaved(&configs)
}

/// Header row naming every [`BenchRecord`] field, then one line per record.
pub fn write_records_csv<W: Write>(writer: W, records: &[BenchRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

/// Least-squares slope of `ln(time)` against `ln(x)`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 4 {
        return Err(Error::Input(format!(
            "slope fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    if points
        .iter()
        .any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(Error::Input(
            "slope fit needs positive finite coordinates".into(),
        ));
    }
    if points.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Input("slope fit needs strictly increasing x".into()));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// `(max − min) / min` of the median latencies.
pub fn latency_spread(records: &[BenchRecord]) -> f64 {
    let lo = records
        .iter()
        .map(|r| r.median_ns)
        .fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.median_ns).fold(0.0, f64::max);
    (hi - lo) / lo
}
