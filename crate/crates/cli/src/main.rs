use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use linmatch::bench::{self, BenchConfig, BenchRecord, BenchRegime, SweepAxis};
use linmatch::numerics::DType;
use linmatch::synthvos::{self, PropagationConfig, Regime};
use linmatch::verify;

#[derive(Parser)]
#[command(
    name = "linmatch",
    version,
    about = "Memory matching benchmarks and synthetic propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time one query-frame matching and report accounted bytes.
    Bench(BenchArgs),
    /// Run `bench` once per value along one axis.
    Sweep {
        #[command(flatten)]
        bench: BenchArgs,
        /// T, HW or N.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Propagate first-frame masks through a synthetic sequence.
    Propagate(PropagateArgs),
    /// Check every matcher against scalar-loop references.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "linear")]
    regime: BenchRegime,
    #[arg(long = "T", default_value_t = 8)]
    t: usize,
    #[arg(long = "H", default_value_t = 32)]
    h: usize,
    #[arg(long = "W", default_value_t = 32)]
    w: usize,
    #[arg(long, default_value_t = 64)]
    ck: usize,
    #[arg(long, default_value_t = 256)]
    cv: usize,
    #[arg(long, default_value_t = 1)]
    objects: usize,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3 << 30)]
    mem_cap_bytes: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl BenchArgs {
    fn config(&self) -> BenchConfig {
        BenchConfig {
            regime: self.regime,
            t: self.t,
            h: self.h,
            w: self.w,
            key_channels: self.ck,
            value_channels: self.cv,
            objects: self.objects,
            dtype: self.dtype,
            repeats: self.repeats,
            warmup: self.warmup,
            seed: self.seed,
            mem_cap_bytes: self.mem_cap_bytes,
            ..BenchConfig::default()
        }
    }
}

#[derive(Args)]
struct PropagateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    objects: usize,
    #[arg(long, default_value = "gated-linear")]
    regime: Regime,
    /// Frame height and width in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Largest per-frame object speed in pixels.
    #[arg(long, default_value_t = 0.5)]
    max_velocity: f64,
    /// Absorb ground-truth masks instead of predictions.
    #[arg(long)]
    teacher_forcing: bool,
    /// Directory for predicted masks as PGM files.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Jaccard CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_bench(records: &[BenchRecord], out: Option<&Path>) -> linmatch::Result<()> {
    for r in records {
        eprintln!(
            "{} T={} HW={} N={}: median {:.3} ms, transient {} B, peak {} B",
            r.regime,
            r.t,
            r.hw,
            r.objects,
            r.median_ns / 1e6,
            r.transient_bytes,
            r.peak_bytes
        );
    }
    bench::write_records_csv(output(out)?, records)
}

fn run_propagate(args: &PropagateArgs) -> linmatch::Result<()> {
    let seq = synthvos::generate_sequence(
        args.size,
        args.size,
        args.objects,
        args.frames,
        args.max_velocity,
        args.seed,
    )?;
    let config = PropagationConfig {
        teacher_forcing: args.teacher_forcing,
        ..PropagationConfig::default()
    };
    let result = synthvos::propagate(&seq, args.regime, &config)?;
    if let Some(dir) = &args.masks {
        fs::create_dir_all(dir)?;
        for frame in &result.frames {
            for &id in frame.probs.ids().iter().skip(1) {
                let mask = synthvos::Mask {
                    height: frame.labels.height,
                    width: frame.labels.width,
                    data: frame.labels.mask_of(id),
                };
                synthvos::write_pgm(
                    &mask,
                    dir.join(format!("frame{:03}_object{id}.pgm", frame.frame_index)),
                )?;
            }
        }
    }
    eprintln!("{}: mean Jaccard {:.4}", args.regime, result.mean_jaccard());
    synthvos::write_jaccard_csv(output(args.out.as_deref())?, &result.jaccard_rows())
}

fn run_verify(seed: u64) -> linmatch::Result<bool> {
    let outcomes = verify::run_all(seed)?;
    for c in &outcomes {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {}: error {:.2e}, tolerance {:.0e}",
            c.name, c.error, c.tolerance
        );
    }
    Ok(outcomes.iter().all(verify::CheckOutcome::passed))
}

fn run(cli: Cli) -> linmatch::Result<bool> {
    match cli.command {
        Command::Bench(args) => {
            let record = bench::run_bench(&args.config())?;
            write_bench(&[record], args.out.as_deref())?;
        }
        Command::Sweep {
            bench: args,
            axis,
            values,
        } => {
            let records = bench::sweep(axis, &values, &args.config())?;
            if records.len() >= 4 {
                let x = |r: &BenchRecord| match axis {
                    SweepAxis::T => r.t,
                    SweepAxis::HW => r.hw,
                    SweepAxis::N => r.objects,
                } as f64;
                let points: Vec<_> = records.iter().map(|r| (x(r), r.median_ns)).collect();
                eprintln!("log-log slope: {:.3}", bench::fit_loglog_slope(&points)?);
            }
            write_bench(&records, args.out.as_deref())?;
        }
        Command::Propagate(args) => run_propagate(&args)?,
        Command::Verify { seed } => return run_verify(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
