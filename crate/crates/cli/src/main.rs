//! `finegrain`: generate, train, impute, evaluate and sweep from the shell.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use finegrain::manifest::Manifest;
use finegrain::pipeline::{Invocation, Job, RunConfig, SWEEP_ZOOMS};
use finegrain::pipeline::{ImputeMethod, TrainMethod};
use finegrain::Error;

const OUT_ENV: &str = "FINEGRAIN_OUT";

#[derive(Parser)]
#[command(name = "finegrain", version, about = "Constraint-aware super-resolution of coarse network telemetry")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replay the run recorded in a manifest file.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate traffic and write train/val/test window files.
    Generate(GenerateArgs),
    /// Train a plain (MSE) or KAL model.
    Train(TrainArgs),
    /// Impute fine-grained series for a window file.
    Impute(ImputeArgs),
    /// Compare imputation files against the truth.
    Evaluate(EvaluateArgs),
    /// Run generate/train/impute/evaluate for several zoom factors.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// bursty, persistent or mixed
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    zoom: Option<usize>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    traces: Option<usize>,
    #[arg(long)]
    duration_ms: Option<usize>,
    /// Output directory (default: $FINEGRAIN_OUT/data).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Plain,
    Kal,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.jsonl and val.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "kal")]
    mode: ModeArg,
    /// Consolidate colliding training examples first (KAL only).
    #[arg(long)]
    refine: bool,
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Model,
    Knn,
    Linear,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "model")]
    method: MethodArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training split for the k-NN baseline.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Neighbors for k-NN (chosen on the validation split by default).
    #[arg(long)]
    k: Option<usize>,
    /// Repair every window so that it satisfies the constraints.
    #[arg(long)]
    enforce: bool,
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Upper bound of the target channel for the repair step.
    #[arg(long)]
    capacity: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    truth: PathBuf,
    /// NAME=FILE, repeatable.
    #[arg(long = "method", required = true, value_parser = parse_method)]
    methods: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write SVG plots.
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_ZOOMS)]
    zooms: Vec<usize>,
    #[arg(long)]
    refine: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=FILE, got `{s}`")),
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("finegrain-out"), PathBuf::from)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn invocation(cli: Cli) -> Result<Invocation, Error> {
    if let Some(path) = &cli.manifest {
        if cli.command.is_some() {
            return Err(Error::Config("--manifest replays a recorded run and takes no subcommand".into()));
        }
        return Invocation::from_manifest(&Manifest::load(path)?);
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let command = cli.command.ok_or_else(|| Error::Config("a subcommand or --manifest is required".into()))?;
    let job = match command {
        Command::Generate(a) => {
            if let Some(p) = a.preset {
                cfg.preset = p;
                cfg.traffic.clear();
            }
            cfg.zoom = a.zoom.unwrap_or(cfg.zoom);
            cfg.context_len = a.context_len.unwrap_or(cfg.context_len);
            cfg.traces_per_config = a.traces.unwrap_or(cfg.traces_per_config);
            cfg.duration_ms = a.duration_ms.or(cfg.duration_ms);
            Job::Generate { out_dir: a.out.unwrap_or_else(|| out_root().join("data")) }
        }
        Command::Train(a) => {
            cfg.constraints = a.constraints.or(cfg.constraints);
            let mode = match a.mode {
                ModeArg::Plain => TrainMethod::Plain,
                ModeArg::Kal => TrainMethod::Kal,
            };
            Job::Train { data_dir: a.data, mode, refine: a.refine, checkpoint: a.checkpoint }
        }
        Command::Impute(a) => {
            cfg.constraints = a.constraints.or(cfg.constraints);
            cfg.knn_k = a.k.or(cfg.knn_k);
            cfg.cem.capacity = a.capacity.or(cfg.cem.capacity);
            let method = match a.method {
                MethodArg::Model => ImputeMethod::Model,
                MethodArg::Knn => ImputeMethod::Knn,
                MethodArg::Linear => ImputeMethod::Linear,
            };
            Job::Impute {
                method,
                input: a.input,
                output: a.output,
                checkpoint: a.checkpoint,
                train: a.train,
                enforce: a.enforce,
            }
        }
        Command::Evaluate(a) => Job::Evaluate {
            truth: a.truth,
            methods: a.methods,
            out_dir: a.out.unwrap_or_else(|| out_root().join("eval")),
            plots: a.plots,
        },
        Command::Sweep(a) => Job::Sweep {
            zooms: a.zooms,
            refine: a.refine,
            out_dir: a.out.unwrap_or_else(|| out_root().join("sweep")),
        },
    };
    Ok(Invocation::new(job, cfg))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::UnboundMeasurement(_) | Error::UnresolvedMeasurement(_) => 1,
        Error::Solver(_) | Error::Training { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // help and --version are successful runs; usage errors exit with 1
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match invocation(cli).and_then(|inv| inv.run()) {
        Ok(m) => {
            for name in m.outputs.keys() {
                println!("wrote {name}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
