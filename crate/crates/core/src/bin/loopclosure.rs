use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use loopclosure::ingest::write_stream;
use loopclosure::metrics::{GroundTruth, DEFAULT_MARGIN};
use loopclosure::report::{run_stream, sweep_text, write_sweep};
use loopclosure::synth::{generate_world, ground_truth_path, WorldSpec};
use loopclosure::{EngineConfig, Error};

#[derive(Parser)]
#[command(version, about = "Real-time appearance-based loop closure detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a descriptor stream and write a report directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        /// Long-term memory database; created if missing.
        #[arg(long)]
        ltm: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Defaults to `<stream>.gt` when that file exists.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Tolerance in frames for a detection to count as correct.
        #[arg(long, default_value_t = DEFAULT_MARGIN)]
        margin: u64,
    },
    /// Generate a synthetic stream and its ground truth (`<out>.gt`).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        /// `.lcb` for binary, anything else for JSON lines.
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision and recall of a finished run over a range of thresholds.
    Sweep {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        step: f64,
    },
}

enum Failure {
    Config(String),
    Persistence(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            Error::Persistence(_) => Failure::Persistence(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn config_error(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

fn run(
    config: &Path,
    stream: &Path,
    ltm: &Path,
    report: &Path,
    ground_truth: Option<PathBuf>,
    margin: u64,
) -> Result<(), Failure> {
    let mut cfg = EngineConfig::load(config).map_err(config_error)?;
    cfg.ltm_path = Some(ltm.to_path_buf());
    let gt_path = ground_truth.or_else(|| Some(ground_truth_path(stream)).filter(|p| p.exists()));
    let gt = match gt_path {
        Some(p) => Some(GroundTruth::load(&p, margin).map_err(config_error)?),
        None => None,
    };
    let result = run_stream(cfg, stream, gt)?;
    result.write(report)?;
    print!("{}", result.metrics_text());
    match result.halted {
        Some(why) => Err(Failure::Persistence(why)),
        None => Ok(()),
    }
}

fn synth(spec: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let spec = WorldSpec::load(spec).map_err(config_error)?;
    let world = generate_world(&spec, seed)?;
    write_stream(out, &world.frames, spec.descriptor_dim)?;
    world.ground_truth.save(&ground_truth_path(out))?;
    println!(
        "{} frames, {} loop-closure frames",
        world.frames.len(),
        world.ground_truth.loop_count()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            stream,
            ltm,
            report,
            ground_truth,
            margin,
        } => run(&config, &stream, &ltm, &report, ground_truth, margin),
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out),
        Command::Sweep {
            report,
            from,
            to,
            step,
        } => write_sweep(&report, from, to, step)
            .map(|s| print!("{}", sweep_text(&s)))
            .map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("{m}");
            ExitCode::from(2)
        }
        Err(Failure::Persistence(m)) => {
            eprintln!("{m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
    }
}
