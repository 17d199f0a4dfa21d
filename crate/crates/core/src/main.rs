use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use simwave::harness::{complexity_estimate, run_sweep_to, ComplexityInputs, RunConfig, SweepKind};
use simwave::optimizer::Mode;
use simwave::validate::{run_validation, Level};
use simwave::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_VALIDATION: u8 = 3;

#[derive(Parser)]
#[command(name = "simwave", version, about = "Wideband stacked-metasurface multi-user MIMO simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct SweepArgs {
    /// TOML configuration; defaults apply to anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated values of the swept quantity.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Number of independent runs per grid cell.
    #[arg(long)]
    seeds: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated reconfiguration modes.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    /// Comma-separated layer counts.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Comma-separated training subband counts.
    #[arg(long, value_delimiter = ',')]
    subbands: Option<Vec<usize>>,
    /// Write 0 in the wall_ms column so output is reproducible byte for byte.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described in the configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_timing: bool,
    },
    /// Spectral efficiency against the number of training subbands.
    SweepSubbands(SweepArgs),
    /// Spectral efficiency against the number of users.
    SweepUsers(SweepArgs),
    /// Spectral efficiency against the noise power (values in W).
    SweepSnr(SweepArgs),
    /// Spectral efficiency against the total bandwidth (values in Hz).
    SweepBandwidth(SweepArgs),
    /// Per-frequency spectral efficiency of an optimised configuration
    /// (values are probe frequencies in Hz).
    FreqResponse(SweepArgs),
    /// Goodput against the total number of elements.
    SweepGoodput(SweepArgs),
    /// Objective after every optimisation step.
    Convergence(SweepArgs),
    /// Run the numerical self-checks.
    Validate {
        /// Larger instances and the optimiser checks.
        #[arg(long)]
        full: bool,
        /// Singularity guard in rad.
        #[arg(long, default_value_t = simwave::network::SINGULARITY_GUARD)]
        guard: f64,
    },
    /// Operation counts of one optimisation run.
    Complexity {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        p1_iters: u128,
        #[arg(long, default_value_t = 100)]
        p2_iters: u128,
        /// Count only the last layer as optimised.
        #[arg(long)]
        partial: bool,
    },
}

fn load(path: Option<&PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn sweep_config(kind: SweepKind, args: &SweepArgs) -> Result<RunConfig, Error> {
    let mut cfg = load(args.config.as_ref())?;
    cfg.sweep.kind = kind;
    if let Some(v) = &args.values {
        cfg.sweep.values = v.clone();
    }
    if let Some(n) = args.seeds {
        cfg.sweep.num_seeds = n;
    }
    if let Some(s) = args.seed {
        cfg.sweep.seed = s;
    }
    if let Some(m) = &args.modes {
        cfg.sweep.modes = m
            .iter()
            .map(|s| Mode::parse(s).ok_or_else(|| Error::Config(format!("unknown mode {s}"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(l) = &args.layers {
        cfg.sweep.layers = l.clone();
    }
    if let Some(s) = &args.subbands {
        cfg.sweep.subbands = s.clone();
    }
    if args.no_timing {
        cfg.sweep.record_timing = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sweep(cfg: &RunConfig, out: Option<&PathBuf>) -> Result<ExitCode, Error> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Error::Config(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    let rows = run_sweep_to(cfg, sink)?;
    let failed = rows.iter().filter(|r| r.status.starts_with("error")).count();
    if failed > 0 {
        warn!("{failed} of {} rows failed", rows.len());
        return Ok(ExitCode::from(EXIT_NUMERICAL));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let (kind, args) = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            no_timing,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.sweep.seed = s;
            }
            if no_timing {
                cfg.sweep.record_timing = false;
            }
            return sweep(&cfg, out.as_ref());
        }
        Command::Validate { full, guard } => {
            let level = if full { Level::Full } else { Level::Fast };
            let report = run_validation(level, guard);
            print!("{report}");
            return Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VALIDATION)
            });
        }
        Command::Complexity {
            config,
            p1_iters,
            p2_iters,
            partial,
        } => {
            let cfg = load(config.as_ref())?;
            let s = &cfg.scenario;
            let est = complexity_estimate(&ComplexityInputs {
                layers: s.layers as u128,
                per_layer: s.elements_per_layer() as u128,
                users: s.num_users as u128,
                tx: s.num_tx() as u128,
                subbands: s.num_subbands as u128,
                p1_iters,
                p2_iters,
                last_layer_only: partial,
            });
            for (i, b) in est.steps.iter().enumerate() {
                println!("B{:<2} {b}", i + 1);
            }
            println!("total {}", est.total);
            return Ok(ExitCode::SUCCESS);
        }
        Command::SweepSubbands(a) => (SweepKind::Subbands, a),
        Command::SweepUsers(a) => (SweepKind::Users, a),
        Command::SweepSnr(a) => (SweepKind::Snr, a),
        Command::SweepBandwidth(a) => (SweepKind::Bandwidth, a),
        Command::FreqResponse(a) => (SweepKind::FreqResponse, a),
        Command::SweepGoodput(a) => (SweepKind::GoodputElements, a),
        Command::Convergence(a) => (SweepKind::Convergence, a),
    };
    let cfg = sweep_config(kind, &args)?;
    if kind == SweepKind::Snr {
        for v in &cfg.sweep.values {
            eprintln!("noise power {v} W: SNR {:.2} dB", 10.0 * (cfg.scenario.total_power_w / v).log10());
        }
    }
    sweep(&cfg, args.out.as_ref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("simwave: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERICAL })
        }
    }
}
