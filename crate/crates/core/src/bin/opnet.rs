use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opnet_core::config::HarnessConfig;
use opnet_core::error::{Error, Result};
use opnet_core::harness;
use opnet_core::training::GradScope;

/// Channel-relation attention experiment harness.
#[derive(Parser)]
#[command(name = "opnet", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded standard-normal feature pyramid.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output pyramid directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full feature path over a pyramid directory.
    Forward {
        /// Input pyramid directory (S2.opt1..S6.opt1 + meta.json).
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output pyramid directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        /// One of: primitive, attention, pyramid, all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write MAC/parameter accounting reports (and a complexity sweep).
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Sweep axes, e.g. `--sweep P=1,2,4 C=8,16`; bare `--sweep` uses the
        /// default grid P=1,2,4,8 x C=8,16,32.
        #[arg(long, num_args = 0.., value_name = "AXIS=V,V,...")]
        sweep: Option<Vec<String>>,
    },
    /// Run the toy training task and the synthetic level-mismatch study.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Probability of perturbing a box's chosen level by +/-1.
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<HarnessConfig> {
    let mut cfg = HarnessConfig::load(path.map(|p| p.as_path()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { config, seed, out } => {
            let cfg = load_config(config.as_ref(), seed)?;
            harness::run_gen(&cfg, &out)?;
            println!("wrote pyramid to {}", out.display());
        }
        Cmd::Forward { input, config, seed, out } => {
            let cfg = load_config(config.as_ref(), seed)?;
            let summary = harness::run_forward(&cfg, &input, &out)?;
            for (name, shape) in &summary.level_shapes {
                println!("{name}: {shape:?}");
            }
            let m = summary.mp_intermediate;
            println!("mp-op intermediate shape: ({}, {}, {}, {})", m[0], m[1], m[2], m[3]);
            println!("wrote pyramid to {}", out.display());
        }
        Cmd::Gradcheck { scope, config, seed, out } => {
            let cfg = load_config(config.as_ref(), seed)?;
            let scope: GradScope = scope.parse().map_err(Error::config)?;
            let (cases, pass) = harness::run_gradcheck(&cfg, scope, &out)?;
            let mut worst = 0.0f64;
            for case in &cases {
                for e in &case.report.entries {
                    worst = worst.max(e.max_rel_err);
                }
            }
            println!(
                "{} cases, worst relative error {worst:e}, threshold {:e}",
                cases.len(),
                cfg.tolerances.grad_threshold
            );
            if !pass {
                return Err(Error::Numeric(format!(
                    "gradient check failed: worst relative error {worst:e} at threshold {:e} (see gradcheck.csv)",
                    cfg.tolerances.grad_threshold
                )));
            }
        }
        Cmd::Count { config, seed, out, sweep } => {
            let cfg = load_config(config.as_ref(), seed)?;
            let spec = sweep.as_deref().map(harness::parse_sweep).transpose()?;
            let (report, audit) = harness::run_count(&cfg, spec.as_ref(), &out)?;
            println!(
                "total macs {} ({} gmacs), params {}",
                report.total_macs(),
                opnet_core::accounting::render_gmacs(report.total_macs()),
                report.total_params()
            );
            if let Some(a) = audit {
                println!("{}", a.note);
            }
        }
        Cmd::Experiment { config, seed, steps, perturb, out } => {
            let cfg = load_config(config.as_ref(), seed)?;
            let summary = harness::run_experiment(&cfg, steps, perturb, &out)?;
            println!(
                "loss: initial {} final {}{}",
                summary.training.initial_loss(),
                summary.training.final_loss(),
                if summary.training.tuning_warning { " (tuning warning)" } else { "" }
            );
            println!("overall mismatch rate: {}", summary.mismatch.overall);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
