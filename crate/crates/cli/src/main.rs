use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use teddn_core::data::{convert_archive, ConvertOptions};
use teddn_core::experiment::ExperimentConfig;
use teddn_core::gradcheck::{self, Size};
use teddn_core::metrics::{fmt_mape, MetricReport};
use teddn_core::{runner, Error};

/// Traffic-flow forecasting with temporally enhanced, disentangled
/// graph networks.
#[derive(Parser)]
#[command(name = "teddn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, checkpoint the best epoch and report test metrics.
    Train(ConfigArgs),
    /// Test-split metrics of a checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write every forecast of one split to CSV.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the full model and its three ablations.
    Ablate(ConfigArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check this many consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Scale one parameter's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Convert an `.npz`/`.npy` archive to flatbin with a JSON sidecar.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        out_dir: PathBuf,
        /// Array name inside an `.npz`.
        #[arg(long)]
        array: Option<String>,
        /// Channels to keep (comma separated); all by default.
        #[arg(long, value_delimiter = ',')]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 288)]
        steps_per_day: usize,
        #[arg(long, default_value_t = 0)]
        start_weekday: usize,
    },
    /// Persistence and historical-average scores on the test split.
    Baseline(ConfigArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::Format(_) | Error::Io { .. } => 3,
        Error::Numerical(_) => 4,
        Error::Tensor(_) | Error::Stage { .. } => 1,
    }
}

fn print_report(title: &str, r: &MetricReport) {
    println!("{title}");
    println!("{:>8} {:>12} {:>12} {:>10}", "horizon", "MAE", "RMSE", "MAPE%");
    for (i, m) in r.horizons.iter().enumerate() {
        println!("{:>8} {:>12.4} {:>12.4} {:>10}", i + 1, m.mae, m.rmse, mape(m.mape));
    }
    let a = &r.average;
    println!("{:>8} {:>12.4} {:>12.4} {:>10}", "average", a.mae, a.rmse, mape(a.mape));
}

fn mape(m: Option<f64>) -> String {
    m.map_or_else(|| fmt_mape(None), |v| format!("{v:.2}"))
}

fn gradcheck_cmd(size: &str, seed: u64, seeds: u64, corrupt: Option<&str>) -> Result<u8, Error> {
    let size: Size = size.parse()?;
    let mut failed = false;
    for s in seed..seed + seeds.max(1) {
        let report = gradcheck::run(size, s, corrupt)?;
        println!("seed {s}: {} parameters, worst relative error {:.3e}", report.params.len(), report.worst());
        for (module, p) in report.per_module() {
            println!("  {module:<18} {:.3e}  ({})", p.worst, p.name);
        }
        for p in report.failures() {
            failed = true;
            eprintln!(
                "FAIL seed {s}: {} [{}] relative error {:.3e} (analytic {:.6e}, numeric {:.6e})",
                p.name, p.index, p.worst, p.analytic, p.numeric
            );
        }
    }
    Ok(if failed { 5 } else { 0 })
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let run = runner::run_train(&cfg)?;
            let o = &run.outcome;
            println!(
                "trained {} epochs; best epoch {} with validation MAE {:.4}{}",
                o.log.len(),
                o.best_epoch,
                o.best_val_mae,
                if o.stopped_early { " (early stop)" } else { "" }
            );
            print_report("test metrics", &run.test);
            println!("outputs in {}", run.output_dir.display());
        }
        Command::Evaluate { cfg, checkpoint } => {
            let report = runner::run_evaluate(&cfg.load()?, &checkpoint)?;
            print_report("test metrics", &report);
        }
        Command::Predict { cfg, checkpoint, split } => {
            let path = runner::run_predict(&cfg.load()?, &checkpoint, &split)?;
            println!("wrote {}", path.display());
        }
        Command::Ablate(args) => {
            let cfg = args.load()?;
            let ab = runner::run_ablate(&cfg)?;
            for row in &ab.rows {
                let a = &row.run.test.average;
                println!(
                    "{:<8} MAE {:.4}  RMSE {:.4}  MAPE {}  ({:.1}s train)",
                    row.variant.name(),
                    a.mae,
                    a.rmse,
                    mape(a.mape),
                    row.run.train_seconds
                );
            }
            println!(
                "full model best on average MAE: {}",
                if ab.full_is_best { "yes" } else { "no" }
            );
            println!("table in {}", cfg.output_dir.join(runner::ABLATION_CSV).display());
        }
        Command::Gradcheck {
            size,
            seed,
            seeds,
            corrupt,
        } => return gradcheck_cmd(&size, seed, seeds, corrupt.as_deref()),
        Command::Convert {
            input,
            out_dir,
            array,
            channels,
            steps_per_day,
            start_weekday,
        } => {
            let opts = ConvertOptions {
                array,
                channels,
                steps_per_day,
                start_weekday,
            };
            let (path, sc) = convert_archive(&input, &out_dir, &opts)?;
            println!("T={} N={} C={}", sc.t, sc.n, sc.c);
            println!("wrote {}", path.display());
        }
        Command::Baseline(args) => {
            let r = runner::run_baseline(&args.load()?)?;
            print_report("persistence", &r.persistence);
            print_report("historical average", &r.historical_average);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
