use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rgp::experiment::{output_dir, rank_sweep, run_experiment, ExperimentReport, TrainConfig};
use rgp::privacy::{calibrate_sigma, epsilon_for};

#[derive(Parser)]
#[command(name = "rgp", version, about = "Differentially private training with low-rank gradient carriers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, model and ledger files.
    Train(RunArgs),
    /// Train once per reparametrization rank.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated ranks.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ranks: Vec<usize>,
    },
    /// Smallest noise multiplier meeting an (ε, δ) target.
    Calibrate {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
    },
    /// ε spent by a subsampled Gaussian run.
    Epsilon {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
    },
    /// Write a seeded blobs dataset as CSV.
    Blobs {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 1)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

macro_rules! field_flags {
    ($($field:ident => $key:literal),* $(,)?) => {
        /// Per-field overrides, applied after the config file.
        #[derive(Args, Default)]
        struct FieldFlags {
            $(
                #[arg(long = $key, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl FieldFlags {
            fn assignments(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(if let Some(v) = &self.$field { out.push(($key, v.as_str())); })*
                out
            }
        }
    };
}

field_flags! {
    data => "data", format => "format", labels => "labels", test_data => "test-data",
    test_labels => "test-labels", test_fraction => "test-fraction", blobs_n => "blobs-n",
    blobs_separation => "blobs-separation", blobs_grid => "blobs-grid", image => "image",
    conv => "conv", hidden => "hidden", zero_head => "zero-head", method => "method",
    rank => "rank", power_iters => "power-iters", warmup_steps => "warmup-steps", clip => "clip",
    sigma => "sigma", epsilon => "epsilon", delta => "delta", q => "q", batch => "batch",
    steps => "steps", epochs => "epochs", learning_rate => "lr", momentum => "momentum",
    seed => "seed", residual_enabled => "residual-enabled", debug_dense_check => "debug-dense-check",
    track_stable_rank => "track-stable-rank", stable_rank_epochs => "stable-rank-epochs",
    track_residuals => "track-residuals", mi_attack => "mi-attack", name => "name",
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (default: $RGP_OUTPUT_DIR, then ./runs).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Extra KEY=VALUE assignments.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    fields: FieldFlags,
}

impl RunArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| rgp::Error::Config(format!("{}: {e}", path.display())))?;
                TrainConfig::parse(&text)?
            }
            None => TrainConfig::default(),
        };
        for (key, value) in self.fields.assignments() {
            cfg.set(&key.replace('-', "_"), value)?;
        }
        for s in &self.set {
            cfg.apply(s)?;
        }
        Ok(cfg)
    }
}

fn print_report(r: &ExperimentReport) {
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    println!("run {} ({}), {} steps", r.name, r.method, r.steps);
    match (r.epsilon, r.delta, r.sigma) {
        (Some(e), Some(d), Some(s)) => println!("privacy: epsilon {e:.4} at delta {d:e}, sigma {s:.6}"),
        _ => println!("privacy: none"),
    }
    println!("accuracy: train {:.4}, test {:.4} (initial {:.4})", r.train_accuracy, r.test_accuracy, r.initial_test_accuracy);
    let m = &r.memory;
    println!(
        "per-sample floats: rgp {} + {} bias, dpsgd {} + {} bias; measured peak per batch {}",
        m.rgp_per_sample, m.bias_per_sample, m.dpsgd_per_sample, m.bias_per_sample, m.measured_peak
    );
    if let Some(mi) = &r.mi {
        println!("membership inference: success {:.4} (threshold {:.6})", mi.success_rate, mi.threshold);
    }
    println!("metrics: {}", r.metrics_path.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.config()?;
            let report = run_experiment(&cfg, &output_dir(args.out.as_deref()))?;
            print_report(&report);
        }
        Command::Sweep { run, ranks } => {
            let cfg = run.config()?;
            for report in rank_sweep(&cfg, &ranks, &output_dir(run.out.as_deref()))? {
                print_report(&report);
            }
        }
        Command::Calibrate { q, steps, epsilon, delta } => {
            println!("{}", calibrate_sigma(q, steps, epsilon, delta)?);
        }
        Command::Epsilon { q, sigma, steps, delta } => {
            println!("{}", epsilon_for(q, sigma, steps, delta)?);
        }
        Command::Blobs { n, separation, grid, seed, out } => {
            let ds = rgp::data::grid_blobs(n, grid, separation, seed)?;
            write_csv(&ds, &out)?;
        }
    }
    Ok(())
}

fn write_csv(ds: &rgp::data::Dataset, out: &Path) -> Result<()> {
    ds.write_csv(out).with_context(|| format!("writing {}", out.display()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use rgp::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::Mode(_) | E::Domain(_)) => 2,
        Some(E::Infeasible(_)) => 3,
        Some(E::Input(_) | E::Parse { .. } | E::NonFinite(_) | E::Io(_) | E::Json(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
