use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim::cli::{self, Overrides};
use fedsim::config::{load_config, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Trace-driven federated learning client-selection simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (policy, seed) cell and write records, curves and a report.
    Run {
        /// Config file, or a preset name (motivating, headline, ablation, window-sweep).
        config: PathBuf,
        #[arg(long)]
        outdir: Option<PathBuf>,
        #[arg(long = "seed", num_args = 1.., value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long = "policy", num_args = 1.., value_delimiter = ',')]
        policies: Vec<String>,
    },
    /// Pin the observation window to each size and tabulate forecast error
    /// and time to target.
    SweepWindow {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long)]
        outdir: Option<PathBuf>,
        #[arg(long = "seed", num_args = 1.., value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Check a config and print it with defaults filled in.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf, overrides: &Overrides) -> Result<ExperimentConfig, String> {
    let cfg = load_config(path).map_err(|e| format!("{}: {e}", path.display()))?;
    overrides.apply(cfg).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let threads = cli::threads_from_env();
    let result = match args.command {
        Command::Run {
            config,
            outdir,
            seeds,
            policies,
        } => load(
            &config,
            &Overrides {
                outdir,
                seeds,
                policies,
            },
        )
        .and_then(|cfg| {
            let report = cli::run_matrix(&cfg, threads).map_err(|e| e.to_string())?;
            print!("{}", report.render());
            println!("wrote {}", cfg.outdir.display());
            Ok(report.all_succeeded())
        }),
        Command::SweepWindow {
            config,
            sizes,
            outdir,
            seeds,
        } => load(
            &config,
            &Overrides {
                outdir,
                seeds,
                policies: Vec::new(),
            },
        )
        .and_then(|cfg| {
            let sizes = if sizes.is_empty() {
                cfg.sweep.sizes.clone()
            } else {
                sizes
            };
            let rows = cli::sweep_window(&cfg, &sizes, threads).map_err(|e| e.to_string())?;
            println!("window seed predictor_mae wall_clock_to_target_s");
            for r in &rows {
                let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.1}"));
                println!(
                    "{} {} {} {}",
                    r.window,
                    r.seed,
                    f(r.predictor_mae),
                    f(r.wall_clock_to_target_s)
                );
            }
            println!("wrote {}", cfg.outdir.join(cli::SWEEP_FILE).display());
            Ok(rows.iter().all(|r| r.status == "ok"))
        }),
        Command::Validate { config } => load(&config, &Overrides::default()).map(|cfg| {
            print!("{}", toml::to_string(&cfg).unwrap_or_default());
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
