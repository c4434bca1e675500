use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use fedwind::data::{generate_synthetic_fleet, SyntheticFleetConfig};
use fedwind::experiment::{
    emit_report, public_turbine, random_model_search, run_experiment, write_fleet,
    ExperimentConfig, SearchOptions,
};
use fedwind::federation::TransportKind;

#[derive(Parser)]
#[command(
    name = "fedwind",
    version,
    about = "Federated normal-behavior models for wind turbine fleets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Inproc,
    Tcp,
}

#[derive(Subcommand)]
enum Command {
    /// Run strategies A/B/C and write the report table.
    Run {
        /// JSON experiment config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        transport: Option<Transport>,
        /// Server address for TCP transport (port 0 picks a free port).
        #[arg(long, visible_alias = "serve", default_value = "127.0.0.1:0")]
        listen: SocketAddr,
        /// Report CSV; metadata goes next to it as <stem>.meta.json.
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Random architecture and learning-rate search on the public turbine.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write all trials as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic fleet as one CSV file per turbine.
    Gen {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON synthetic fleet config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        turbines: Option<usize>,
        #[arg(long)]
        rows: Option<usize>,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            transport,
            listen,
            out,
            seed,
        } => {
            let mut cfg: ExperimentConfig = read_json(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            match transport {
                Some(Transport::Inproc) => cfg.transport = TransportKind::InProc,
                Some(Transport::Tcp) => cfg.transport = TransportKind::Tcp(listen),
                None => {}
            }
            let table = run_experiment(&cfg).context("experiment failed")?;
            emit_report(&table, &out).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", table.to_csv(true));
            log::info!("report written to {}", out.display());
        }
        Command::Search {
            config,
            trials,
            seed,
            out,
        } => {
            let cfg: ExperimentConfig = read_json(config.as_ref())?;
            let public = public_turbine(&cfg)?;
            let opts = SearchOptions {
                trials,
                seed,
                ..Default::default()
            };
            let result = random_model_search(&public, cfg.case, &opts)?;
            let best = result.best_trial();
            println!(
                "best trial {}: hidden {:?}, output {:?}, {} parameters, learning rate {:.6}, test RMSE {:.6}",
                result.best,
                best.architecture
                    .hidden_layers
                    .iter()
                    .map(|h| h.units)
                    .collect::<Vec<_>>(),
                best.architecture.output_activation,
                best.architecture.param_count(),
                best.learning_rate,
                best.test_rmse
            );
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&result)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Gen {
            out,
            config,
            seed,
            turbines,
            rows,
        } => {
            let mut cfg: SyntheticFleetConfig = read_json(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = turbines {
                // The scarce count only matters to experiments; keep it within the fleet.
                cfg.n_turbines = t;
                cfg.n_scarce = cfg.n_scarce.min(t);
            }
            if let Some(r) = rows {
                cfg.rows_per_turbine = r;
            }
            let fleet = generate_synthetic_fleet(&cfg)?;
            let paths = write_fleet(&fleet, &out)?;
            println!("wrote {} turbine files to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
