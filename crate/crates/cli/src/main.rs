use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use olps_cli::timing::Strategy;
use olps_cli::{runner, CliError, RunConfig};
use olps_core::fundsep::PortfolioMode;
use olps_core::relatives::PriceRelativeMatrix;

#[derive(Parser)]
#[command(
    name = "olps",
    version,
    about = "Online portfolio selection with pattern-matching agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    config: PathBuf,
    /// Override a config key, e.g. `--set agents.k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self, extra: Vec<String>) -> Result<RunConfig, CliError> {
        let mut overrides = self.set.clone();
        overrides.extend(extra);
        if let Some(d) = &self.output_dir {
            overrides.push(format!("output_dir={:?}", d.display().to_string()));
        }
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Backtest one dataset and write wealth.csv, agents.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<PortfolioMode>,
        #[arg(long)]
        seed: Option<u32>,
    },
    /// Sweep synthetic cases, modes and seeds, then run the KS battery.
    Batch {
        #[command(flatten)]
        common: Common,
    },
    /// Reproduce the NYSE comparison from a directory holding nyse_o.csv.
    Nyse {
        data_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        resolution: usize,
        /// Add the 36-stock row.
        #[arg(long)]
        all_stocks: bool,
        #[arg(long, default_value = "nyse_comparison.csv")]
        output: PathBuf,
    },
    /// Median wall-clock time of the analytic and numeric solvers.
    Timing {
        /// Wide CSV of price relatives.
        relatives: PathBuf,
        #[arg(long, value_delimiter = ',')]
        tickers: Option<Vec<String>>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        l: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, mode, seed } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(format!("learner.mode=\"{m}\""));
            }
            if let Some(s) = seed {
                extra.push(format!("seed={s}"));
            }
            let cfg = common.load(extra)?;
            let out = runner::run(&cfg)?;
            println!(
                "terminal wealth {:.6e} ({} periods); artifacts in {}",
                out.track.terminal_wealth(),
                out.track.n_periods(),
                cfg.output_dir.display()
            );
        }
        Command::Batch { common } => {
            let cfg = common.load(Vec::new())?;
            let out = runner::batch(&cfg)?;
            for c in &out.cases {
                println!(
                    "{} {:<8} mean terminal wealth {:.6}",
                    c.case, c.mode, c.mean_terminal_wealth
                );
            }
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Nyse {
            data_dir,
            resolution,
            all_stocks,
            output,
        } => {
            let rows = runner::nyse_comparison(&data_dir, resolution, all_stocks)?;
            for r in &rows {
                println!("{:<12} {:<5} {:.4e}", r.stocks, r.strategy, r.wealth);
            }
            let f = File::create(&output).map_err(|source| CliError::Output {
                path: output.clone(),
                source,
            })?;
            runner::write_nyse_comparison(BufWriter::new(f), &rows).map_err(|source| {
                CliError::Output {
                    path: output,
                    source,
                }
            })?;
        }
        Command::Timing {
            relatives,
            tickers,
            k,
            l,
            repeats,
        } => {
            let mut x =
                PriceRelativeMatrix::load_wide_csv(&relatives, b',').map_err(CliError::Data)?;
            if let Some(t) = tickers {
                x = x.select_tickers(&t).map_err(CliError::Data)?;
            }
            info!(
                "timing on {} periods x {} assets",
                x.n_periods(),
                x.n_assets()
            );
            let report = olps_cli::timing_report(&Strategy::ALL, &x, k, l, repeats)?;
            for t in &report.timings {
                println!(
                    "{:<18?} median {:.3}s wealth {:.4e}",
                    t.strategy, t.median_seconds, t.terminal_wealth
                );
            }
            if let Some(ok) = report.ordering_holds() {
                println!(
                    "ordering absolute <= active <= numeric: {}",
                    if ok { "holds" } else { "violated" }
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
