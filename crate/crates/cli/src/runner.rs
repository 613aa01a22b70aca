//! Single runs, seed sweeps and the NYSE comparison table.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use olps_core::baselines;
use olps_core::fundsep::PortfolioMode;
use olps_core::learner::{run_backtest, MixtureRule, TrackSummary, WealthTrack};
use olps_core::marketdata::{self, CleaningReport};
use olps_core::patterns::{
    AgentGenerator, AgentGrid, AntiBcrpGenerator, ClusterMap, FallbackCounts, MatchConfig,
    MatchRule, PatternGenerator,
};
use olps_core::relatives::PriceRelativeMatrix;
use olps_core::stats::{self, Alternative, Battery, BatteryRun};
use olps_core::synth::{self, SdcCase};
use olps_core::SolverConfig;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, GeneratorKind, RunConfig};
use crate::{apply_frictions, CliError};

/// Price relatives ready for a run, with the cleaning report if any.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: PriceRelativeMatrix,
    pub cleaning: Option<CleaningReport>,
}

fn delimiter(c: char) -> Result<u8, CliError> {
    u8::try_from(c)
        .map_err(|_| CliError::Config(format!("data.delimiter: {c:?} is not a single byte")))
}

/// Loads (or generates) the configured relatives.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    let path = || {
        d.path
            .clone()
            .expect("validated: file sources carry a path")
    };
    let x = match d.source {
        DataSource::Synth => {
            synth::generate(&d.synth.spec(d.synth.case, cfg.seed)).map_err(CliError::Data)?
        }
        DataSource::Relatives => {
            PriceRelativeMatrix::load_wide_csv(&path(), delimiter(d.delimiter)?)
                .map_err(CliError::Data)?
        }
        DataSource::Ohlc => {
            let series = marketdata::load_csv(&path(), &d.schema).map_err(CliError::Data)?;
            marketdata::to_relatives(&series, d.convention).map_err(CliError::Data)?
        }
        DataSource::Closes => {
            let p = path();
            let file = File::open(&p)
                .map_err(|source| CliError::Data(olps_core::Error::Io { path: p, source }))?;
            let series = marketdata::read_wide_closes(
                std::io::BufReader::new(file),
                delimiter(d.delimiter)?,
            )
            .map_err(CliError::Data)?;
            marketdata::to_relatives(&series, d.convention).map_err(CliError::Data)?
        }
    };
    let x = match &d.tickers {
        Some(t) => x
            .select_tickers(t)
            .map_err(|e| CliError::Config(format!("data.tickers: {e}")))?,
        None => x,
    };
    if d.clean {
        let (x, report) =
            marketdata::clean_relatives(&x, d.clean_lo, d.clean_hi).map_err(CliError::Data)?;
        Ok(Dataset {
            x,
            cleaning: Some(report),
        })
    } else {
        Ok(Dataset { x, cleaning: None })
    }
}

fn clusters(cfg: &RunConfig, x: &PriceRelativeMatrix) -> Result<ClusterMap, CliError> {
    if cfg.clusters.is_empty() {
        Ok(ClusterMap::single(x.n_assets()))
    } else {
        ClusterMap::from_tickers(x, &cfg.clusters)
            .map_err(|e| CliError::Config(format!("clusters: {e}")))
    }
}

/// Agents configured for `x` in the given mode.
pub fn build_generator(
    cfg: &RunConfig,
    x: &PriceRelativeMatrix,
    mode: PortfolioMode,
) -> Result<Box<dyn AgentGenerator + Send>, CliError> {
    let map = clusters(cfg, x)?;
    let a = &cfg.agents;
    Ok(match a.generator {
        GeneratorKind::Pattern => {
            let grid = AgentGrid::new(a.k, a.l, map.len(), &a.taus)
                .map_err(|e| CliError::Config(format!("agents: {e}")))?;
            let g = PatternGenerator::new(grid, map, x.n_assets(), mode, cfg.matching, cfg.solver)
                .and_then(|g| g.with_control_solver(a.solver))
                .map_err(|e| CliError::Config(format!("agents: {e}")))?;
            Box::new(g)
        }
        GeneratorKind::AntiBcrp => Box::new(
            AntiBcrpGenerator::new(a.k, map, x.n_assets(), mode, cfg.solver)
                .map_err(|e| CliError::Config(format!("agents: {e}")))?,
        ),
    })
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub tickers: Vec<String>,
    pub track: WealthTrack,
    /// The portfolio after trading costs, when costs are configured.
    pub net: Option<WealthTrack>,
    pub universal: Option<WealthTrack>,
    pub best_stock: Option<(usize, WealthTrack)>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct BestStock {
    pub index: usize,
    pub ticker: String,
    pub wealth: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Runtimes {
    pub portfolio: f64,
    pub universal: Option<f64>,
    pub best_stock: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub spec_version: u32,
    pub mode: PortfolioMode,
    pub n_assets: usize,
    pub n_agents: usize,
    pub portfolio: TrackSummary,
    pub net_terminal_wealth: Option<f64>,
    pub cost_bps: f64,
    pub universal_portfolio: Option<f64>,
    pub best_stock: Option<BestStock>,
    pub fallbacks: Option<FallbackCounts>,
    pub runtime_seconds: Runtimes,
    pub cleaning: Option<CleaningReport>,
}

/// Runs the configured strategy and baselines on `data` without touching the disk.
pub fn execute(cfg: &RunConfig, data: &Dataset) -> Result<RunOutcome, CliError> {
    let x = &data.x;
    let mode = cfg.learner.mode;
    let mut generator = build_generator(cfg, x, mode)?;
    let n_agents = generator.n_agents();
    let start = Instant::now();
    let track = run_backtest(x, generator.as_mut(), mode, cfg.learner.mixture_rule())?;
    let portfolio_secs = start.elapsed().as_secs_f64();
    let fallbacks = generator.fallback_counts();

    let net = if cfg.frictions.cost_bps > 0.0 || cfg.frictions.flat_turnover.is_some() {
        Some(apply_frictions(
            &track,
            &track.turnover,
            cfg.frictions.cost_bps,
            cfg.frictions.flat_turnover,
        )?)
    } else {
        None
    };

    let (universal, universal_secs) = if cfg.baselines.universal
        && x.n_assets() <= cfg.baselines.max_universal_assets
    {
        let start = Instant::now();
        let up = baselines::universal_portfolio(x, cfg.baselines.resolution)?;
        (Some(up), Some(start.elapsed().as_secs_f64()))
    } else {
        if cfg.baselines.universal {
            warn!(
                "skipping the universal portfolio: {} assets exceeds baselines.max_universal_assets = {}",
                x.n_assets(),
                cfg.baselines.max_universal_assets
            );
        }
        (None, None)
    };

    let (best_stock, best_secs) = if cfg.baselines.best_stock {
        let start = Instant::now();
        let b = baselines::best_stock(x)?;
        (Some(b), Some(start.elapsed().as_secs_f64()))
    } else {
        (None, None)
    };

    let summary = RunSummary {
        spec_version: cfg.spec_version,
        mode,
        n_assets: x.n_assets(),
        n_agents,
        portfolio: track.summary(),
        net_terminal_wealth: net.as_ref().map(WealthTrack::terminal_wealth),
        cost_bps: cfg.frictions.cost_bps,
        universal_portfolio: universal.as_ref().map(WealthTrack::terminal_wealth),
        best_stock: best_stock.as_ref().map(|(i, t)| BestStock {
            index: *i,
            ticker: x.tickers()[*i].clone(),
            wealth: t.terminal_wealth(),
        }),
        fallbacks,
        runtime_seconds: Runtimes {
            portfolio: portfolio_secs,
            universal: universal_secs,
            best_stock: best_secs,
        },
        cleaning: data.cleaning.clone(),
    };
    Ok(RunOutcome {
        tickers: x.tickers().to_vec(),
        track,
        net,
        universal,
        best_stock,
        summary,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Output { path, source })
}

fn io_err(path: PathBuf) -> impl FnOnce(std::io::Error) -> CliError {
    move |source| CliError::Output { path, source }
}

/// Writes `wealth.csv`, `agents.csv` and `summary.json` into `dir`.
pub fn write_artifacts(dir: &Path, outcome: &RunOutcome) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir.to_owned()))?;

    let wealth_path = dir.join("wealth.csv");
    let mut w = csv::Writer::from_writer(create(dir, "wealth.csv")?);
    let mut header = vec!["t".to_string(), "S_port".to_string()];
    if outcome.net.is_some() {
        header.push("S_port_net".into());
    }
    if outcome.universal.is_some() {
        header.push("S_up".into());
    }
    if let Some((i, _)) = &outcome.best_stock {
        header.push(format!("S_best_stock_{}", outcome.tickers[*i]));
    }
    let to_io = |e: csv::Error| CliError::Output {
        path: wealth_path.clone(),
        source: e.into(),
    };
    w.write_record(&header).map_err(to_io)?;
    for t in 0..outcome.track.n_periods() {
        let mut rec = vec![
            (t + 1).to_string(),
            format!("{:?}", outcome.track.portfolio[t]),
        ];
        if let Some(n) = &outcome.net {
            rec.push(format!("{:?}", n.portfolio[t]));
        }
        if let Some(u) = &outcome.universal {
            rec.push(format!("{:?}", u.portfolio[t]));
        }
        if let Some((_, b)) = &outcome.best_stock {
            rec.push(format!("{:?}", b.portfolio[t]));
        }
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush().map_err(io_err(wealth_path.clone()))?;

    let agents_path = dir.join("agents.csv");
    outcome
        .track
        .write_agents_csv(create(dir, "agents.csv")?)
        .map_err(io_err(agents_path))?;

    let summary_path = dir.join("summary.json");
    let mut f = create(dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut f, &outcome.summary).map_err(|e| CliError::Output {
        path: summary_path.clone(),
        source: e.into(),
    })?;
    writeln!(f)
        .and_then(|_| f.flush())
        .map_err(io_err(summary_path))?;
    Ok(())
}

/// Loads data, runs, and writes the artifacts to `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let data = load_data(cfg)?;
    info!(
        "running {} agents on {} periods x {} assets",
        cfg.agents.k * cfg.agents.l * cfg.agents.taus.len(),
        data.x.n_periods(),
        data.x.n_assets()
    );
    let outcome = execute(cfg, &data)?;
    write_artifacts(&cfg.output_dir, &outcome)?;
    Ok(outcome)
}

/// Per-run paths of one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub case: SdcCase,
    pub mode: PortfolioMode,
    pub seed: u32,
    pub portfolio: Vec<f64>,
    pub best_agent: Vec<f64>,
    pub best_stock: Vec<f64>,
}

impl SeedRun {
    pub fn terminal(&self) -> f64 {
        self.portfolio.last().copied().unwrap_or(1.0)
    }
}

/// Backtest of one synthetic seed.
pub fn seed_run(
    cfg: &RunConfig,
    case: SdcCase,
    mode: PortfolioMode,
    seed: u32,
) -> Result<SeedRun, CliError> {
    let x = synth::generate(&cfg.data.synth.spec(case, seed)).map_err(CliError::Data)?;
    let mut generator = build_generator(cfg, &x, mode)?;
    let track = run_backtest(&x, generator.as_mut(), mode, cfg.learner.mixture_rule())?;
    let best_agent = baselines::best_agent(&track)
        .map(|(n, _)| track.agent_path(n))
        .unwrap_or_else(|| track.portfolio.clone());
    let (_, stock) = baselines::best_stock(&x)?;
    Ok(SeedRun {
        case,
        mode,
        seed,
        portfolio: track.portfolio,
        best_agent,
        best_stock: stock.portfolio,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseSummary {
    pub case: SdcCase,
    pub mode: PortfolioMode,
    pub mean_terminal_wealth: f64,
    pub terminal_wealth: Vec<f64>,
}

/// Results of a seed sweep.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub runs: Vec<SeedRun>,
    pub batteries: Vec<(SdcCase, PortfolioMode, Battery)>,
    /// Per mode: cases and the seed-paired comparison matrix.
    pub comparisons: Vec<(PortfolioMode, Vec<SdcCase>, Vec<Vec<Option<f64>>>)>,
    pub cases: Vec<CaseSummary>,
    /// Per case: `ks(active, absolute, Greater)` on terminal wealth across seeds.
    pub mode_tests: Vec<(SdcCase, f64)>,
}

impl BatchOutcome {
    pub fn runs_for(&self, case: SdcCase, mode: PortfolioMode) -> impl Iterator<Item = &SeedRun> {
        self.runs
            .iter()
            .filter(move |r| r.case == case && r.mode == mode)
    }

    pub fn battery(&self, case: SdcCase, mode: PortfolioMode) -> Option<&Battery> {
        self.batteries
            .iter()
            .find(|(c, m, _)| *c == case && *m == mode)
            .map(|(_, _, b)| b)
    }

    pub fn mean_terminal(&self, case: SdcCase, mode: PortfolioMode) -> Option<f64> {
        self.cases
            .iter()
            .find(|c| c.case == case && c.mode == mode)
            .map(|c| c.mean_terminal_wealth)
    }
}

/// Runs every `(case, mode, seed)` job, then the KS battery per case and
/// mode and the seed-paired cross-case comparison per mode.
pub fn sweep(cfg: &RunConfig) -> Result<BatchOutcome, CliError> {
    let b = &cfg.batch;
    if b.seeds.len() < 2 {
        return Err(CliError::Config(
            "batch.seeds: need at least 2 seeds".into(),
        ));
    }
    let jobs: Vec<(SdcCase, PortfolioMode, u32)> = b
        .cases
        .iter()
        .flat_map(|&c| {
            b.modes
                .iter()
                .flat_map(move |&m| b.seeds.iter().map(move |&s| (c, m, s)))
        })
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(c, m, s)| seed_run(cfg, c, m, s))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = BatchOutcome {
        runs,
        batteries: Vec::new(),
        comparisons: Vec::new(),
        cases: Vec::new(),
        mode_tests: Vec::new(),
    };
    for &case in &b.cases {
        for &mode in &b.modes {
            let runs: Vec<BatteryRun> = out
                .runs_for(case, mode)
                .map(|r| BatteryRun {
                    portfolio: r.portfolio.clone(),
                    best_agent: r.best_agent.clone(),
                    best_stock: r.best_stock.clone(),
                })
                .collect();
            out.batteries
                .push((case, mode, stats::hypothesis_battery(&runs)?));
            let terminal: Vec<f64> = out.runs_for(case, mode).map(SeedRun::terminal).collect();
            out.cases.push(CaseSummary {
                case,
                mode,
                mean_terminal_wealth: terminal.iter().sum::<f64>() / terminal.len() as f64,
                terminal_wealth: terminal,
            });
        }
        let abs: Vec<f64> = out
            .runs_for(case, PortfolioMode::Absolute)
            .map(SeedRun::terminal)
            .collect();
        let act: Vec<f64> = out
            .runs_for(case, PortfolioMode::Active)
            .map(SeedRun::terminal)
            .collect();
        if !abs.is_empty() && !act.is_empty() {
            out.mode_tests.push((
                case,
                stats::ks_two_sample(&act, &abs, Alternative::Greater)?.p_value,
            ));
        }
    }
    for &mode in &b.modes {
        let paths: Vec<Vec<Vec<f64>>> = b
            .cases
            .iter()
            .map(|&c| out.runs_for(c, mode).map(|r| r.portfolio.clone()).collect())
            .collect();
        out.comparisons
            .push((mode, b.cases.clone(), stats::cross_case_comparison(&paths)?));
    }
    Ok(out)
}

/// Seed sweep plus `stats.csv`, per-mode comparison tables and `batch_summary.json`.
pub fn batch(cfg: &RunConfig) -> Result<BatchOutcome, CliError> {
    let out = sweep(cfg)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir.clone()))?;

    let rows: Vec<(String, String, &Battery)> = out
        .batteries
        .iter()
        .map(|(c, m, b)| (c.to_string(), m.to_string(), b))
        .collect();
    stats::write_battery_csv(create(dir, "stats.csv")?, &rows)
        .map_err(io_err(dir.join("stats.csv")))?;

    for (mode, cases, matrix) in &out.comparisons {
        let name = format!("comparison_{mode}.csv");
        let labels: Vec<String> = cases.iter().map(ToString::to_string).collect();
        let mut f = create(dir, &name)?;
        f.write_all(stats::format_comparison(&labels, matrix).as_bytes())
            .and_then(|_| f.flush())
            .map_err(io_err(dir.join(&name)))?;
    }

    #[derive(Serialize)]
    struct ModeTest {
        case: SdcCase,
        active_below_absolute_p: f64,
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        spec_version: u32,
        seeds: &'a [u32],
        cases: &'a [CaseSummary],
        mode_tests: Vec<ModeTest>,
    }
    let summary = Summary {
        spec_version: cfg.spec_version,
        seeds: &cfg.batch.seeds,
        cases: &out.cases,
        mode_tests: out
            .mode_tests
            .iter()
            .map(|&(case, p)| ModeTest {
                case,
                active_below_absolute_p: p,
            })
            .collect(),
    };
    let path = dir.join("batch_summary.json");
    let mut f = create(dir, "batch_summary.json")?;
    serde_json::to_writer_pretty(&mut f, &summary).map_err(|e| CliError::Output {
        path: path.clone(),
        source: e.into(),
    })?;
    writeln!(f).and_then(|_| f.flush()).map_err(io_err(path))?;
    Ok(out)
}

/// Stock pairs of the classic NYSE comparison.
pub const NYSE_PAIRS: [(&str, &str); 4] = [
    ("iroqu", "kinar"),
    ("comme", "meico"),
    ("comme", "kinar"),
    ("ibm", "coke"),
];

/// One row of the NYSE comparison.
#[derive(Debug, Clone, Serialize)]
pub struct NyseRow {
    pub stocks: String,
    pub strategy: String,
    pub wealth: f64,
    pub best_agent: Option<f64>,
}

/// Engine settings of the NYSE comparison: gyorfi rule, K = 5, L = 10, one cluster.
pub fn nyse_config(mode: PortfolioMode) -> RunConfig {
    let mut cfg = RunConfig::from_toml("spec_version = 1\n[data]\nsource = \"synth\"\n", &[])
        .expect("built-in config is valid");
    cfg.learner.mode = mode;
    cfg.matching = MatchConfig {
        rule: MatchRule::GyorfiNn,
        ..MatchConfig::default()
    };
    cfg.solver = SolverConfig::default();
    cfg
}

/// Absolute and active engine wealth, with the best agent, on `x`.
pub fn engine_wealth(x: &PriceRelativeMatrix, mode: PortfolioMode) -> Result<(f64, f64), CliError> {
    let cfg = nyse_config(mode);
    let mut generator = build_generator(&cfg, x, mode)?;
    let track = run_backtest(x, generator.as_mut(), mode, MixtureRule::Universal)?;
    let best = baselines::best_agent(&track).map_or(f64::NAN, |(_, w)| w);
    Ok((track.terminal_wealth(), best))
}

/// Reproduces the NYSE comparison rows from `nyse_o.csv` in `dir`.
/// `all_stocks` adds the 36-asset row, which takes much longer.
pub fn nyse_comparison(
    dir: &Path,
    resolution: usize,
    all_stocks: bool,
) -> Result<Vec<NyseRow>, CliError> {
    let path = dir.join("nyse_o.csv");
    let full = PriceRelativeMatrix::load_wide_csv(&path, b',').map_err(CliError::Data)?;
    let mut rows = Vec::new();
    let mut groups: Vec<(String, PriceRelativeMatrix)> = Vec::new();
    for (a, b) in NYSE_PAIRS {
        let x = full.select_tickers(&[a, b]).map_err(CliError::Data)?;
        groups.push((format!("{}/{}", a.to_uppercase(), b.to_uppercase()), x));
    }
    if all_stocks {
        groups.push(("36 stocks".into(), full.clone()));
    }
    for (label, x) in &groups {
        for mode in [PortfolioMode::Absolute, PortfolioMode::Active] {
            let (wealth, best) = engine_wealth(x, mode)?;
            rows.push(NyseRow {
                stocks: label.clone(),
                strategy: if mode == PortfolioMode::Absolute {
                    "Abs."
                } else {
                    "Act."
                }
                .into(),
                wealth,
                best_agent: Some(best),
            });
        }
        if x.n_assets() <= 3 {
            rows.push(NyseRow {
                stocks: label.clone(),
                strategy: "UP".into(),
                wealth: baselines::universal_portfolio(x, resolution)?.terminal_wealth(),
                best_agent: None,
            });
        }
        rows.push(NyseRow {
            stocks: label.clone(),
            strategy: "Best".into(),
            wealth: baselines::best_stock(x)?.1.terminal_wealth(),
            best_agent: None,
        });
    }
    Ok(rows)
}

pub fn write_nyse_comparison<W: Write>(writer: W, rows: &[NyseRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stocks", "strategy", "wealth", "best_agent"])?;
    for r in rows {
        w.write_record([
            r.stocks.clone(),
            r.strategy.clone(),
            format!("{:.4e}", r.wealth),
            r.best_agent.map(|b| format!("{b:.4e}")).unwrap_or_default(),
        ])?;
    }
    w.flush()
}
