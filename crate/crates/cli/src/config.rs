//! TOML run configuration with dotted-key overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use olps_core::fundsep::{PortfolioMode, SolverConfig};
use olps_core::learner::{MixtureRule, DEFAULT_EG_ETA, DEFAULT_EWMA_LAMBDA};
use olps_core::marketdata::{CsvSchema, FeatureConvention, DEFAULT_CLEAN_HI, DEFAULT_CLEAN_LO};
use olps_core::patterns::{ControlSolver, MatchConfig};
use olps_core::synth::{self, SdcCase, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The only configuration layout this build understands.
pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spec_version: u32,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u32,
    pub data: DataConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub agents: AgentsConfig,
    #[serde(default)]
    pub matching: MatchConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Cluster name to ticker list; empty means one cluster of all assets.
    #[serde(default)]
    pub clusters: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub baselines: BaselinesConfig,
    #[serde(default)]
    pub frictions: FrictionsConfig,
    #[serde(default)]
    pub batch: BatchConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_seed() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Wide CSV of price relatives.
    Relatives,
    /// Long CSV of OHLC bars.
    Ohlc,
    /// Wide CSV of close prices.
    Closes,
    /// Generated lognormal relatives.
    Synth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default = "default_convention")]
    pub convention: FeatureConvention,
    /// Restrict to these tickers, in this order.
    #[serde(default)]
    pub tickers: Option<Vec<String>>,
    #[serde(default)]
    pub clean: bool,
    #[serde(default = "default_clean_lo")]
    pub clean_lo: f64,
    #[serde(default = "default_clean_hi")]
    pub clean_hi: f64,
    #[serde(default)]
    pub synth: SynthSection,
}

fn default_delimiter() -> char {
    ','
}
fn default_convention() -> FeatureConvention {
    FeatureConvention::CloseToClose
}
fn default_clean_lo() -> f64 {
    DEFAULT_CLEAN_LO
}
fn default_clean_hi() -> f64 {
    DEFAULT_CLEAN_HI
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub case: SdcCase,
    pub n_assets: usize,
    pub n_periods: usize,
    pub variance: f64,
    pub down_assets: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            case: SdcCase::Sdc1,
            n_assets: synth::DEFAULT_ASSETS,
            n_periods: synth::DEFAULT_PERIODS,
            variance: synth::DEFAULT_VARIANCE,
            down_assets: synth::DEFAULT_DOWN_ASSETS,
        }
    }
}

impl SynthSection {
    pub fn spec(&self, case: SdcCase, seed: u32) -> SynthSpec {
        SynthSpec {
            case,
            n_assets: self.n_assets,
            n_periods: self.n_periods,
            seed,
            variance: self.variance,
            down_assets: self.down_assets,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    Universal,
    Eg,
    Ewma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub mode: PortfolioMode,
    pub rule: RuleName,
    pub eta: f64,
    pub lambda: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            mode: PortfolioMode::Absolute,
            rule: RuleName::Universal,
            eta: DEFAULT_EG_ETA,
            lambda: DEFAULT_EWMA_LAMBDA,
        }
    }
}

impl LearnerConfig {
    pub fn mixture_rule(&self) -> MixtureRule {
        match self.rule {
            RuleName::Universal => MixtureRule::Universal,
            RuleName::Eg => MixtureRule::ExponentialGradient { eta: self.eta },
            RuleName::Ewma => MixtureRule::Ewma {
                lambda: self.lambda,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Pattern,
    AntiBcrp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsConfig {
    pub generator: GeneratorKind,
    /// Largest window length K.
    pub k: usize,
    /// Number of match-count indices L.
    pub l: usize,
    pub taus: Vec<usize>,
    pub solver: ControlSolver,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Pattern,
            k: 5,
            l: 10,
            taus: vec![1],
            solver: ControlSolver::Analytic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesConfig {
    pub universal: bool,
    pub resolution: usize,
    /// Skip the universal portfolio above this many assets.
    pub max_universal_assets: usize,
    pub best_stock: bool,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        Self {
            universal: true,
            resolution: olps_core::baselines::DEFAULT_RESOLUTION,
            max_universal_assets: 3,
            best_stock: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrictionsConfig {
    pub cost_bps: f64,
    /// Use this turnover every period instead of the learner's.
    pub flat_turnover: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub cases: Vec<SdcCase>,
    pub modes: Vec<PortfolioMode>,
    pub seeds: Vec<u32>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            cases: SdcCase::ALL.to_vec(),
            modes: vec![PortfolioMode::Absolute, PortfolioMode::Active],
            seeds: (1..=30).collect(),
        }
    }
}

impl RunConfig {
    /// Reads `path`, applies `key=value` overrides, and validates.
    /// Relative data and output paths are resolved against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        if cfg.output_dir.is_relative() && !overrides.iter().any(|o| o.starts_with("output_dir=")) {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg: Self = toml::from_str(&merged).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.spec_version != SPEC_VERSION {
            return bad(
                "spec_version",
                format!(
                    "unsupported version {} (expected {SPEC_VERSION})",
                    self.spec_version
                ),
            );
        }
        if self.agents.k == 0 {
            return bad("agents.k", "must be at least 1".into());
        }
        if self.agents.l == 0 {
            return bad("agents.l", "must be at least 1".into());
        }
        if self.agents.taus.is_empty() || self.agents.taus.contains(&0) {
            return bad(
                "agents.taus",
                "must be a non-empty list of horizons >= 1".into(),
            );
        }
        if self.agents.solver == ControlSolver::NumericLogOptimal
            && self.learner.mode == PortfolioMode::Active
        {
            return bad(
                "agents.solver",
                "numeric_log_optimal needs learner.mode = \"absolute\"".into(),
            );
        }
        if !(self.frictions.cost_bps >= 0.0 && self.frictions.cost_bps.is_finite()) {
            return bad(
                "frictions.cost_bps",
                format!("must be >= 0, got {}", self.frictions.cost_bps),
            );
        }
        if let Some(f) = self.frictions.flat_turnover {
            if !(f >= 0.0 && f.is_finite()) {
                return bad("frictions.flat_turnover", format!("must be >= 0, got {f}"));
            }
        }
        if let Err(e) = self.learner.mixture_rule().validate() {
            return bad("learner", e.to_string());
        }
        if !(self.solver.gamma > 0.0 && self.solver.gamma.is_finite()) {
            return bad(
                "solver.gamma",
                format!("must be > 0, got {}", self.solver.gamma),
            );
        }
        if !(self.solver.ridge > 0.0 && self.solver.ridge.is_finite()) {
            return bad(
                "solver.ridge",
                format!("must be > 0, got {}", self.solver.ridge),
            );
        }
        if self.data.source != DataSource::Synth && self.data.path.is_none() {
            return bad("data.path", "required for file data sources".into());
        }
        if self.data.clean && !(self.data.clean_lo < 1.0 && 1.0 < self.data.clean_hi) {
            return bad("data.clean_lo", "need clean_lo < 1 < clean_hi".into());
        }
        if self.baselines.resolution == 0 {
            return bad("baselines.resolution", "must be at least 1".into());
        }
        for (name, tickers) in &self.clusters {
            if tickers.is_empty() {
                return bad(&format!("clusters.{name}"), "cluster has no tickers".into());
            }
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` in `table`. The value is parsed as TOML when it
/// can be, and taken as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key}: {part} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
