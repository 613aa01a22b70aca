//! Seeded lognormal price relatives for the four synthetic data cases.

use rand_distr::{Distribution, StandardNormal};
use rand_mt::Mt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relatives::PriceRelativeMatrix;

pub const DEFAULT_VARIANCE: f64 = 0.0002;
pub const DEFAULT_ASSETS: usize = 10;
pub const DEFAULT_PERIODS: usize = 1000;
/// Number of down-drifting assets in the mixed case.
pub const DEFAULT_DOWN_ASSETS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SdcCase {
    /// No drift.
    #[serde(rename = "SDC1", alias = "sdc1", alias = "Sdc1")]
    Sdc1,
    /// Common upward drift of 0.1% per period.
    #[serde(rename = "SDC2", alias = "sdc2", alias = "Sdc2")]
    Sdc2,
    /// Random per-asset drift between 0 and 0.1%.
    #[serde(rename = "SDC3", alias = "sdc3", alias = "Sdc3")]
    Sdc3,
    /// A few assets drifting down, the rest up.
    #[serde(rename = "SDC4", alias = "sdc4", alias = "Sdc4")]
    Sdc4,
}

impl SdcCase {
    pub const ALL: [SdcCase; 4] = [Self::Sdc1, Self::Sdc2, Self::Sdc3, Self::Sdc4];
}

impl std::fmt::Display for SdcCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = match self {
            Self::Sdc1 => 1,
            Self::Sdc2 => 2,
            Self::Sdc3 => 3,
            Self::Sdc4 => 4,
        };
        write!(f, "SDC{n}")
    }
}

impl std::str::FromStr for SdcCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sdc1" | "1" => Ok(Self::Sdc1),
            "sdc2" | "2" => Ok(Self::Sdc2),
            "sdc3" | "3" => Ok(Self::Sdc3),
            "sdc4" | "4" => Ok(Self::Sdc4),
            other => Err(Error::Invalid(format!("unknown synthetic case {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub case: SdcCase,
    #[serde(default = "default_assets")]
    pub n_assets: usize,
    #[serde(default = "default_periods")]
    pub n_periods: usize,
    #[serde(default)]
    pub seed: u32,
    #[serde(default = "default_variance")]
    pub variance: f64,
    #[serde(default = "default_down")]
    pub down_assets: usize,
}

fn default_assets() -> usize {
    DEFAULT_ASSETS
}
fn default_periods() -> usize {
    DEFAULT_PERIODS
}
fn default_variance() -> f64 {
    DEFAULT_VARIANCE
}
fn default_down() -> usize {
    DEFAULT_DOWN_ASSETS
}

impl SynthSpec {
    pub fn new(case: SdcCase, seed: u32) -> Self {
        Self {
            case,
            n_assets: DEFAULT_ASSETS,
            n_periods: DEFAULT_PERIODS,
            seed,
            variance: DEFAULT_VARIANCE,
            down_assets: DEFAULT_DOWN_ASSETS,
        }
    }

    pub fn with_seed(self, seed: u32) -> Self {
        Self { seed, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.n_assets == 0 || self.n_periods == 0 {
            return Err(Error::Invalid(
                "synthetic data needs at least one asset and one period".into(),
            ));
        }
        if !(self.variance >= 0.0 && self.variance.is_finite()) {
            return Err(Error::Invalid(format!(
                "variance must be >= 0, got {}",
                self.variance
            )));
        }
        Ok(())
    }
}

/// Mean and standard deviation of the normal whose exponential has mean `mu`
/// and variance `v`.
pub fn lognormal_params(mu: f64, v: f64) -> (f64, f64) {
    let mu_bar = (mu * mu / (v + mu * mu).sqrt()).ln();
    let sigma_bar = (v / (mu * mu) + 1.0).ln().sqrt();
    (mu_bar, sigma_bar)
}

/// Random drift of the third case for a standard normal draw `delta`.
pub fn sdc3_mean(delta: f64) -> f64 {
    1.0 + (0.0005 + 0.0005 * delta).min(0.001).max(0.0)
}

/// Per-asset expected relatives. The third case draws one normal per asset
/// from `rng` before any relatives are drawn.
fn asset_means(spec: &SynthSpec, rng: &mut Mt) -> Vec<f64> {
    let m = spec.n_assets;
    match spec.case {
        SdcCase::Sdc1 => vec![1.0; m],
        SdcCase::Sdc2 => vec![1.001; m],
        SdcCase::Sdc3 => (0..m)
            .map(|_| sdc3_mean(StandardNormal.sample(rng)))
            .collect(),
        SdcCase::Sdc4 => (0..m)
            .map(|i| if i < spec.down_assets { 0.999 } else { 1.001 })
            .collect(),
    }
}

/// Expected relatives the generator uses for `spec`.
pub fn means(spec: &SynthSpec) -> Vec<f64> {
    asset_means(spec, &mut Mt::new(spec.seed))
}

/// Draws a `T x M` matrix. Periods form the outer loop and assets the inner
/// one, all from a single MT19937 stream seeded with `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<PriceRelativeMatrix> {
    spec.validate()?;
    let mut rng = Mt::new(spec.seed);
    let params: Vec<(f64, f64)> = asset_means(spec, &mut rng)
        .into_iter()
        .map(|mu| lognormal_params(mu, spec.variance))
        .collect();
    let mut values = Vec::with_capacity(spec.n_periods * spec.n_assets);
    for _ in 0..spec.n_periods {
        for &(mu_bar, sigma_bar) in &params {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push((mu_bar + sigma_bar * z).exp());
        }
    }
    PriceRelativeMatrix::from_flat(
        values,
        spec.n_periods,
        PriceRelativeMatrix::default_tickers(spec.n_assets),
    )
}

/// One matrix per seed.
pub fn batch(template: &SynthSpec, seeds: &[u32]) -> Result<Vec<PriceRelativeMatrix>> {
    seeds
        .iter()
        .map(|&s| generate(&template.with_seed(s)))
        .collect()
}
