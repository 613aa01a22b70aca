//! Closed-form mean-variance controls via mutual fund separation.
//!
//! The quadratic problem `max w'mu - (gamma/2) w'Sigma w` subject to `w'1 = 1`
//! splits into a minimum-variance benchmark fund
//!
//! ```text
//! w_B = Sigma^-1 1 / (1' Sigma^-1 1)
//! ```
//!
//! and a zero-cost active fund
//!
//! ```text
//! w_A = (1/gamma) Sigma^-1 (mu - 1 (1' Sigma^-1 mu) / (1' Sigma^-1 1))
//! ```
//!
//! Absolute (long-only, fully invested) agents hold `w_B + w_A` projected onto
//! the probability simplex. Active agents hold `w_A` rescaled to unit gross
//! leverage, which is the same as picking `gamma` each period so that
//! `sum |w| = 1`.
//!
//! All solves go through a Cholesky factorisation of the (possibly
//! ridge-regularised) covariance; no explicit inverse is formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ridge size, relative to the average variance.
pub const DEFAULT_RIDGE: f64 = 1e-8;
/// Smallest eigenvalue, relative to the average variance, below which the ridge is applied.
pub const RIDGE_TRIGGER: f64 = 1e-10;
/// Default risk aversion for absolute agents.
pub const DEFAULT_GAMMA: f64 = 1.0;

/// Long-only fully invested, or zero-cost long/short with unit leverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioMode {
    Absolute,
    Active,
}

impl std::fmt::Display for PortfolioMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PortfolioMode::Absolute => write!(f, "absolute"),
            PortfolioMode::Active => write!(f, "active"),
        }
    }
}

impl std::str::FromStr for PortfolioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "absolute" | "abs" => Ok(Self::Absolute),
            "active" | "act" => Ok(Self::Active),
            other => Err(Error::Invalid(format!("unknown portfolio mode {other:?}"))),
        }
    }
}

/// How absolute controls are forced back onto the simplex.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Euclidean projection onto `{h >= 0, sum h = 1}`.
    #[default]
    Simplex,
    /// Zero out negative weights and rescale the rest.
    ClipRenormalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub gamma: f64,
    pub ridge: f64,
    pub projection: Projection,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            ridge: DEFAULT_RIDGE,
            projection: Projection::Simplex,
        }
    }
}

/// Sample mean and covariance of arithmetic returns `x - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub count: usize,
}

impl MomentEstimate {
    /// Estimates from rows of price relatives. The covariance uses an `n - 1`
    /// denominator; with a single row it is the zero matrix, which the ridge
    /// later turns into a scaled identity.
    pub fn from_relatives<'a, I>(rows: I, n_assets: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut acc = MomentAccumulator::new(n_assets);
        for row in rows {
            acc.push(row);
        }
        acc.estimate()
    }
}

/// Streaming mean/covariance (Welford), so nested prefixes of one match
/// ordering can be snapshotted without recomputation.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    n: usize,
    mean: Vec<f64>,
    /// Upper triangle, row-major, of the sum of centred cross products.
    comoment: Vec<f64>,
    delta: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(n_assets: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; n_assets],
            comoment: vec![0.0; n_assets * n_assets],
            delta: vec![0.0; n_assets],
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Adds one row of price relatives.
    pub fn push(&mut self, relatives: &[f64]) {
        let m = self.mean.len();
        debug_assert_eq!(relatives.len(), m);
        self.n += 1;
        let inv_n = 1.0 / self.n as f64;
        for i in 0..m {
            self.delta[i] = (relatives[i] - 1.0) - self.mean[i];
            self.mean[i] += self.delta[i] * inv_n;
        }
        for i in 0..m {
            let after_i = (relatives[i] - 1.0) - self.mean[i];
            let row = &mut self.comoment[i * m..(i + 1) * m];
            for j in i..m {
                row[j] += self.delta[j] * after_i;
            }
        }
    }

    pub fn estimate(&self) -> MomentEstimate {
        let m = self.mean.len();
        let denom = if self.n >= 2 {
            (self.n - 1) as f64
        } else {
            1.0
        };
        let scale = if self.n >= 2 { 1.0 / denom } else { 0.0 };
        let sigma = DMatrix::from_fn(m, m, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.comoment[a * m + b] * scale
        });
        MomentEstimate {
            mu: DVector::from_column_slice(&self.mean),
            sigma,
            count: self.n,
        }
    }
}

/// A weight vector over the assets an agent or portfolio controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector(pub Vec<f64>);

impl ControlVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Gross leverage `sum |w|`.
    pub fn leverage(&self) -> f64 {
        self.0.iter().map(|w| w.abs()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&w| w == 0.0)
    }
}

/// Symmetrises `sigma` and, if its smallest eigenvalue is not above
/// `RIDGE_TRIGGER * trace/M`, adds `eps * trace/M * I`. A zero trace is
/// replaced by 1. Returns the matrix and whether the ridge was applied.
pub fn regularize(sigma: &DMatrix<f64>, eps: f64) -> (DMatrix<f64>, bool) {
    let m = sigma.nrows();
    let mut sym = (sigma + sigma.transpose()) * 0.5;
    if m == 0 {
        return (sym, false);
    }
    let avg_var = {
        let tr = sym.trace() / m as f64;
        if tr > 0.0 && tr.is_finite() {
            tr
        } else {
            1.0
        }
    };
    // The smallest eigenvalue exceeds the trigger exactly when the shifted
    // matrix is positive definite, which one Cholesky attempt decides.
    let mut shifted = sym.clone();
    for i in 0..m {
        shifted[(i, i)] -= RIDGE_TRIGGER * avg_var;
    }
    if Cholesky::new(shifted).is_none() {
        for i in 0..m {
            sym[(i, i)] += eps * avg_var;
        }
        (sym, true)
    } else {
        (sym, false)
    }
}

fn condition_estimate(sigma: &DMatrix<f64>) -> f64 {
    let eig = sigma.clone().symmetric_eigenvalues();
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factor of the regularised covariance.
#[derive(Debug, Clone)]
pub struct FactoredCovariance {
    chol: Cholesky<f64, Dyn>,
    /// `Sigma^-1 1`
    inv_ones: DVector<f64>,
    /// `1' Sigma^-1 1`
    ones_inv_ones: f64,
    pub regularized: bool,
}

impl FactoredCovariance {
    pub fn new(sigma: &DMatrix<f64>, eps: f64) -> Result<Self> {
        if !sigma.is_square() {
            return Err(Error::Shape(format!(
                "covariance is {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let (reg, regularized) = regularize(sigma, eps);
        let chol = Cholesky::new(reg.clone()).ok_or_else(|| Error::Singular {
            condition: condition_estimate(&reg),
        })?;
        let inv_ones = chol.solve(&DVector::from_element(sigma.nrows(), 1.0));
        let ones_inv_ones = inv_ones.sum();
        if !(ones_inv_ones.is_finite() && ones_inv_ones > 0.0) {
            return Err(Error::Singular {
                condition: condition_estimate(&reg),
            });
        }
        Ok(Self {
            chol,
            inv_ones,
            ones_inv_ones,
            regularized,
        })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn benchmark(&self) -> DVector<f64> {
        &self.inv_ones / self.ones_inv_ones
    }

    /// Active fund and the L1 scale of the two terms it is the difference of,
    /// used to tell a genuinely zero active fund from rounding noise.
    fn active_with_scale(&self, mu: &DVector<f64>, gamma: f64) -> (DVector<f64>, f64) {
        let inv_mu = self.solve(mu);
        let c = inv_mu.sum() / self.ones_inv_ones;
        let w = (&inv_mu - &self.inv_ones * c) / gamma;
        // The difference sums to zero exactly only in exact arithmetic.
        let w = w.add_scalar(-w.mean());
        let scale = (inv_mu.lp_norm(1) + c.abs() * self.inv_ones.lp_norm(1)) / gamma;
        (w, scale)
    }

    pub fn active(&self, mu: &DVector<f64>, gamma: f64) -> DVector<f64> {
        self.active_with_scale(mu, gamma).0
    }

    /// Lagrange multiplier of the budget constraint at the optimum.
    pub fn lagrange_multiplier(&self, mu: &DVector<f64>, gamma: f64) -> f64 {
        self.solve(mu).sum() / self.ones_inv_ones - gamma / self.ones_inv_ones
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "risk aversion must be positive, got {gamma}"
        )))
    }
}

/// Minimum-variance weights `Sigma^-1 1 / 1' Sigma^-1 1`. They sum to 1 but may be negative.
pub fn benchmark_weights(sigma: &DMatrix<f64>) -> Result<ControlVector> {
    let f = FactoredCovariance::new(sigma, DEFAULT_RIDGE)?;
    Ok(ControlVector(f.benchmark().iter().copied().collect()))
}

/// Zero-cost active fund for risk aversion `gamma`.
pub fn active_weights(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    gamma: f64,
) -> Result<ControlVector> {
    check_gamma(gamma)?;
    let f = FactoredCovariance::new(sigma, DEFAULT_RIDGE)?;
    Ok(ControlVector(f.active(mu, gamma).iter().copied().collect()))
}

/// Unprojected optimum `w_B + w_A` of the budget-constrained quadratic problem.
pub fn mutual_fund_weights(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    gamma: f64,
) -> Result<ControlVector> {
    check_gamma(gamma)?;
    let f = FactoredCovariance::new(sigma, DEFAULT_RIDGE)?;
    Ok(ControlVector(
        (f.benchmark() + f.active(mu, gamma))
            .iter()
            .copied()
            .collect(),
    ))
}

/// Lagrange multiplier `1'S^-1 mu / 1'S^-1 1 - gamma / 1'S^-1 1`.
pub fn lagrange_multiplier(mu: &DVector<f64>, sigma: &DMatrix<f64>, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(FactoredCovariance::new(sigma, DEFAULT_RIDGE)?.lagrange_multiplier(mu, gamma))
}

/// Agent controls for one period from sample moments.
///
/// Absolute: `w_B + w_A` pushed onto the simplex. Active: `w_A / sum|w_A|`,
/// or all zeros (hold cash) when the active fund vanishes, as it does when
/// every asset has the same expected return.
pub fn agent_controls(
    moments: &MomentEstimate,
    mode: PortfolioMode,
    config: &SolverConfig,
) -> Result<ControlVector> {
    check_gamma(config.gamma)?;
    let m = moments.mu.len();
    if moments.sigma.nrows() != m || moments.sigma.ncols() != m {
        return Err(Error::Shape(format!(
            "mean has {m} entries but covariance is {}x{}",
            moments.sigma.nrows(),
            moments.sigma.ncols()
        )));
    }
    let f = FactoredCovariance::new(&moments.sigma, config.ridge)?;
    let (active, scale) = f.active_with_scale(&moments.mu, config.gamma);
    let leverage = active.lp_norm(1);
    let vanished = leverage <= 1e-12 * scale || leverage == 0.0;
    match mode {
        PortfolioMode::Active => {
            if vanished || !leverage.is_finite() {
                Ok(ControlVector::zeros(m))
            } else {
                Ok(ControlVector(active.iter().map(|w| w / leverage).collect()))
            }
        }
        PortfolioMode::Absolute => {
            let mut raw: Vec<f64> = if vanished {
                vec![0.0; m]
            } else {
                active.data.into()
            };
            for (w, b) in raw.iter_mut().zip(f.inv_ones.iter()) {
                *w += b / f.ones_inv_ones;
            }
            if raw.iter().any(|w| !w.is_finite()) {
                return Err(Error::Singular {
                    condition: condition_estimate(&moments.sigma),
                });
            }
            Ok(ControlVector(match config.projection {
                Projection::Simplex => project_simplex(&raw),
                Projection::ClipRenormalize => clip_renormalize(&raw),
            }))
        }
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    if v.iter().all(|&w| w >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-15 {
        return normalise_sum(v.to_vec());
    }
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    normalise_sum(v.iter().map(|&w| (w - theta).max(0.0)).collect())
}

/// Drops negative weights and rescales the remainder to sum to 1; falls
/// back to uniform when nothing positive is left.
pub fn clip_renormalize(v: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|&w| w.max(0.0)).collect();
    if clipped.iter().sum::<f64>() > 0.0 {
        normalise_sum(clipped)
    } else {
        ControlVector::uniform(v.len()).into_inner()
    }
}

// Removes the last ulp-level drift so the budget holds to 1e-12.
fn normalise_sum(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|x| *x /= s);
    }
    w
}

/// Log-optimal weights over the simplex for a set of sample relatives,
/// found numerically with the multiplicative fixed-point iteration
/// `b_m <- b_m * mean_i(x_im / b'x_i)`. Used as the slow reference solver.
pub fn log_optimal_weights<'a, I>(
    rows: I,
    n_assets: usize,
    tol: f64,
    max_iter: usize,
) -> ControlVector
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    let mut b = vec![1.0 / n_assets as f64; n_assets];
    if rows.is_empty() {
        return ControlVector(b);
    }
    let mut next = vec![0.0; n_assets];
    for _ in 0..max_iter {
        next.iter_mut().for_each(|v| *v = 0.0);
        for row in &rows {
            let growth: f64 = b.iter().zip(row.iter()).map(|(w, x)| w * x).sum();
            for (acc, x) in next.iter_mut().zip(row.iter()) {
                *acc += x / growth;
            }
        }
        let mut change: f64 = 0.0;
        for (w, g) in b.iter_mut().zip(&next) {
            let updated = *w * g / rows.len() as f64;
            change = change.max((updated - *w).abs());
            *w = updated;
        }
        if change < tol {
            break;
        }
    }
    ControlVector(normalise_sum(b))
}
