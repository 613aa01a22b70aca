//! Wall-clock comparison of the control solvers on a fixed backtest.

use std::time::Instant;

use olps_core::fundsep::PortfolioMode;
use olps_core::learner::{run_backtest, MixtureRule};
use olps_core::patterns::{AgentGrid, ClusterMap, ControlSolver, MatchConfig, PatternGenerator};
use olps_core::relatives::PriceRelativeMatrix;
use olps_core::SolverConfig;
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    AnalyticAbsolute,
    AnalyticActive,
    NumericAbsolute,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Self::AnalyticAbsolute,
        Self::AnalyticActive,
        Self::NumericAbsolute,
    ];

    fn mode(self) -> PortfolioMode {
        match self {
            Self::AnalyticActive => PortfolioMode::Active,
            _ => PortfolioMode::Absolute,
        }
    }

    fn solver(self) -> ControlSolver {
        match self {
            Self::NumericAbsolute => ControlSolver::NumericLogOptimal,
            _ => ControlSolver::Analytic,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub strategy: Strategy,
    pub samples: Vec<f64>,
    pub median_seconds: f64,
    pub terminal_wealth: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub timings: Vec<Timing>,
}

impl TimingReport {
    pub fn median(&self, s: Strategy) -> Option<f64> {
        self.timings
            .iter()
            .find(|t| t.strategy == s)
            .map(|t| t.median_seconds)
    }

    /// True when the medians rank analytic absolute <= analytic active <= numeric.
    pub fn ordering_holds(&self) -> Option<bool> {
        let act = self.median(Strategy::AnalyticActive)?;
        let abs = self.median(Strategy::AnalyticAbsolute)?;
        let num = self.median(Strategy::NumericAbsolute)?;
        Some(abs <= act && act <= num)
    }
}

fn once(x: &PriceRelativeMatrix, s: Strategy, k: usize, l: usize) -> Result<(f64, f64), CliError> {
    let grid = AgentGrid::new(k, l, 1, &[1]).map_err(|e| CliError::Config(e.to_string()))?;
    let mut g = PatternGenerator::new(
        grid,
        ClusterMap::single(x.n_assets()),
        x.n_assets(),
        s.mode(),
        MatchConfig::default(),
        SolverConfig::default(),
    )?
    .with_control_solver(s.solver())?;
    let start = Instant::now();
    let track = run_backtest(x, &mut g, s.mode(), MixtureRule::Universal)?;
    Ok((start.elapsed().as_secs_f64(), track.terminal_wealth()))
}

/// Runs each strategy `repeats` times, interleaved so drift in machine load
/// hits all of them alike, and reports medians.
pub fn timing_report(
    strategies: &[Strategy],
    x: &PriceRelativeMatrix,
    k: usize,
    l: usize,
    repeats: usize,
) -> Result<TimingReport, CliError> {
    let repeats = repeats.max(1);
    let mut samples = vec![Vec::with_capacity(repeats); strategies.len()];
    let mut wealth = vec![f64::NAN; strategies.len()];
    for _ in 0..repeats {
        for (i, &s) in strategies.iter().enumerate() {
            let (secs, w) = once(x, s, k, l)?;
            samples[i].push(secs);
            wealth[i] = w;
        }
    }
    let timings = strategies
        .iter()
        .zip(samples)
        .zip(wealth)
        .map(|((&strategy, samples), terminal_wealth)| {
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let median_seconds = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            };
            Timing {
                strategy,
                samples,
                median_seconds,
                terminal_wealth,
            }
        })
        .collect();
    Ok(TimingReport { timings })
}
