//! Online aggregation of agent controls into a portfolio.
//!
//! Each period the learner:
//!
//! 1. compounds portfolio wealth with the controls `b` held over the period,
//! 2. compounds every agent's wealth with its own controls,
//! 3. updates the mixture `q` from agent wealth,
//! 4. renormalises `q` for the portfolio mode,
//! 5. aggregates next-period agent controls into `b = sum_n q_n H_n`,
//!
//! and finally rescales `b` and `q` so the gross leverage `sum |b|` is one.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Culprit, Error, Result};
use crate::fundsep::PortfolioMode;
use crate::patterns::{AgentGenerator, ControlMatrix};
use crate::relatives::PriceRelativeMatrix;

pub const DEFAULT_EG_ETA: f64 = 0.05;
pub const DEFAULT_EWMA_LAMBDA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MixtureRule {
    /// Mixture proportional to agent wealth.
    Universal,
    /// `q_n exp(eta S_n / sum q S)`.
    #[serde(rename = "eg")]
    ExponentialGradient { eta: f64 },
    /// `lambda q_n + (1 - lambda) q_n S_n / sum q S`.
    Ewma { lambda: f64 },
}

impl Default for MixtureRule {
    fn default() -> Self {
        Self::Universal
    }
}

impl MixtureRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Universal => Ok(()),
            Self::ExponentialGradient { eta } if eta > 0.0 && eta.is_finite() => Ok(()),
            Self::Ewma { lambda } if (0.0..=1.0).contains(&lambda) => Ok(()),
            other => Err(Error::Invalid(format!(
                "bad mixture rule parameters {other:?}"
            ))),
        }
    }
}

/// Raw mixture update, before mode renormalisation.
///
/// The multiplicative rules have nothing to scale when `q` is identically
/// zero (active learners start in cash); they then start from `1/N`.
pub fn mixture_update(q: &[f64], agent_wealth: &[f64], rule: MixtureRule) -> Result<Vec<f64>> {
    if q.len() != agent_wealth.len() {
        return Err(Error::Shape(format!(
            "{} mixture weights for {} agents",
            q.len(),
            agent_wealth.len()
        )));
    }
    if let MixtureRule::Universal = rule {
        return Ok(agent_wealth.to_vec());
    }
    rule.validate()?;
    let seeded;
    let q = if q.iter().all(|&v| v == 0.0) {
        seeded = vec![1.0 / q.len().max(1) as f64; q.len()];
        &seeded
    } else {
        q
    };
    let weighted: f64 = q.iter().zip(agent_wealth).map(|(a, s)| a * s).sum();
    if weighted == 0.0 || !weighted.is_finite() {
        return Err(Error::ZeroNormaliser);
    }
    Ok(match rule {
        MixtureRule::ExponentialGradient { eta } => q
            .iter()
            .zip(agent_wealth)
            .map(|(qn, sn)| qn * (eta * sn / weighted).exp())
            .collect(),
        MixtureRule::Ewma { lambda } => q
            .iter()
            .zip(agent_wealth)
            .map(|(qn, sn)| lambda * qn + (1.0 - lambda) * qn * sn / weighted)
            .collect(),
        MixtureRule::Universal => unreachable!(),
    })
}

/// Absolute: `q / sum q`. Active: `(q - mean) / sum |q - mean|`, or all
/// zeros when `q` is constant.
pub fn renormalize(q: &[f64], mode: PortfolioMode) -> Result<Vec<f64>> {
    match mode {
        PortfolioMode::Absolute => {
            let s: f64 = q.iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::ZeroNormaliser);
            }
            Ok(q.iter().map(|v| v / s).collect())
        }
        PortfolioMode::Active => {
            let n = q.len().max(1) as f64;
            let mean = q.iter().sum::<f64>() / n;
            let mut centred: Vec<f64> = q.iter().map(|v| v - mean).collect();
            // Second pass removes the rounding left in the first mean.
            let drift = centred.iter().sum::<f64>() / n;
            centred.iter_mut().for_each(|v| *v -= drift);
            let l1: f64 = centred.iter().map(|v| v.abs()).sum();
            if !l1.is_finite() {
                return Err(Error::ZeroNormaliser);
            }
            // Equal entries can leave a few ulps after centring; that is still constant.
            let scale = q.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if l1 <= 4.0 * n * f64::EPSILON * scale {
                return Ok(vec![0.0; q.len()]);
            }
            Ok(centred.iter().map(|v| v / l1).collect())
        }
    }
}

fn growth(weights: &[f64], x: &[f64]) -> f64 {
    weights
        .iter()
        .zip(x)
        .map(|(w, r)| w * (r - 1.0))
        .sum::<f64>()
        + 1.0
}

/// What happened in one period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodReport {
    pub period: usize,
    /// Portfolio growth factor over the period.
    pub growth: f64,
    pub wealth: f64,
    /// `sum |b_next - b_drifted|`, the rebalancing into next period's controls.
    pub turnover: f64,
    /// Gross leverage of the aggregated controls before correction.
    pub leverage: f64,
    /// Next period holds only cash because the aggregate controls vanished.
    pub hold_cash: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub q: Vec<f64>,
    pub agent_wealth: Vec<f64>,
    pub wealth: f64,
    /// Portfolio controls for the upcoming period.
    pub b: Vec<f64>,
    /// Agent controls for the upcoming period.
    pub controls: ControlMatrix,
    pub mode: PortfolioMode,
    pub rule: MixtureRule,
    pub period: usize,
}

/// The online learner: owns the state and advances it one period at a time.
#[derive(Debug, Clone)]
pub struct OnlineLearner {
    state: LearnerState,
}

impl OnlineLearner {
    /// Starts with unit wealth. Absolute learners hold `1/N` of every agent
    /// and `1/M` of every asset; active learners start in cash.
    pub fn new(
        mode: PortfolioMode,
        rule: MixtureRule,
        initial_controls: ControlMatrix,
    ) -> Result<Self> {
        rule.validate()?;
        let n = initial_controls.n_agents();
        let m = initial_controls.n_assets();
        if n == 0 || m == 0 {
            return Err(Error::Invalid(
                "learner needs at least one agent and one asset".into(),
            ));
        }
        let (q, b) = match mode {
            PortfolioMode::Absolute => (vec![1.0 / n as f64; n], vec![1.0 / m as f64; m]),
            PortfolioMode::Active => (vec![0.0; n], vec![0.0; m]),
        };
        Ok(Self {
            state: LearnerState {
                q,
                agent_wealth: vec![1.0; n],
                wealth: 1.0,
                b,
                controls: initial_controls,
                mode,
                rule,
                period: 0,
            },
        })
    }

    pub fn state(&self) -> &LearnerState {
        &self.state
    }

    pub fn into_state(self) -> LearnerState {
        self.state
    }

    /// Advances one period with relatives `x` and the agents' controls for the next period.
    pub fn step(&mut self, x: &[f64], next_controls: ControlMatrix) -> Result<PeriodReport> {
        let s = &mut self.state;
        let m = s.b.len();
        if x.len() != m {
            return Err(Error::Shape(format!(
                "{} relatives for {m} assets",
                x.len()
            )));
        }
        if next_controls.n_agents() != s.q.len() || next_controls.n_assets() != m {
            return Err(Error::Shape(format!(
                "controls are {}x{}, expected {}x{m}",
                next_controls.n_agents(),
                next_controls.n_assets(),
                s.q.len()
            )));
        }
        let period = s.period;

        let g = growth(&s.b, x);
        if !(g > 0.0) {
            return Err(Error::Bankruptcy {
                culprit: Culprit::Portfolio,
                period,
                growth: g,
            });
        }
        for (n, h) in s.controls.rows().enumerate() {
            let gn = growth(h, x);
            if !(gn > 0.0) {
                return Err(Error::Bankruptcy {
                    culprit: Culprit::Agent(n),
                    period,
                    growth: gn,
                });
            }
            s.agent_wealth[n] *= gn;
        }
        s.wealth *= g;

        let raw = mixture_update(&s.q, &s.agent_wealth, s.rule)?;
        let mut q = renormalize(&raw, s.mode)?;

        let mut b = vec![0.0; m];
        for (qn, h) in q.iter().zip(next_controls.rows()) {
            if *qn != 0.0 {
                for (bm, hm) in b.iter_mut().zip(h) {
                    *bm += qn * hm;
                }
            }
        }
        let leverage: f64 = b.iter().map(|v| v.abs()).sum();
        let hold_cash = leverage == 0.0;
        if !hold_cash && leverage != 1.0 {
            b.iter_mut().for_each(|v| *v /= leverage);
            q.iter_mut().for_each(|v| *v /= leverage);
        }

        let turnover = b
            .iter()
            .zip(&s.b)
            .zip(x)
            .map(|((next, held), r)| (next - held * r / g).abs())
            .sum();

        s.q = q;
        s.b = b;
        s.controls = next_controls;
        s.period += 1;
        Ok(PeriodReport {
            period,
            growth: g,
            wealth: s.wealth,
            turnover,
            leverage,
            hold_cash,
        })
    }
}

/// Wealth paths of a strategy, optionally with its agents.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct WealthTrack {
    /// Cumulative wealth after each period.
    pub portfolio: Vec<f64>,
    /// Controls held over each period, row-major `T x M`.
    pub controls: Vec<f64>,
    pub n_assets: usize,
    /// Cumulative agent wealth after each period, row-major `T x N`; empty for baselines.
    pub agent_wealth: Vec<f64>,
    pub agent_labels: Vec<String>,
    /// Rebalancing into each period's controls.
    pub turnover: Vec<f64>,
    pub hold_cash: Vec<bool>,
}

impl WealthTrack {
    /// A track from per-period growth factors and the controls behind them.
    pub fn from_growth(growth: &[f64], controls: Vec<f64>, n_assets: usize) -> Self {
        let mut wealth = 1.0;
        let portfolio = growth
            .iter()
            .map(|g| {
                wealth *= g;
                wealth
            })
            .collect();
        Self {
            portfolio,
            controls,
            n_assets,
            turnover: vec![0.0; growth.len()],
            hold_cash: vec![false; growth.len()],
            ..Default::default()
        }
    }

    pub fn n_periods(&self) -> usize {
        self.portfolio.len()
    }

    pub fn n_agents(&self) -> usize {
        self.agent_labels.len()
    }

    pub fn terminal_wealth(&self) -> f64 {
        self.portfolio.last().copied().unwrap_or(1.0)
    }

    /// Growth factor of period `t`.
    pub fn growth(&self, t: usize) -> f64 {
        let prev = if t == 0 { 1.0 } else { self.portfolio[t - 1] };
        self.portfolio[t] / prev
    }

    pub fn growth_factors(&self) -> Vec<f64> {
        (0..self.n_periods()).map(|t| self.growth(t)).collect()
    }

    pub fn control_row(&self, t: usize) -> &[f64] {
        &self.controls[t * self.n_assets..(t + 1) * self.n_assets]
    }

    /// Wealth path of agent `n`.
    pub fn agent_path(&self, n: usize) -> Vec<f64> {
        let k = self.n_agents();
        (0..self.n_periods())
            .map(|t| self.agent_wealth[t * k + n])
            .collect()
    }

    pub fn agent_terminal(&self) -> Vec<f64> {
        let k = self.n_agents();
        if k == 0 || self.n_periods() == 0 {
            return vec![1.0; k];
        }
        self.agent_wealth[(self.n_periods() - 1) * k..].to_vec()
    }

    /// Mean per-period arithmetic return.
    pub fn mean_return(&self) -> f64 {
        let n = self.n_periods();
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|t| self.growth(t) - 1.0).sum::<f64>() / n as f64
    }

    /// `t,S_port` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "S_port"])?;
        for (t, s) in self.portfolio.iter().enumerate() {
            w.write_record([(t + 1).to_string(), format!("{s:?}")])?;
        }
        w.flush()
    }

    /// `t` followed by one wealth column per agent.
    pub fn write_agents_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(self.agent_labels.iter().cloned());
        w.write_record(&header)?;
        let k = self.n_agents();
        if k == 0 {
            return w.flush();
        }
        for (t, row) in self.agent_wealth.chunks_exact(k).enumerate() {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()
    }

    pub fn summary(&self) -> TrackSummary {
        let best = crate::baselines::best_agent(self);
        TrackSummary {
            periods: self.n_periods(),
            terminal_wealth: self.terminal_wealth(),
            best_agent: best.map(|(n, _)| n),
            best_agent_label: best.map(|(n, _)| self.agent_labels[n].clone()),
            best_agent_wealth: best.map(|(_, w)| w),
            mean_return: self.mean_return(),
            hold_cash_periods: self.hold_cash.iter().filter(|&&h| h).count(),
        }
    }
}

/// Headline numbers of a track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub periods: usize,
    pub terminal_wealth: f64,
    pub best_agent: Option<usize>,
    pub best_agent_label: Option<String>,
    pub best_agent_wealth: Option<f64>,
    pub mean_return: f64,
    pub hold_cash_periods: usize,
}

/// Runs the learner over every period of `x`, asking `generator` for the
/// agent controls of each next period.
pub fn run_backtest<G: AgentGenerator + ?Sized>(
    x: &PriceRelativeMatrix,
    generator: &mut G,
    mode: PortfolioMode,
    rule: MixtureRule,
) -> Result<WealthTrack> {
    let t_max = x.n_periods();
    if t_max < 1 {
        return Err(Error::EmptyMatrix(t_max));
    }
    if generator.n_assets() != x.n_assets() {
        return Err(Error::Shape(format!(
            "generator trades {} assets, data has {}",
            generator.n_assets(),
            x.n_assets()
        )));
    }
    let m = x.n_assets();
    let n = generator.n_agents();
    let mut learner = OnlineLearner::new(mode, rule, generator.generate(x, 0))?;
    let mut track = WealthTrack {
        portfolio: Vec::with_capacity(t_max),
        controls: Vec::with_capacity(t_max * m),
        n_assets: m,
        agent_wealth: Vec::with_capacity(t_max * n),
        agent_labels: (0..n).map(|i| generator.label(i)).collect(),
        turnover: Vec::with_capacity(t_max),
        hold_cash: Vec::with_capacity(t_max),
    };
    // Entering the first period from cash.
    let mut entry_turnover: f64 = learner.state().b.iter().map(|v| v.abs()).sum();
    let mut entry_cash = learner.state().b.iter().all(|&v| v == 0.0);
    for t in 0..t_max {
        track.controls.extend_from_slice(&learner.state().b);
        track.turnover.push(entry_turnover);
        track.hold_cash.push(entry_cash);
        let next = generator.generate(x, t + 1);
        let report = learner.step(x.row(t), next)?;
        track.portfolio.push(report.wealth);
        track
            .agent_wealth
            .extend_from_slice(&learner.state().agent_wealth);
        entry_turnover = report.turnover;
        entry_cash = report.hold_cash;
    }
    Ok(track)
}
