//! Two-sample Kolmogorov-Smirnov tests and the wealth hypothesis battery.
//!
//! # Orientation of the one-sided test
//!
//! `Alternative::Greater` tests whether the empirical CDF of the *first*
//! sample lies above that of the second somewhere:
//!
//! ```text
//! D+ = sup_x (F_a(x) - F_b(x))
//! ```
//!
//! A CDF that sits higher reaches any level sooner, so a small p-value says
//! the first sample tends to be *smaller*. With `a = (1, 2)` and
//! `b = (3, 4)`, `F_a` is already 1 where `F_b` is still 0, giving `D+ = 1`
//! and a small p-value; swapping the arguments gives `D+ = 0` and `p = 1`.
//!
//! The battery labels follow the same reading: `S2>S1` is
//! `ks(S2, S1, Greater)`, the CDF of best-agent wealth above that of the
//! portfolio.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// CDF of the first sample above that of the second.
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub d_stat: f64,
    pub p_value: f64,
    pub alternative: Alternative,
    pub n1: usize,
    pub n2: usize,
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Invalid("sample contains NaN".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// `(sup (F_a - F_b), sup (F_b - F_a))`, both clamped at 0.
fn cdf_gaps(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut up, mut down) = (0.0f64, 0.0f64);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let gap = i as f64 / n1 - j as f64 / n2;
        up = up.max(gap);
        down = down.max(-gap);
    }
    (up, down)
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // Theta-function form, fast for small arguments.
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let cdf: f64 = (1..=20)
            .map(|k| {
                let odd = (2 * k - 1) as f64;
                (-odd * odd * pi2 / (8.0 * lambda * lambda)).exp()
            })
            .sum::<f64>()
            * (2.0 * std::f64::consts::PI).sqrt()
            / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample KS test with asymptotic p-values.
pub fn ks_two_sample(a: &[f64], b: &[f64], alternative: Alternative) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    let (up, down) = cdf_gaps(&sa, &sb);
    let (n1, n2) = (a.len(), b.len());
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    let (d_stat, p_value) = match alternative {
        Alternative::Greater => (up, (-2.0 * ne * up * up).exp().min(1.0)),
        Alternative::TwoSided => {
            let d = up.max(down);
            (d, kolmogorov_sf(ne.sqrt() * d))
        }
    };
    Ok(KsResult {
        d_stat,
        p_value,
        alternative,
        n1,
        n2,
    })
}

/// Wealth paths of one run: portfolio, its best agent, and the best stock.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryRun {
    pub portfolio: Vec<f64>,
    pub best_agent: Vec<f64>,
    pub best_stock: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Hypothesis {
    #[serde(rename = "S2>S1")]
    AgentOverPortfolio,
    #[serde(rename = "S2>S3")]
    AgentOverStock,
    #[serde(rename = "S3>S1")]
    StockOverPortfolio,
}

impl Hypothesis {
    pub const ALL: [Hypothesis; 3] = [
        Self::AgentOverPortfolio,
        Self::AgentOverStock,
        Self::StockOverPortfolio,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Self::AgentOverPortfolio => "S2>S1",
            Self::AgentOverStock => "S2>S3",
            Self::StockOverPortfolio => "S3>S1",
        }
    }

    fn samples<'a>(&self, run: &'a BatteryRun) -> (&'a [f64], &'a [f64]) {
        match self {
            Self::AgentOverPortfolio => (&run.best_agent, &run.portfolio),
            Self::AgentOverStock => (&run.best_agent, &run.best_stock),
            Self::StockOverPortfolio => (&run.best_stock, &run.portfolio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryEntry {
    pub hypothesis: Hypothesis,
    pub p_values: Vec<f64>,
    /// Average p-value over runs.
    pub mean_p: f64,
    /// `ks(p_values, [mean_p], Greater)`: a sample against a single point.
    pub second_stage_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Battery {
    pub entries: Vec<BatteryEntry>,
}

impl Battery {
    pub fn entry(&self, h: Hypothesis) -> &BatteryEntry {
        self.entries
            .iter()
            .find(|e| e.hypothesis == h)
            .expect("battery holds every hypothesis")
    }
}

/// One-sided KS p-values of the three hypotheses for every run, their mean,
/// and the second-stage test of the p-values against their mean.
pub fn hypothesis_battery(runs: &[BatteryRun]) -> Result<Battery> {
    if runs.len() < 2 {
        return Err(Error::Invalid(format!(
            "battery needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    let mut entries = Vec::with_capacity(3);
    for h in Hypothesis::ALL {
        let p_values = runs
            .iter()
            .map(|r| {
                let (a, b) = h.samples(r);
                ks_two_sample(a, b, Alternative::Greater).map(|k| k.p_value)
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_p = p_values.iter().sum::<f64>() / p_values.len() as f64;
        let second_stage_p = ks_two_sample(&p_values, &[mean_p], Alternative::Greater)?.p_value;
        entries.push(BatteryEntry {
            hypothesis: h,
            p_values,
            mean_p,
            second_stage_p,
        });
    }
    Ok(Battery { entries })
}

/// Writes `case,mode,hypothesis,mean_p,second_stage_p` rows.
pub fn write_battery_csv<W: Write>(
    writer: W,
    rows: &[(String, String, &Battery)],
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["case", "mode", "hypothesis", "mean_p", "second_stage_p"])?;
    for (case, mode, battery) in rows {
        for e in &battery.entries {
            w.write_record([
                case.as_str(),
                mode.as_str(),
                e.hypothesis.label(),
                &format!("{:.6}", e.mean_p),
                &format!("{:.6}", e.second_stage_p),
            ])?;
        }
    }
    w.flush()
}

/// Seed-paired comparison of cases: entry `(i, j)` averages
/// `ks(case_i[s], case_j[s], Greater)` over seeds `s`. The diagonal is `None`.
pub fn cross_case_comparison(cases: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<Option<f64>>>> {
    let seeds = cases.first().map_or(0, Vec::len);
    if seeds == 0 {
        return Err(Error::EmptySample);
    }
    if let Some(bad) = cases.iter().find(|c| c.len() != seeds) {
        return Err(Error::Shape(format!(
            "cases have {} and {} runs; comparisons are seed-paired",
            seeds,
            bad.len()
        )));
    }
    let mut out = vec![vec![None; cases.len()]; cases.len()];
    for i in 0..cases.len() {
        for j in 0..cases.len() {
            if i == j {
                continue;
            }
            let mut total = 0.0;
            for s in 0..seeds {
                total += ks_two_sample(&cases[i][s], &cases[j][s], Alternative::Greater)?.p_value;
            }
            out[i][j] = Some(total / seeds as f64);
        }
    }
    Ok(out)
}

/// Renders a comparison matrix with `-` on the diagonal.
pub fn format_comparison(labels: &[String], matrix: &[Vec<Option<f64>>]) -> String {
    let mut s = String::from("case");
    for l in labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(matrix) {
        s.push_str(l);
        for v in row {
            s.push(',');
            match v {
                Some(p) => s.push_str(&format!("{p:.4}")),
                None => s.push('-'),
            }
        }
        s.push('\n');
    }
    s
}
