//! Reference strategies: Cover's universal portfolio, the best stock in
//! hindsight, and best-agent extraction.

use crate::error::{Error, Result};
use crate::learner::WealthTrack;
use crate::relatives::PriceRelativeMatrix;

/// Default simplex resolution for the universal portfolio.
pub const DEFAULT_RESOLUTION: usize = 20;
/// Largest grid the universal portfolio will enumerate.
pub const MAX_GRID_POINTS: u128 = 5_000_000;

/// All weight vectors with entries `n_i / Q`, `sum n_i = Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimplexGrid {
    pub resolution: usize,
    pub n_assets: usize,
}

impl SimplexGrid {
    pub fn new(resolution: usize, n_assets: usize) -> Result<Self> {
        if resolution == 0 || n_assets == 0 {
            return Err(Error::Invalid(format!(
                "simplex grid needs Q >= 1 and M >= 1 (Q={resolution}, M={n_assets})"
            )));
        }
        let grid = Self {
            resolution,
            n_assets,
        };
        let points = grid.n_points();
        if points > MAX_GRID_POINTS {
            return Err(Error::GridTooLarge { points });
        }
        Ok(grid)
    }

    /// `C(Q + M - 1, M - 1)`, saturating.
    pub fn n_points(&self) -> u128 {
        let n = (self.resolution + self.n_assets - 1) as u128;
        let r = (self.n_assets - 1) as u128;
        let mut c: u128 = 1;
        for i in 0..r {
            c = match c.checked_mul(n - i) {
                Some(v) => v / (i + 1),
                None => return u128::MAX,
            };
        }
        c
    }

    /// Grid points as a flat row-major `points x M` array, in lexicographic
    /// order of the integer compositions.
    pub fn points(&self) -> Vec<f64> {
        let m = self.n_assets;
        let q = self.resolution;
        let mut out = Vec::with_capacity(self.n_points() as usize * m);
        let mut counts = vec![0usize; m];
        fn fill(idx: usize, left: usize, counts: &mut [usize], q: usize, out: &mut Vec<f64>) {
            if idx + 1 == counts.len() {
                counts[idx] = left;
                out.extend(counts.iter().map(|&c| c as f64 / q as f64));
                return;
            }
            for c in 0..=left {
                counts[idx] = c;
                fill(idx + 1, left - c, counts, q, out);
            }
        }
        fill(0, q, &mut counts, q, &mut out);
        out
    }
}

/// Cover's universal portfolio approximated on a simplex grid with a uniform prior.
///
/// Each period holds the wealth-weighted average of all grid portfolios.
/// Grid wealth is tracked in logs so long histories do not overflow.
pub fn universal_portfolio(x: &PriceRelativeMatrix, resolution: usize) -> Result<WealthTrack> {
    let m = x.n_assets();
    let grid = SimplexGrid::new(resolution, m)?;
    let points = grid.points();
    let n_points = points.len() / m;
    let mut log_wealth = vec![0.0f64; n_points];
    let mut weights = vec![0.0f64; n_points];
    let mut growth = Vec::with_capacity(x.n_periods());
    let mut controls = Vec::with_capacity(x.n_periods() * m);
    let mut b = vec![0.0; m];
    for row in x.rows() {
        let top = log_wealth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (w, lw) in weights.iter_mut().zip(&log_wealth) {
            *w = (lw - top).exp();
            total += *w;
        }
        b.iter_mut().for_each(|v| *v = 0.0);
        for (p, w) in points.chunks_exact(m).zip(&weights) {
            for (bm, pm) in b.iter_mut().zip(p) {
                *bm += w * pm;
            }
        }
        b.iter_mut().for_each(|v| *v /= total);
        growth.push(b.iter().zip(row).map(|(w, r)| w * r).sum::<f64>());
        controls.extend_from_slice(&b);
        for (p, lw) in points.chunks_exact(m).zip(log_wealth.iter_mut()) {
            *lw += p.iter().zip(row).map(|(w, r)| w * r).sum::<f64>().ln();
        }
    }
    Ok(WealthTrack::from_growth(&growth, controls, m))
}

/// Wealth of a constant rebalanced portfolio.
pub fn constant_rebalanced(x: &PriceRelativeMatrix, b: &[f64]) -> Result<WealthTrack> {
    if b.len() != x.n_assets() {
        return Err(Error::Shape(format!(
            "{} weights for {} assets",
            b.len(),
            x.n_assets()
        )));
    }
    let growth: Vec<f64> = x
        .rows()
        .map(|row| b.iter().zip(row).map(|(w, r)| w * r).sum())
        .collect();
    let controls = b.repeat(x.n_periods());
    Ok(WealthTrack::from_growth(&growth, controls, b.len()))
}

/// Buy-and-hold of the asset with the largest terminal wealth, lowest index on ties.
pub fn best_stock(x: &PriceRelativeMatrix) -> Result<(usize, WealthTrack)> {
    if x.n_assets() == 0 || x.n_periods() == 0 {
        return Err(Error::EmptySample);
    }
    let terminal = x.terminal_asset_wealth();
    let best = argmax(&terminal).unwrap_or(0);
    let growth: Vec<f64> = x.rows().map(|row| row[best]).collect();
    let mut weights = vec![0.0; x.n_assets()];
    weights[best] = 1.0;
    let controls = weights.repeat(x.n_periods());
    Ok((
        best,
        WealthTrack::from_growth(&growth, controls, x.n_assets()),
    ))
}

/// Agent with the largest terminal wealth, lowest index on ties.
pub fn best_agent(track: &WealthTrack) -> Option<(usize, f64)> {
    if track.n_agents() == 0 {
        return None;
    }
    let terminal = track.agent_terminal();
    argmax(&terminal).map(|n| (n, terminal[n]))
}

fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}
