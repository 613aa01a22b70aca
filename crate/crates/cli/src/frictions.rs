//! Constant basis-point trading costs charged against turnover.

use olps_core::error::{Culprit, Error, Result};
use olps_core::learner::WealthTrack;

/// Scales each period's growth by `1 - cost_bps * 1e-4 * turnover_t` and
/// recompounds. `flat_turnover` replaces the per-period turnover.
pub fn apply_frictions(
    track: &WealthTrack,
    turnover: &[f64],
    cost_bps: f64,
    flat_turnover: Option<f64>,
) -> Result<WealthTrack> {
    if !(cost_bps >= 0.0 && cost_bps.is_finite()) {
        return Err(Error::Invalid(format!(
            "cost must be >= 0 bps, got {cost_bps}"
        )));
    }
    if flat_turnover.is_none() && turnover.len() != track.n_periods() {
        return Err(Error::Shape(format!(
            "{} turnover values for {} periods",
            turnover.len(),
            track.n_periods()
        )));
    }
    let rate = cost_bps * 1e-4;
    let mut out = track.clone();
    let mut wealth = 1.0;
    for t in 0..track.n_periods() {
        let tv = flat_turnover.unwrap_or_else(|| turnover[t]);
        let net = track.growth(t) * (1.0 - rate * tv);
        if !(net > 0.0) {
            return Err(Error::Bankruptcy {
                culprit: Culprit::Portfolio,
                period: t,
                growth: net,
            });
        }
        wealth *= net;
        out.portfolio[t] = wealth;
    }
    Ok(out)
}
