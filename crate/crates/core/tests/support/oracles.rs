//! Independent reference implementations used by the oracle tests and the
//! acceptance suite. Nothing here calls into the code paths it checks.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use olps_core::fundsep::{self, MomentEstimate};
use olps_core::patterns::{
    fallback_control, find_matches, AgentGenerator, AgentGrid, AgentSpec, ClusterMap, Distance,
    MatchConfig, MatchRule, PartitionKind, PatternGenerator,
};
use olps_core::{PortfolioMode, PriceRelativeMatrix, SolverConfig};
use rand_mt::Mt;

/// Uniform draws on top of MT19937.
pub struct Uniform(Mt);

impl Uniform {
    pub fn new(seed: u32) -> Self {
        Self(Mt::new(seed))
    }

    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Integer in `lo..=hi`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.0.next_u32() as usize) % (hi - lo + 1)
    }
}

// ---------------------------------------------------------------------------
// Fund separation

/// One random mean-variance problem.
pub struct Instance {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub gamma: f64,
}

pub fn random_instance(rng: &mut Uniform, m: usize) -> Instance {
    let a = DMatrix::from_fn(m, m, |_, _| rng.range(-1.0, 1.0));
    let sigma = &a * a.transpose() + DMatrix::identity(m, m) * 0.1;
    let mu = DVector::from_fn(m, |_, _| rng.range(-0.5, 0.5));
    let gamma = rng.range(0.5, 5.0);
    Instance { mu, sigma, gamma }
}

fn objective(inst: &Instance, w: &DVector<f64>) -> f64 {
    w.dot(&inst.mu) - 0.5 * inst.gamma * (w.transpose() * &inst.sigma * w)[(0, 0)]
}

/// Budget-feasible point from free coordinates: the last weight absorbs the rest.
fn embed(z: &[f64]) -> DVector<f64> {
    let m = z.len() + 1;
    let rest = 1.0 - z.iter().sum::<f64>();
    DVector::from_fn(m, |i, _| if i < m - 1 { z[i] } else { rest })
}

const BRACKET: f64 = 1e4;
const STEP: f64 = 1e-3;

/// Maximiser of a concave function on `[-BRACKET, BRACKET]` by bisection on
/// the sign of a central difference.
fn argmax_concave(f: &dyn Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-BRACKET, BRACKET);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid + STEP) > f(mid - STEP) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * mid.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Numeric maximiser of `w'mu - gamma/2 w'Sigma w` subject to `1'w = 1`, for two or three assets.
pub fn numeric_optimum(inst: &Instance) -> DVector<f64> {
    match inst.mu.len() {
        2 => {
            let z = argmax_concave(&|z| objective(inst, &embed(&[z])));
            embed(&[z])
        }
        3 => {
            let inner = |z1: f64| argmax_concave(&|z2| objective(inst, &embed(&[z1, z2])));
            let z1 = argmax_concave(&|z1| objective(inst, &embed(&[z1, inner(z1)])));
            embed(&[z1, inner(z1)])
        }
        m => panic!("numeric oracle handles 2 or 3 assets, got {m}"),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FundsepReport {
    pub instances: usize,
    /// Largest per-component gap between analytic and numeric optima.
    pub max_weight_error: f64,
    /// Largest entry of `mu - gamma Sigma w - lambda 1` at the analytic optimum.
    pub max_stationarity: f64,
}

/// Compares the closed-form optimum and multiplier with the numeric oracle.
pub fn fundsep_oracle(instances: usize, seed: u32) -> FundsepReport {
    let mut rng = Uniform::new(seed);
    let mut report = FundsepReport {
        instances,
        ..Default::default()
    };
    for i in 0..instances {
        let inst = random_instance(&mut rng, 2 + i % 2);
        let analytic = DVector::from_vec(
            fundsep::mutual_fund_weights(&inst.mu, &inst.sigma, inst.gamma)
                .expect("well-posed instance")
                .into_inner(),
        );
        let lambda = fundsep::lagrange_multiplier(&inst.mu, &inst.sigma, inst.gamma)
            .expect("well-posed instance");
        let numeric = numeric_optimum(&inst);
        let gap = (&analytic - &numeric).amax();
        let residual = (&inst.mu - &inst.sigma * &analytic * inst.gamma)
            .add_scalar(-lambda)
            .amax();
        report.max_weight_error = report.max_weight_error.max(gap);
        report.max_stationarity = report.max_stationarity.max(residual);
    }
    report
}

// ---------------------------------------------------------------------------
// Matching

/// A random history. Odd seeds draw from a dyadic grid so distances tie exactly.
pub fn random_history(rng: &mut Uniform, dyadic: bool, t: usize, m: usize) -> PriceRelativeMatrix {
    let values = (0..t * m)
        .map(|_| {
            if dyadic {
                1.0 + (rng.int(0, 8) as f64 - 4.0) / 64.0
            } else {
                rng.range(0.9, 1.1)
            }
        })
        .collect();
    PriceRelativeMatrix::from_flat(values, t, PriceRelativeMatrix::default_tickers(m))
        .expect("valid history")
}

/// Per-asset distance of the window ending at `e` to the one ending at `t-1`.
fn brute_distance(
    x: &PriceRelativeMatrix,
    t: usize,
    e: usize,
    k: usize,
    cluster: &[usize],
    d: Distance,
) -> Vec<f64> {
    let diff = |j: usize, a: usize| x.get(t - k + j, a) - x.get(e + 1 - k + j, a);
    if k == 1 || d == Distance::Frobenius {
        let total: f64 = (0..k)
            .rev()
            .map(|j| cluster.iter().map(|&a| diff(j, a).powi(2)).sum::<f64>())
            .sum();
        vec![total.sqrt(); cluster.len()]
    } else {
        cluster
            .iter()
            .map(|&a| {
                let col = (0..k).rev().map(|j| diff(j, a));
                match d {
                    Distance::L1 => col.map(f64::abs).sum(),
                    _ => col.map(|v| v * v).sum::<f64>().sqrt(),
                }
            })
            .collect()
    }
}

fn brute_count(rule: MatchRule, ell: usize, max_ell: usize, t: usize) -> usize {
    match rule {
        MatchRule::Trivial => ell,
        MatchRule::GyorfiNn => {
            let p = if max_ell == 1 {
                0.02
            } else {
                0.02 + 0.5 * (ell - 1) as f64 / (max_ell - 1) as f64
            };
            (p * t as f64).floor() as usize
        }
    }
}

/// Time masks built from their definition, one period at a time.
fn brute_masks(t: usize, kind: PartitionKind, ell: usize) -> Option<Vec<Vec<bool>>> {
    match kind {
        PartitionKind::Trivial => Some(vec![vec![true; t]]),
        PartitionKind::Overlapping => Some(
            (1..=ell)
                .map(|i| {
                    let mut len = i * t / ell;
                    if len * ell < i * t {
                        len += 1;
                    }
                    (0..t).map(|p| t - p <= len).collect()
                })
                .collect(),
        ),
        PartitionKind::Exclusive => {
            if ell > t {
                return None;
            }
            let mut owner = Vec::with_capacity(t);
            for block in 0..ell {
                let len = t / ell + usize::from(block < t % ell);
                owner.extend(std::iter::repeat_n(block, len));
            }
            Some(
                (0..ell)
                    .map(|b| owner.iter().map(|&o| o == b).collect())
                    .collect(),
            )
        }
    }
}

/// Exhaustive selection: a candidate is kept when fewer than `want`
/// candidates beat it on `(score, index)`.
fn brute_pick(
    scores: &[(usize, f64)],
    kind: PartitionKind,
    rule: MatchRule,
    spec: &AgentSpec,
    max_ell: usize,
    t: usize,
) -> Option<Vec<usize>> {
    let beats = |a: &(usize, f64), b: &(usize, f64)| a.1 < b.1 || (a.1 == b.1 && a.0 < b.0);
    match kind {
        PartitionKind::Trivial => {
            let want = brute_count(rule, spec.ell, max_ell, t)
                .max(1)
                .min(scores.len());
            let mut ranked: Vec<(usize, usize)> = scores
                .iter()
                .map(|c| (scores.iter().filter(|o| beats(o, c)).count(), c.0))
                .filter(|&(rank, _)| rank < want)
                .collect();
            ranked.sort();
            Some(ranked.into_iter().map(|(_, e)| e).collect())
        }
        _ => {
            let masks = brute_masks(t, kind, spec.ell)?;
            Some(
                masks
                    .iter()
                    .filter_map(|mask| {
                        let inside: Vec<&(usize, f64)> =
                            scores.iter().filter(|c| mask[c.0]).collect();
                        inside
                            .iter()
                            .find(|c| inside.iter().all(|o| !beats(o, c)))
                            .map(|c| c.0)
                    })
                    .collect(),
            )
        }
    }
}

/// Expected match times per cluster asset, `None` when no window fits, or
/// `Some(None)` when the partition itself is infeasible.
pub fn brute_matches(
    x: &PriceRelativeMatrix,
    t: usize,
    cluster: &[usize],
    spec: &AgentSpec,
    max_ell: usize,
    cfg: &MatchConfig,
) -> Option<Option<Vec<Vec<usize>>>> {
    if t < spec.k + spec.tau {
        return None;
    }
    let ends: Vec<usize> = (spec.k - 1..=t - 1 - spec.tau).collect();
    let dists: Vec<Vec<f64>> = ends
        .iter()
        .map(|&e| brute_distance(x, t, e, spec.k, cluster, cfg.distance))
        .collect();
    let pick = |col: Option<usize>| {
        let scores: Vec<(usize, f64)> = ends
            .iter()
            .zip(&dists)
            .map(|(&e, d)| (e, col.map_or_else(|| d.iter().sum(), |c| d[c])))
            .collect();
        brute_pick(&scores, cfg.partition, cfg.rule, spec, max_ell, t)
    };
    if cfg.independent_columns {
        let cols: Option<Vec<Vec<usize>>> = (0..cluster.len()).map(|c| pick(Some(c))).collect();
        Some(cols)
    } else {
        Some(pick(None).map(|times| vec![times; cluster.len()]))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MatchingReport {
    pub histories: usize,
    pub comparisons: usize,
    pub mismatches: Vec<String>,
}

/// Every `(k, ell)` with `K = 5`, `L = 10`, every rule, partition, distance
/// and column mode, compared against the exhaustive search.
pub fn matching_oracle(histories: usize, seed: u32) -> MatchingReport {
    const MAX_K: usize = 5;
    const MAX_ELL: usize = 10;
    let mut rng = Uniform::new(seed);
    let mut report = MatchingReport {
        histories,
        ..Default::default()
    };
    for h in 0..histories {
        let m = rng.int(1, 3);
        let t = rng.int(2, 50);
        let x = random_history(&mut rng, h % 2 == 1, t, m);
        let cluster: Vec<usize> = (0..m).collect();
        for rule in [MatchRule::Trivial, MatchRule::GyorfiNn] {
            for partition in [
                PartitionKind::Trivial,
                PartitionKind::Overlapping,
                PartitionKind::Exclusive,
            ] {
                for distance in [Distance::L1, Distance::L2, Distance::Frobenius] {
                    for independent_columns in [false, true] {
                        let cfg = MatchConfig {
                            rule,
                            partition,
                            distance,
                            independent_columns,
                        };
                        for k in 1..=MAX_K {
                            for ell in 1..=MAX_ELL {
                                let spec = AgentSpec {
                                    k,
                                    ell,
                                    cluster: 0,
                                    tau: 1,
                                };
                                let got = find_matches(&x, t, &cluster, &spec, MAX_ELL, &cfg);
                                let want = brute_matches(&x, t, &cluster, &spec, MAX_ELL, &cfg);
                                report.comparisons += 1;
                                let ok = match (&got, &want) {
                                    (Ok(None), None) => true,
                                    (Err(_), Some(None)) => true,
                                    (Ok(Some(r)), Some(Some(times))) => {
                                        &r.times == times
                                            && tuple_matches(&x, r, &cluster, spec.tau)
                                    }
                                    // A partition whose masks hold no candidates yields nothing.
                                    (Ok(None), Some(Some(times))) => {
                                        times.iter().any(Vec::is_empty)
                                    }
                                    _ => false,
                                };
                                if !ok {
                                    report.mismatches.push(format!(
                                        "history {h} (t={t}, m={m}) {cfg:?} k={k} ell={ell}: got {:?}, want {want:?}",
                                        got.map(|r| r.map(|r| r.times))
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    report
}

fn tuple_matches(
    x: &PriceRelativeMatrix,
    r: &olps_core::patterns::MatchResult,
    cluster: &[usize],
    tau: usize,
) -> bool {
    let n = r.times.iter().map(Vec::len).min().unwrap_or(0);
    let expected: Vec<f64> = (0..n)
        .flat_map(|i| cluster.iter().enumerate().map(move |(c, &a)| (c, a, i)))
        .map(|(c, a, i)| x.get(r.times[c][i] + tau, a))
        .collect();
    expected == r.agent_tuple
}

/// Agent controls assembled agent by agent from `find_matches`, for
/// comparison with the generator's shared-ranking path.
pub fn reference_controls(
    x: &PriceRelativeMatrix,
    t: usize,
    grid: &AgentGrid,
    clusters: &ClusterMap,
    mode: PortfolioMode,
    cfg: &MatchConfig,
) -> Vec<Vec<f64>> {
    grid.specs()
        .iter()
        .map(|spec| {
            let cluster = clusters.assets(spec.cluster);
            let h = match find_matches(x, t, cluster, spec, grid.max_ell(), cfg) {
                Ok(Some(r)) => {
                    let moments = MomentEstimate::from_relatives(r.rows(), r.n_assets);
                    fundsep::agent_controls(&moments, mode, &SolverConfig::default())
                        .unwrap_or_else(|_| fallback_control(mode, cluster.len()))
                }
                _ => fallback_control(mode, cluster.len()),
            };
            let mut row = vec![0.0; x.n_assets()];
            for (&a, &w) in cluster.iter().zip(h.weights()) {
                row[a] = w;
            }
            row
        })
        .collect()
}

/// Count of `(history, t, mode)` cases where the generator differs from
/// [`reference_controls`] in any bit.
pub fn fast_path_mismatches(histories: usize, seed: u32) -> (usize, usize) {
    let mut rng = Uniform::new(seed);
    let (mut cases, mut bad) = (0, 0);
    for h in 0..histories {
        let m = rng.int(1, 4);
        let t_max = rng.int(2, 40);
        let x = random_history(&mut rng, h % 2 == 1, t_max, m);
        let clusters = match m {
            3 => ClusterMap::new(vec![vec![0, 2], vec![1]], vec!["a".into(), "b".into()], m),
            4 => ClusterMap::new(
                vec![vec![0, 2], vec![1, 3]],
                vec!["a".into(), "b".into()],
                m,
            ),
            _ => Ok(ClusterMap::single(m)),
        }
        .expect("valid clusters");
        let grid = AgentGrid::new(4, 6, clusters.len(), &[1, 2]).expect("valid grid");
        for mode in [PortfolioMode::Absolute, PortfolioMode::Active] {
            for rule in [MatchRule::Trivial, MatchRule::GyorfiNn] {
                let cfg = MatchConfig {
                    rule,
                    ..MatchConfig::default()
                };
                let mut g = PatternGenerator::new(
                    grid.clone(),
                    clusters.clone(),
                    m,
                    mode,
                    cfg,
                    SolverConfig::default(),
                )
                .expect("valid generator");
                for t in 0..=t_max {
                    cases += 1;
                    let got = g.generate(&x, t);
                    let want = reference_controls(&x, t, &grid, &clusters, mode, &cfg);
                    if got.rows().zip(&want).any(|(a, b)| a != b.as_slice()) {
                        bad += 1;
                    }
                }
            }
        }
    }
    (cases, bad)
}
