//! Pattern-matching agents.
//!
//! At each period an agent compares the most recent `k` rows of its cluster's
//! relatives with every earlier `k`-row window, keeps the closest ones, and
//! looks `tau` periods past each to collect an "agent tuple" of outcomes.
//! The sample moments of that tuple feed the fund-separation solver.
//!
//! Time indices in this module are 0-based rows of the relative matrix. A
//! history of length `t` is rows `0..t`. A candidate is identified by the row
//! `e` that ends its window; it covers `e+1-k..=e` and its outcome is row
//! `e + tau`, so admissible ends satisfy `k - 1 <= e <= t - 1 - tau`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fundsep::{
    self, ControlVector, MomentAccumulator, MomentEstimate, PortfolioMode, SolverConfig,
};
use crate::relatives::PriceRelativeMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentSpec {
    /// Window length.
    pub k: usize,
    /// Match-count or partition-count index, 1-based.
    pub ell: usize,
    /// Index into the [`ClusterMap`].
    pub cluster: usize,
    /// Look-ahead horizon.
    pub tau: usize,
}

/// The full `(tau, cluster, k, ell)` grid, `ell` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrid {
    specs: Vec<AgentSpec>,
    max_ell: usize,
}

impl AgentGrid {
    pub fn new(max_k: usize, max_ell: usize, n_clusters: usize, taus: &[usize]) -> Result<Self> {
        if max_k == 0 || max_ell == 0 || n_clusters == 0 || taus.is_empty() {
            return Err(Error::Invalid(format!(
                "agent grid needs K, L, W and tau all non-empty (K={max_k}, L={max_ell}, W={n_clusters}, taus={taus:?})"
            )));
        }
        if taus.contains(&0) {
            return Err(Error::Invalid(
                "look-ahead horizon must be at least 1".into(),
            ));
        }
        let mut specs = Vec::with_capacity(taus.len() * n_clusters * max_k * max_ell);
        for &tau in taus {
            for cluster in 0..n_clusters {
                for k in 1..=max_k {
                    for ell in 1..=max_ell {
                        specs.push(AgentSpec {
                            k,
                            ell,
                            cluster,
                            tau,
                        });
                    }
                }
            }
        }
        Ok(Self { specs, max_ell })
    }

    pub fn specs(&self) -> &[AgentSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// `L`, the upper end of the `ell` range.
    pub fn max_ell(&self) -> usize {
        self.max_ell
    }
}

/// Disjoint or overlapping groups of assets that agents trade within.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    clusters: Vec<Vec<usize>>,
    names: Vec<String>,
}

impl ClusterMap {
    pub fn new(clusters: Vec<Vec<usize>>, names: Vec<String>, n_assets: usize) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::Invalid("cluster map is empty".into()));
        }
        if clusters.len() != names.len() {
            return Err(Error::Shape(format!(
                "{} clusters but {} names",
                clusters.len(),
                names.len()
            )));
        }
        for (c, name) in clusters.iter().zip(&names) {
            if c.is_empty() {
                return Err(Error::Invalid(format!("cluster {name} has no assets")));
            }
            if let Some(bad) = c.iter().find(|&&m| m >= n_assets) {
                return Err(Error::Invalid(format!(
                    "cluster {name} refers to asset {bad}, but there are only {n_assets}"
                )));
            }
        }
        Ok(Self { clusters, names })
    }

    /// One cluster holding every asset.
    pub fn single(n_assets: usize) -> Self {
        Self {
            clusters: vec![(0..n_assets).collect()],
            names: vec!["all".into()],
        }
    }

    /// Builds clusters from ticker lists, resolving names against `x`.
    pub fn from_tickers(
        x: &PriceRelativeMatrix,
        groups: &BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let mut clusters = Vec::with_capacity(groups.len());
        let mut names = Vec::with_capacity(groups.len());
        for (name, tickers) in groups {
            let cols = tickers
                .iter()
                .map(|t| x.column_of(t))
                .collect::<Result<Vec<_>>>()?;
            clusters.push(cols);
            names.push(name.clone());
        }
        Self::new(clusters, names, x.n_assets())
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn assets(&self, w: usize) -> &[usize] {
        &self.clusters[w]
    }

    pub fn name(&self, w: usize) -> &str {
        &self.names[w]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[default]
    Trivial,
    Overlapping,
    Exclusive,
}

/// Boolean time-membership masks over a history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub masks: Vec<Vec<bool>>,
}

/// Masks over a history of length `t`.
///
/// Overlapping mask `i` (1-based) covers the last `ceil(i t / ell)` periods;
/// exclusive masks are `ell` contiguous blocks, earlier blocks taking the
/// remainder when `t` is not a multiple of `ell`.
pub fn make_partitions(t: usize, kind: PartitionKind, ell: usize) -> Result<Partition> {
    if t == 0 || ell == 0 {
        return Err(Error::Invalid(format!(
            "partition needs t >= 1 and ell >= 1 (t={t}, ell={ell})"
        )));
    }
    let masks = match kind {
        PartitionKind::Trivial => vec![vec![true; t]],
        PartitionKind::Overlapping => (1..=ell)
            .map(|i| {
                let len = (i * t).div_ceil(ell);
                (0..t).map(|p| p >= t - len).collect()
            })
            .collect(),
        PartitionKind::Exclusive => {
            if ell > t {
                return Err(Error::Invalid(format!(
                    "cannot split {t} periods into {ell} exclusive blocks"
                )));
            }
            let base = t / ell;
            let extra = t % ell;
            let mut start = 0;
            (0..ell)
                .map(|i| {
                    let len = base + usize::from(i < extra);
                    let mask = (0..t).map(|p| p >= start && p < start + len).collect();
                    start += len;
                    mask
                })
                .collect()
        }
    };
    Ok(Partition { masks })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// `ell` matches for agent `ell`.
    Trivial,
    /// `floor(p_ell t)` matches with `p_ell = 0.02 + 0.5 (ell-1)/(L-1)`.
    #[default]
    GyorfiNn,
}

/// Per-asset window distance for `k > 1`. Single-row windows always use the
/// Euclidean norm over the assets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `sum_k |eps_mk|` per asset.
    #[default]
    L1,
    /// `sqrt(sum_k eps_mk^2)` per asset.
    L2,
    /// Euclidean norm of the whole window, broadcast to every asset.
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub rule: MatchRule,
    pub partition: PartitionKind,
    pub distance: Distance,
    /// Choose match times separately for every asset.
    pub independent_columns: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            rule: MatchRule::GyorfiNn,
            partition: PartitionKind::Trivial,
            distance: Distance::L1,
            independent_columns: false,
        }
    }
}

/// Running per-asset sums for one candidate window, one lag at a time from the
/// most recent row backwards.
#[derive(Debug, Clone, Copy, Default)]
struct LagSums {
    abs: f64,
    sq: f64,
}

fn add_lag(acc: &mut LagSums, diff: f64) {
    acc.abs += diff.abs();
    acc.sq += diff * diff;
}

/// Per-asset distances from accumulated sums. `k == 1` is the Euclidean
/// norm over all assets, broadcast.
fn finish_distance(k: usize, distance: Distance, sums: &[LagSums], out: &mut [f64]) {
    if k == 1 || distance == Distance::Frobenius {
        let norm = sums.iter().map(|s| s.sq).sum::<f64>().sqrt();
        out.iter_mut().for_each(|d| *d = norm);
    } else if distance == Distance::L1 {
        out.iter_mut().zip(sums).for_each(|(d, s)| *d = s.abs);
    } else {
        out.iter_mut().zip(sums).for_each(|(d, s)| *d = s.sq.sqrt());
    }
}

/// Distance between two `k x m` windows stored row-major, oldest row first.
pub fn tuple_distance(
    query: &[f64],
    candidate: &[f64],
    k: usize,
    m: usize,
    distance: Distance,
) -> Result<Vec<f64>> {
    if k == 0 || m == 0 || query.len() != k * m || candidate.len() != k * m {
        return Err(Error::Shape(format!(
            "windows of {} and {} values for k={k}, m={m}",
            query.len(),
            candidate.len()
        )));
    }
    let mut sums = vec![LagSums::default(); m];
    for lag in 0..k {
        let row = k - 1 - lag;
        for (a, s) in sums.iter_mut().enumerate() {
            add_lag(s, query[row * m + a] - candidate[row * m + a]);
        }
    }
    let mut out = vec![0.0; m];
    finish_distance(k, distance, &sums, &mut out);
    Ok(out)
}

/// Number of nearest neighbours for agent `ell` of `max_ell` with history `t`,
/// before clamping to the admissible candidates.
pub fn match_count(rule: MatchRule, ell: usize, max_ell: usize, t: usize) -> usize {
    match rule {
        MatchRule::Trivial => ell,
        MatchRule::GyorfiNn => {
            let frac = if max_ell > 1 {
                (ell - 1) as f64 / (max_ell - 1) as f64
            } else {
                0.0
            };
            let p = 0.02 + 0.5 * frac;
            (p * t as f64).floor() as usize
        }
    }
}

/// Matched window ends and the outcome rows they point at.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Window-end rows, one list per cluster asset (identical lists unless
    /// columns are matched independently).
    pub times: Vec<Vec<usize>>,
    /// Outcome relatives, row-major `n x c` where `c` is the cluster size.
    pub agent_tuple: Vec<f64>,
    pub n_assets: usize,
}

impl MatchResult {
    pub fn n_matches(&self) -> usize {
        self.agent_tuple.len() / self.n_assets.max(1)
    }

    /// Shared match times (the first column's when matched independently).
    pub fn shared_times(&self) -> &[usize] {
        &self.times[0]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.agent_tuple.chunks_exact(self.n_assets.max(1))
    }
}

fn candidate_order(scores: &[f64], first_end: usize) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        scores[a - first_end]
            .total_cmp(&scores[b - first_end])
            .then(a.cmp(&b))
    }
}

/// Nearest-neighbour matching for one agent against rows `0..t` of `x`.
///
/// Returns `None` when no candidate window fits in the history.
pub fn find_matches(
    x: &PriceRelativeMatrix,
    t: usize,
    cluster: &[usize],
    spec: &AgentSpec,
    max_ell: usize,
    config: &MatchConfig,
) -> Result<Option<MatchResult>> {
    let AgentSpec { k, ell, tau, .. } = *spec;
    if k == 0 || tau == 0 || ell == 0 {
        return Err(Error::Invalid(format!("bad agent spec {spec:?}")));
    }
    let t = t.min(x.n_periods());
    if t < k + tau {
        return Ok(None);
    }
    let c = cluster.len();
    let first_end = k - 1;
    let last_end = t - 1 - tau;
    let n_cand = last_end - first_end + 1;

    // Per-asset distances for every candidate, flat `n_cand x c`.
    let mut dist = vec![0.0; n_cand * c];
    let mut sums = vec![LagSums::default(); c];
    for (i, e) in (first_end..=last_end).enumerate() {
        sums.iter_mut().for_each(|s| *s = LagSums::default());
        for lag in 0..k {
            let q = x.row(t - 1 - lag);
            let r = x.row(e - lag);
            for (s, &a) in sums.iter_mut().zip(cluster) {
                add_lag(s, q[a] - r[a]);
            }
        }
        finish_distance(k, config.distance, &sums, &mut dist[i * c..(i + 1) * c]);
    }

    let pick = |scores: &[f64]| -> Result<Vec<usize>> {
        let mut ends: Vec<usize> = (first_end..=last_end).collect();
        let order = candidate_order(scores, first_end);
        match config.partition {
            PartitionKind::Trivial => {
                let want = match_count(config.rule, ell, max_ell, t).clamp(1, n_cand);
                ends.sort_by(&order);
                ends.truncate(want);
                Ok(ends)
            }
            kind => {
                let partition = make_partitions(t, kind, ell)?;
                Ok(partition
                    .masks
                    .iter()
                    .filter_map(|mask| ends.iter().copied().filter(|&e| mask[e]).min_by(&order))
                    .collect())
            }
        }
    };

    let (times, agent_tuple) = if config.independent_columns {
        let mut per_col = Vec::with_capacity(c);
        for col in 0..c {
            let scores: Vec<f64> = (0..n_cand).map(|i| dist[i * c + col]).collect();
            per_col.push(pick(&scores)?);
        }
        let n = per_col.iter().map(Vec::len).min().unwrap_or(0);
        let mut tuple = Vec::with_capacity(n * c);
        for i in 0..n {
            for (col, &a) in cluster.iter().enumerate() {
                tuple.push(x.get(per_col[col][i] + tau, a));
            }
        }
        (per_col, tuple)
    } else {
        let scores: Vec<f64> = dist.chunks_exact(c).map(|d| d.iter().sum()).collect();
        let ends = pick(&scores)?;
        let mut tuple = Vec::with_capacity(ends.len() * c);
        for &e in &ends {
            let row = x.row(e + tau);
            tuple.extend(cluster.iter().map(|&a| row[a]));
        }
        (vec![ends; c], tuple)
    };
    if agent_tuple.is_empty() {
        return Ok(None);
    }
    Ok(Some(MatchResult {
        times,
        agent_tuple,
        n_assets: c,
    }))
}

/// Row-major `N x M` matrix of agent controls for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMatrix {
    values: Vec<f64>,
    n_assets: usize,
}

impl ControlMatrix {
    pub fn zeros(n_agents: usize, n_assets: usize) -> Self {
        Self {
            values: vec![0.0; n_agents * n_assets],
            n_assets,
        }
    }

    pub fn from_flat(values: Vec<f64>, n_assets: usize) -> Result<Self> {
        if n_assets == 0 || values.len() % n_assets != 0 {
            return Err(Error::Shape(format!(
                "{} controls for {n_assets} assets",
                values.len()
            )));
        }
        Ok(Self { values, n_assets })
    }

    pub fn n_agents(&self) -> usize {
        self.values.len() / self.n_assets.max(1)
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_assets..(n + 1) * self.n_assets]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.n_assets..(n + 1) * self.n_assets]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_assets.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }
}

/// Source of per-period agent controls for the learner.
pub trait AgentGenerator {
    fn n_agents(&self) -> usize;

    fn n_assets(&self) -> usize;

    /// Controls for period `t` (0-based row of `x`), using rows `0..t` only.
    fn generate(&mut self, x: &PriceRelativeMatrix, t: usize) -> ControlMatrix;

    /// Human-readable label for agent `n`.
    fn label(&self, n: usize) -> String {
        format!("agent{n}")
    }

    /// Fallback tallies, for generators that keep them.
    fn fallback_counts(&self) -> Option<FallbackCounts> {
        None
    }
}

/// How agents turn their agent tuple into controls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSolver {
    /// Closed-form fund separation.
    #[default]
    Analytic,
    /// Iterative log-optimal weights over the simplex (absolute mode only).
    NumericLogOptimal,
}

const LOG_OPTIMAL_TOL: f64 = 1e-8;
const LOG_OPTIMAL_MAX_ITER: usize = 100;

/// Counts of agents that fell back to the default control.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FallbackCounts {
    pub no_match: u64,
    pub solver_error: u64,
}

/// Fallback control over a cluster: uniform (absolute) or cash (active).
pub fn fallback_control(mode: PortfolioMode, cluster_size: usize) -> ControlVector {
    match mode {
        PortfolioMode::Absolute => ControlVector::uniform(cluster_size),
        PortfolioMode::Active => ControlVector::zeros(cluster_size),
    }
}

/// The nearest-neighbour agent population.
#[derive(Debug, Clone)]
pub struct PatternGenerator {
    grid: AgentGrid,
    clusters: ClusterMap,
    n_assets: usize,
    mode: PortfolioMode,
    matching: MatchConfig,
    solver: SolverConfig,
    control_solver: ControlSolver,
    fallbacks: FallbackCounts,
}

impl PatternGenerator {
    pub fn new(
        grid: AgentGrid,
        clusters: ClusterMap,
        n_assets: usize,
        mode: PortfolioMode,
        matching: MatchConfig,
        solver: SolverConfig,
    ) -> Result<Self> {
        if let Some(s) = grid.specs().iter().find(|s| s.cluster >= clusters.len()) {
            return Err(Error::Invalid(format!(
                "agent refers to cluster {} but only {} exist",
                s.cluster,
                clusters.len()
            )));
        }
        if let Some(bad) = (0..clusters.len())
            .flat_map(|w| clusters.assets(w))
            .find(|&&a| a >= n_assets)
        {
            return Err(Error::Invalid(format!("cluster asset {bad} out of range")));
        }
        Ok(Self {
            grid,
            clusters,
            n_assets,
            mode,
            matching,
            solver,
            control_solver: ControlSolver::Analytic,
            fallbacks: FallbackCounts::default(),
        })
    }

    pub fn with_control_solver(mut self, control_solver: ControlSolver) -> Result<Self> {
        if control_solver == ControlSolver::NumericLogOptimal && self.mode == PortfolioMode::Active
        {
            return Err(Error::Invalid(
                "the numeric log-optimal solver only supports absolute mode".into(),
            ));
        }
        self.control_solver = control_solver;
        Ok(self)
    }

    pub fn grid(&self) -> &AgentGrid {
        &self.grid
    }

    pub fn clusters(&self) -> &ClusterMap {
        &self.clusters
    }

    pub fn fallbacks(&self) -> FallbackCounts {
        self.fallbacks
    }

    /// Controls for one agent from its matched outcomes, restricted to its cluster.
    fn cluster_controls(
        &self,
        moments: Option<&MomentEstimate>,
        tuple: Option<&MatchResult>,
    ) -> Option<ControlVector> {
        match self.control_solver {
            ControlSolver::Analytic => {
                let moments = moments?;
                match fundsep::agent_controls(moments, self.mode, &self.solver) {
                    Ok(h) => Some(h),
                    Err(e) => {
                        debug!("agent solver failed: {e}");
                        None
                    }
                }
            }
            ControlSolver::NumericLogOptimal => {
                let tuple = tuple?;
                Some(fundsep::log_optimal_weights(
                    tuple.rows(),
                    tuple.n_assets,
                    LOG_OPTIMAL_TOL,
                    LOG_OPTIMAL_MAX_ITER,
                ))
            }
        }
    }

    fn write_agent(
        &mut self,
        out: &mut ControlMatrix,
        n: usize,
        cluster: &[usize],
        h: Option<ControlVector>,
    ) {
        let h = h.unwrap_or_else(|| {
            self.fallbacks.solver_error += 1;
            fallback_control(self.mode, cluster.len())
        });
        let row = out.row_mut(n);
        for (&a, &w) in cluster.iter().zip(h.weights()) {
            row[a] = w;
        }
    }

    fn write_fallback(&mut self, out: &mut ControlMatrix, n: usize, cluster: &[usize]) {
        self.fallbacks.no_match += 1;
        let h = fallback_control(self.mode, cluster.len());
        let row = out.row_mut(n);
        for (&a, &w) in cluster.iter().zip(h.weights()) {
            row[a] = w;
        }
    }

    /// Shared-column nearest-neighbour matching: candidates are ranked once
    /// per `(cluster, k, tau)` and agents differing only in `ell` take nested
    /// prefixes of that ranking, with moments accumulated along the way.
    fn generate_ranked(&mut self, x: &PriceRelativeMatrix, t: usize, out: &mut ControlMatrix) {
        let specs = self.grid.specs().to_vec();
        let max_ell = self.grid.max_ell();
        let mut start = 0;
        while start < specs.len() {
            let head = specs[start];
            let mut end = start;
            while end < specs.len()
                && (specs[end].cluster, specs[end].tau) == (head.cluster, head.tau)
            {
                end += 1;
            }
            self.generate_cluster_block(x, t, &specs[start..end], start, max_ell, out);
            start = end;
        }
    }

    fn generate_cluster_block(
        &mut self,
        x: &PriceRelativeMatrix,
        t: usize,
        specs: &[AgentSpec],
        offset: usize,
        max_ell: usize,
        out: &mut ControlMatrix,
    ) {
        let cluster = self.clusters.assets(specs[0].cluster).to_vec();
        let c = cluster.len();
        let tau = specs[0].tau;
        let max_k = specs.iter().map(|s| s.k).max().unwrap_or(0);
        // Candidate ends shared by all k: 0..=t-1-tau, later restricted to e >= k-1.
        let n_ends = (t + 1).saturating_sub(tau + 1);
        let mut sums = vec![LagSums::default(); n_ends * c];
        let mut dist = vec![0.0; c];
        let mut scores = Vec::with_capacity(n_ends);
        let mut order: Vec<usize> = Vec::with_capacity(n_ends);

        for k in 1..=max_k {
            let agents: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].k == k).collect();
            if t < k + tau {
                for &i in &agents {
                    self.write_fallback(out, offset + i, &cluster);
                }
                continue;
            }
            // Fold in lag k-1 for every candidate that can carry a k-window.
            let q = x.row(t - k);
            for e in (k - 1)..n_ends {
                let r = x.row(e + 1 - k);
                let s = &mut sums[e * c..(e + 1) * c];
                for (acc, &a) in s.iter_mut().zip(&cluster) {
                    add_lag(acc, q[a] - r[a]);
                }
            }
            if agents.is_empty() {
                continue;
            }
            let first_end = k - 1;
            let n_cand = n_ends - first_end;
            scores.clear();
            for e in first_end..n_ends {
                finish_distance(
                    k,
                    self.matching.distance,
                    &sums[e * c..(e + 1) * c],
                    &mut dist,
                );
                scores.push(dist.iter().sum::<f64>());
            }

            let wants: Vec<usize> = agents
                .iter()
                .map(|&i| {
                    match_count(self.matching.rule, specs[i].ell, max_ell, t).clamp(1, n_cand)
                })
                .collect();
            let deepest = wants.iter().copied().max().unwrap_or(1);
            order.clear();
            order.extend(first_end..n_ends);
            let cmp = candidate_order(&scores, first_end);
            if deepest < n_cand {
                order.select_nth_unstable_by(deepest - 1, &cmp);
                order.truncate(deepest);
            }
            order.sort_by(&cmp);

            // Agents sorted by how deep into the ranking they read.
            let mut by_depth: Vec<(usize, usize)> =
                wants.iter().copied().zip(agents.iter().copied()).collect();
            by_depth.sort();
            let numeric = self.control_solver == ControlSolver::NumericLogOptimal;
            let mut acc = MomentAccumulator::new(c);
            let mut tuple = Vec::new();
            let mut pushed = 0;
            let mut row_buf = vec![0.0; c];
            for (want, i) in by_depth {
                while pushed < want {
                    let row = x.row(order[pushed] + tau);
                    for (v, &a) in row_buf.iter_mut().zip(&cluster) {
                        *v = row[a];
                    }
                    if numeric {
                        tuple.extend_from_slice(&row_buf);
                    } else {
                        acc.push(&row_buf);
                    }
                    pushed += 1;
                }
                let h = if numeric {
                    let m = MatchResult {
                        times: Vec::new(),
                        agent_tuple: tuple.clone(),
                        n_assets: c,
                    };
                    self.cluster_controls(None, Some(&m))
                } else {
                    self.cluster_controls(Some(&acc.estimate()), None)
                };
                self.write_agent(out, offset + i, &cluster, h);
            }
        }
    }

    fn generate_general(&mut self, x: &PriceRelativeMatrix, t: usize, out: &mut ControlMatrix) {
        let max_ell = self.grid.max_ell();
        for n in 0..self.grid.len() {
            let spec = self.grid.specs()[n];
            let cluster = self.clusters.assets(spec.cluster).to_vec();
            match find_matches(x, t, &cluster, &spec, max_ell, &self.matching) {
                Ok(Some(m)) => {
                    let moments = MomentEstimate::from_relatives(m.rows(), m.n_assets);
                    let h = self.cluster_controls(Some(&moments), Some(&m));
                    self.write_agent(out, n, &cluster, h);
                }
                Ok(None) => self.write_fallback(out, n, &cluster),
                Err(e) => {
                    debug!("agent {n} matching failed at t={t}: {e}");
                    self.write_fallback(out, n, &cluster);
                }
            }
        }
    }
}

impl AgentGenerator for PatternGenerator {
    fn n_agents(&self) -> usize {
        self.grid.len()
    }

    fn n_assets(&self) -> usize {
        self.n_assets
    }

    fn generate(&mut self, x: &PriceRelativeMatrix, t: usize) -> ControlMatrix {
        let t = t.min(x.n_periods());
        let mut out = ControlMatrix::zeros(self.grid.len(), self.n_assets);
        let ranked =
            self.matching.partition == PartitionKind::Trivial && !self.matching.independent_columns;
        if ranked {
            self.generate_ranked(x, t, &mut out);
        } else {
            self.generate_general(x, t, &mut out);
        }
        out
    }

    fn label(&self, n: usize) -> String {
        let s = self.grid.specs()[n];
        format!(
            "k{}_l{}_{}_tau{}",
            s.k,
            s.ell,
            self.clusters.name(s.cluster),
            s.tau
        )
    }

    fn fallback_counts(&self) -> Option<FallbackCounts> {
        Some(self.fallbacks())
    }
}

/// Controls that trade against the best constant rebalanced portfolio of a
/// short window: the fund-separation solution with the sample mean negated.
pub fn anti_bcrp_controls(
    window: &[&[f64]],
    mode: PortfolioMode,
    solver: &SolverConfig,
) -> Result<ControlVector> {
    let first = window.first().ok_or(Error::EmptySample)?;
    let mut moments = MomentEstimate::from_relatives(window.iter().copied(), first.len());
    moments.mu.neg_mut();
    fundsep::agent_controls(&moments, mode, solver)
}

/// Agents over `(cluster, k)` holding anti-BCRP controls on the last `k` rows.
#[derive(Debug, Clone)]
pub struct AntiBcrpGenerator {
    specs: Vec<(usize, usize)>,
    clusters: ClusterMap,
    n_assets: usize,
    mode: PortfolioMode,
    solver: SolverConfig,
}

impl AntiBcrpGenerator {
    pub fn new(
        max_k: usize,
        clusters: ClusterMap,
        n_assets: usize,
        mode: PortfolioMode,
        solver: SolverConfig,
    ) -> Result<Self> {
        if max_k == 0 {
            return Err(Error::Invalid("anti-BCRP agents need K >= 1".into()));
        }
        let specs = (0..clusters.len())
            .flat_map(|w| (1..=max_k).map(move |k| (w, k)))
            .collect();
        Ok(Self {
            specs,
            clusters,
            n_assets,
            mode,
            solver,
        })
    }
}

impl AgentGenerator for AntiBcrpGenerator {
    fn n_agents(&self) -> usize {
        self.specs.len()
    }

    fn n_assets(&self) -> usize {
        self.n_assets
    }

    fn generate(&mut self, x: &PriceRelativeMatrix, t: usize) -> ControlMatrix {
        let t = t.min(x.n_periods());
        let mut out = ControlMatrix::zeros(self.specs.len(), self.n_assets);
        for (n, &(w, k)) in self.specs.iter().enumerate() {
            let cluster = self.clusters.assets(w);
            let h = if t >= k {
                let rows: Vec<Vec<f64>> = (t - k..t)
                    .map(|s| cluster.iter().map(|&a| x.get(s, a)).collect())
                    .collect();
                let window: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                anti_bcrp_controls(&window, self.mode, &self.solver).ok()
            } else {
                None
            };
            let h = h.unwrap_or_else(|| fallback_control(self.mode, cluster.len()));
            let row = out.row_mut(n);
            for (&a, &v) in cluster.iter().zip(h.weights()) {
                row[a] = v;
            }
        }
        out
    }

    fn label(&self, n: usize) -> String {
        let (w, k) = self.specs[n];
        format!("anti_k{k}_{}", self.clusters.name(w))
    }
}
