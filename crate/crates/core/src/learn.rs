//! Structure and parameter learning for the item hierarchy.
//!
//! The layered recipe: (1) group the current level's variables into
//! "islands" of high mutual information and introduce one binary latent per
//! island, fit by EM; (2) harden each user's latent posteriors into a binary
//! matrix and treat it as the data for the next level; (3) repeat until a
//! level is small enough. If several latents remain at the top they are
//! joined into a chain by MI adjacency so the result is a single tree, and a
//! final global EM pass refines all parameters jointly.
//!
//! Everything is deterministic given the seed: island formation breaks ties
//! by ascending variable id and every EM restart draws from a stream derived
//! from `(level, island, restart)`.

// index loops over symmetric matrices read better than iterator chains here
#![allow(clippy::needless_range_loop)]

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::FeedbackMatrix;
use crate::inference::{propagate, InferenceError, TreeSchedule};
use crate::ltm::{Cpt, LatentTreeModel, Node, NodeId, NodeKind, State, Violation};
use crate::math;
use crate::rng::Rng;

/// Learning hyperparameters.
#[derive(Clone, Debug)]
pub struct LearnConfig {
    /// Islands are closed once they reach this many variables (>= 2).
    pub max_island_size: usize,
    pub em_max_iters: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub em_tol: f64,
    pub em_restarts: usize,
    pub rng_seed: u64,
    /// Stacking stops once a level has at most this many latents (>= 1).
    pub min_top_level_vars: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            max_island_size: 8,
            em_max_iters: 100,
            em_tol: 1e-4,
            em_restarts: 3,
            rng_seed: 42,
            min_top_level_vars: 1,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let fail = |message: String| Err(LearnError::InvalidConfig { message });
        if self.max_island_size < 2 {
            return fail(format!("max_island_size {} < 2", self.max_island_size));
        }
        if self.em_max_iters == 0 {
            return fail("em_max_iters must be positive".to_string());
        }
        if self.em_tol.is_nan() || self.em_tol <= 0.0 {
            return fail(format!("em_tol {} must be positive", self.em_tol));
        }
        if self.em_restarts == 0 {
            return fail("em_restarts must be positive".to_string());
        }
        if self.min_top_level_vars == 0 {
            return fail("min_top_level_vars must be positive".to_string());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LearnError {
    InvalidConfig {
        message: String,
    },
    /// Learning needs at least two items.
    TooFewItems {
        got: usize,
    },
    NoUsers,
    /// Mutual information needs at least two variables.
    TooFewVariables,
    /// An LCM fit got no rows or no columns.
    EmptyData,
    Inference(InferenceError),
    /// Internal failure: the assembled model did not validate.
    ProducedInvalidModel {
        first: Violation,
    },
}

impl fmt::Display for LearnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnError::InvalidConfig { message } => write!(f, "invalid config: {message}"),
            LearnError::TooFewItems { got } => {
                write!(f, "learning needs at least 2 items, got {got}")
            }
            LearnError::NoUsers => write!(f, "learning needs at least 1 user"),
            LearnError::TooFewVariables => {
                write!(f, "mutual information needs at least 2 variables")
            }
            LearnError::EmptyData => write!(f, "latent class fit got empty data"),
            LearnError::Inference(e) => write!(f, "{e}"),
            LearnError::ProducedInvalidModel { first } => {
                write!(f, "learning produced an invalid model: {first}")
            }
        }
    }
}

impl core::error::Error for LearnError {}

impl From<InferenceError> for LearnError {
    fn from(e: InferenceError) -> Self {
        LearnError::Inference(e)
    }
}

/// Column-major bitset view of a binary matrix (rows = users, columns =
/// current-level variables).
#[derive(Clone, Debug)]
pub struct BinaryData {
    cols: Vec<Vec<u64>>,
    num_rows: usize,
}

impl BinaryData {
    pub fn from_matrix(matrix: &FeedbackMatrix) -> Self {
        let num_rows = matrix.num_users();
        let words = num_rows.div_ceil(64);
        let mut cols = vec![vec![0u64; words]; matrix.num_items()];
        for u in 0..num_rows as u32 {
            for &item in matrix.row(u) {
                cols[item as usize][u as usize / 64] |= 1u64 << (u as usize % 64);
            }
        }
        BinaryData { cols, num_rows }
    }

    /// `columns[v][r]` is variable `v`'s value in row `r`.
    pub fn from_columns(columns: &[Vec<bool>]) -> Self {
        let num_rows = columns.first().map_or(0, Vec::len);
        let words = num_rows.div_ceil(64);
        let cols = columns
            .iter()
            .map(|col| {
                debug_assert_eq!(col.len(), num_rows);
                let mut bits = vec![0u64; words];
                for (r, &on) in col.iter().enumerate() {
                    if on {
                        bits[r / 64] |= 1u64 << (r % 64);
                    }
                }
                bits
            })
            .collect();
        BinaryData { cols, num_rows }
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_vars(&self) -> usize {
        self.cols.len()
    }

    pub fn get(&self, var: usize, row: usize) -> bool {
        self.cols[var][row / 64] >> (row % 64) & 1 == 1
    }

    pub fn ones(&self, var: usize) -> usize {
        self.cols[var].iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Joint counts `[n00, n01, n10, n11]` for the pair `(a, b)`, where the
    /// first digit is `a`'s value.
    pub fn pair_counts(&self, a: usize, b: usize) -> [usize; 4] {
        let n11: usize = self.cols[a]
            .iter()
            .zip(&self.cols[b])
            .map(|(x, y)| (x & y).count_ones() as usize)
            .sum();
        let na = self.ones(a);
        let nb = self.ones(b);
        let n10 = na - n11;
        let n01 = nb - n11;
        let n00 = self.num_rows - n11 - n10 - n01;
        [n00, n01, n10, n11]
    }

    /// New data holding only the selected variables, in the given order.
    pub fn select_vars(&self, vars: &[usize]) -> BinaryData {
        BinaryData {
            cols: vars.iter().map(|&v| self.cols[v].clone()).collect(),
            num_rows: self.num_rows,
        }
    }
}

/// Mutual information in bits of a 2x2 contingency table with additive
/// smoothing `alpha` on each of the four joint cells; marginals are taken
/// from the smoothed joint, so the result is never negative.
pub fn mi_bits(counts: [usize; 4], alpha: f64) -> f64 {
    let n: usize = counts.iter().sum();
    let denom = n as f64 + 4.0 * alpha;
    if denom <= 0.0 {
        return 0.0;
    }
    let p: Vec<f64> = counts.iter().map(|&c| (c as f64 + alpha) / denom).collect();
    // cells ordered [00, 01, 10, 11]; first digit = x, second = y
    let px1 = p[2] + p[3];
    let py1 = p[1] + p[3];
    let marg = |cell: usize| -> f64 {
        let px = if cell >= 2 { px1 } else { 1.0 - px1 };
        let py = if cell % 2 == 1 { py1 } else { 1.0 - py1 };
        px * py
    };
    let mut mi = 0.0;
    for cell in 0..4 {
        if p[cell] > 0.0 {
            mi += p[cell] * math::log2(p[cell] / marg(cell));
        }
    }
    mi.max(0.0)
}

/// Symmetric matrix of pairwise mutual information (bits, add-one smoothed);
/// the diagonal is zero.
pub fn pairwise_mi(data: &BinaryData) -> Result<Vec<Vec<f64>>, LearnError> {
    let m = data.num_vars();
    if m < 2 {
        return Err(LearnError::TooFewVariables);
    }
    let mut mi = vec![vec![0.0f64; m]; m];
    for a in 0..m {
        for b in (a + 1)..m {
            let value = mi_bits(data.pair_counts(a, b), 1.0);
            mi[a][b] = value;
            mi[b][a] = value;
        }
    }
    Ok(mi)
}

/// A partition of the current level's variables into islands.
#[derive(Clone, Debug, PartialEq)]
pub struct IslandPartition {
    islands: Vec<Vec<usize>>,
}

impl IslandPartition {
    pub fn islands(&self) -> &[Vec<usize>] {
        &self.islands
    }

    pub fn len(&self) -> usize {
        self.islands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.islands.is_empty()
    }
}

/// Greedy island formation: seed with the highest-MI unassigned pair, then
/// repeatedly add the unassigned variable with the highest average MI to the
/// current members, closing at `max_island_size`. Ties break by ascending
/// variable id; a final single leftover variable forms a singleton island.
pub fn build_islands(mi: &[Vec<f64>], max_island_size: usize) -> IslandPartition {
    let m = mi.len();
    let mut assigned = vec![false; m];
    let mut remaining = m;
    let mut islands = Vec::new();

    while remaining >= 2 {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..m {
            if assigned[a] {
                continue;
            }
            for b in (a + 1)..m {
                if assigned[b] {
                    continue;
                }
                if best.is_none_or(|(_, _, s)| mi[a][b] > s) {
                    best = Some((a, b, mi[a][b]));
                }
            }
        }
        let (a, b, _) = best.expect("two unassigned variables exist");
        let mut island = vec![a, b];
        assigned[a] = true;
        assigned[b] = true;
        remaining -= 2;

        while island.len() < max_island_size && remaining > 0 {
            let mut pick: Option<(usize, f64)> = None;
            for v in 0..m {
                if assigned[v] {
                    continue;
                }
                let avg: f64 = island.iter().map(|&w| mi[v][w]).sum::<f64>() / island.len() as f64;
                if pick.is_none_or(|(_, s)| avg > s) {
                    pick = Some((v, avg));
                }
            }
            let (v, _) = pick.expect("remaining > 0");
            island.push(v);
            assigned[v] = true;
            remaining -= 1;
        }
        islands.push(island);
    }
    if remaining == 1 {
        let v = (0..m).find(|&v| !assigned[v]).expect("one variable left");
        islands.push(vec![v]);
    }

    IslandPartition { islands }
}

/// A fitted one-latent class model over an island's variables.
#[derive(Clone, Debug)]
pub struct LcmFit {
    /// `P(Z = s1)`.
    pub prior_s1: f64,
    /// One table per island variable, in island order.
    pub child_cpts: Vec<Cpt>,
    /// Evidence log-likelihood of the returned parameters.
    pub log_likelihood: f64,
    /// M-steps taken by the best restart.
    pub iterations: usize,
    /// Log-likelihood before each M-step of the best restart, ending with
    /// the returned parameters' value; non-decreasing within 1e-8.
    pub ll_trace: Vec<f64>,
    /// Full log-likelihood trace of every restart, in restart order.
    pub restart_traces: Vec<Vec<f64>>,
}

/// Builds the island LCM as a latent tree model so the E-step runs through
/// the shared inference machinery.
fn lcm_model(prior_s1: f64, child_cpts: &[Cpt]) -> LatentTreeModel {
    let mut nodes = vec![Node {
        kind: NodeKind::Latent,
        label: "z".to_string(),
        parent: None,
        level: 1,
    }];
    let mut cpts: Vec<Option<Cpt>> = vec![None];
    for (j, cpt) in child_cpts.iter().enumerate() {
        nodes.push(Node {
            kind: NodeKind::Observed,
            label: format!("v{j}"),
            parent: Some(NodeId(0)),
            level: 0,
        });
        cpts.push(Some(*cpt));
    }
    LatentTreeModel::new(nodes, [1.0 - prior_s1, prior_s1], cpts)
}

/// Distinct rows with multiplicities; patterns are packed bits over the
/// data's variables. EM cost then depends on distinct patterns, not users.
fn dedup_rows(data: &BinaryData) -> Vec<(Vec<u64>, usize)> {
    use alloc::collections::BTreeMap;
    let m = data.num_vars();
    let words = m.div_ceil(64);
    let mut seen: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    for r in 0..data.num_rows() {
        let mut pattern = vec![0u64; words];
        for v in 0..m {
            if data.get(v, r) {
                pattern[v / 64] |= 1u64 << (v % 64);
            }
        }
        *seen.entry(pattern).or_insert(0) += 1;
    }
    seen.into_iter().collect()
}

fn pattern_bit(pattern: &[u64], v: usize) -> bool {
    pattern[v / 64] >> (v % 64) & 1 == 1
}

struct LcmParams {
    prior_s1: f64,
    child_cpts: Vec<Cpt>,
}

/// Expected `[state][value]` counts for one node.
type EdgeCounts = [[f64; 2]; 2];

/// One E-step: evidence log-likelihood plus expected counts.
/// Returns `(ll, prior_mass_s1, per-child [z][x] weighted counts)`.
fn lcm_e_step(
    params: &LcmParams,
    patterns: &[(Vec<u64>, usize)],
) -> Result<(f64, f64, Vec<EdgeCounts>), LearnError> {
    let m = params.child_cpts.len();
    let model = lcm_model(params.prior_s1, &params.child_cpts);
    let schedule = TreeSchedule::new(&model)?;
    let mut ll = 0.0f64;
    let mut prior_mass = 0.0f64;
    let mut counts = vec![[[0.0f64; 2]; 2]; m];
    let mut leaf_states = vec![None; m + 1];
    for (pattern, weight) in patterns {
        let w = *weight as f64;
        for v in 0..m {
            leaf_states[v + 1] = Some(State::from_bool(pattern_bit(pattern, v)));
        }
        let prop = propagate(&model, &schedule, &leaf_states)?;
        if prop.impossible {
            return Err(LearnError::Inference(InferenceError::ImpossibleEvidence));
        }
        let q = prop.node_marginals[0][1];
        ll += w * prop.log_likelihood;
        prior_mass += w * q;
        for v in 0..m {
            let x = usize::from(pattern_bit(pattern, v));
            counts[v][1][x] += w * q;
            counts[v][0][x] += w * (1.0 - q);
        }
    }
    Ok((ll, prior_mass, counts))
}

/// Parameters never reach the boundary: expected-count ratios are clamped
/// into `[PARAM_FLOOR, 1 - PARAM_FLOOR]`. The clamped value still maximizes
/// the EM bound over that box (the bound is concave per row), so the
/// evidence log-likelihood is non-decreasing, which an additive-smoothing
/// M-step does not guarantee.
const PARAM_FLOOR: f64 = 1e-9;

fn clamped_ratio(on: f64, total: f64) -> f64 {
    let p = if total > 0.0 { on / total } else { 0.5 };
    p.clamp(PARAM_FLOOR, 1.0 - PARAM_FLOOR)
}

/// M-step: per-row expected-count ratios, clamped off the boundary.
fn lcm_m_step(n_rows: f64, prior_mass: f64, counts: &[EdgeCounts]) -> LcmParams {
    let prior_s1 = clamped_ratio(prior_mass, n_rows);
    let child_cpts = counts
        .iter()
        .map(|c| {
            let mut cpt = [[0.0f64; 2]; 2];
            for z in 0..2 {
                let p1 = clamped_ratio(c[z][1], c[z][0] + c[z][1]);
                cpt[z][0] = 1.0 - p1;
                cpt[z][1] = p1;
            }
            cpt
        })
        .collect();
    LcmParams {
        prior_s1,
        child_cpts,
    }
}

fn random_unit_pair(rng: &mut Rng) -> [f64; 2] {
    let a = rng.range_f64(0.2, 0.8);
    let b = rng.range_f64(0.2, 0.8);
    [a / (a + b), b / (a + b)]
}

fn relative_improvement(prev: f64, next: f64) -> f64 {
    (next - prev) / math::abs(prev).max(1e-12)
}

fn fit_lcm_stream(
    data: &BinaryData,
    config: &LearnConfig,
    stream: &[u64],
) -> Result<LcmFit, LearnError> {
    let m = data.num_vars();
    let n = data.num_rows();
    if m == 0 || n == 0 {
        return Err(LearnError::EmptyData);
    }
    let patterns = dedup_rows(data);

    let mut best: Option<LcmFit> = None;
    let mut restart_traces = Vec::with_capacity(config.em_restarts);
    for restart in 0..config.em_restarts {
        let mut tags: Vec<u64> = stream.to_vec();
        tags.push(restart as u64);
        let mut rng = Rng::derive(config.rng_seed, &tags);

        let mut params = LcmParams {
            prior_s1: random_unit_pair(&mut rng)[1],
            child_cpts: (0..m)
                .map(|_| [random_unit_pair(&mut rng), random_unit_pair(&mut rng)])
                .collect(),
        };

        let mut trace = Vec::new();
        let mut iterations = 0usize;
        let mut converged = false;
        for _ in 0..config.em_max_iters {
            let (ll, prior_mass, counts) = lcm_e_step(&params, &patterns)?;
            if let Some(&prev) = trace.last() {
                if relative_improvement(prev, ll) < config.em_tol {
                    trace.push(ll);
                    converged = true;
                    break;
                }
            }
            trace.push(ll);
            params = lcm_m_step(n as f64, prior_mass, &counts);
            iterations += 1;
        }
        if !converged {
            // parameters moved one M-step past the last recorded value
            let (ll, _, _) = lcm_e_step(&params, &patterns)?;
            trace.push(ll);
        }
        let final_ll = *trace.last().expect("at least one iteration ran");

        if best.as_ref().is_none_or(|b| final_ll > b.log_likelihood) {
            best = Some(LcmFit {
                prior_s1: params.prior_s1,
                child_cpts: params.child_cpts,
                log_likelihood: final_ll,
                iterations,
                ll_trace: trace.clone(),
                restart_traces: Vec::new(),
            });
        }
        restart_traces.push(trace);
    }
    let mut fit = best.expect("em_restarts >= 1");
    fit.restart_traces = restart_traces;
    Ok(fit)
}

/// Fits a one-latent class model to the data by EM with random restarts.
pub fn fit_lcm(data: &BinaryData, config: &LearnConfig) -> Result<LcmFit, LearnError> {
    config.validate()?;
    fit_lcm_stream(data, config, &[])
}

/// Posterior `P(Z = s1 | island variables)` for every row.
fn lcm_posteriors(
    data: &BinaryData,
    island: &[usize],
    fit: &LcmFit,
) -> Result<Vec<f64>, LearnError> {
    use alloc::collections::BTreeMap;
    let model = lcm_model(fit.prior_s1, &fit.child_cpts);
    let schedule = TreeSchedule::new(&model)?;
    let mut cache: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    let words = island.len().div_ceil(64);
    let mut out = Vec::with_capacity(data.num_rows());
    let mut leaf_states = vec![None; island.len() + 1];
    for r in 0..data.num_rows() {
        let mut pattern = vec![0u64; words];
        for (j, &v) in island.iter().enumerate() {
            if data.get(v, r) {
                pattern[j / 64] |= 1u64 << (j % 64);
            }
        }
        let q = match cache.get(&pattern) {
            Some(&q) => q,
            None => {
                for (j, _) in island.iter().enumerate() {
                    leaf_states[j + 1] = Some(State::from_bool(pattern_bit(&pattern, j)));
                }
                let prop = propagate(&model, &schedule, &leaf_states)?;
                if prop.impossible {
                    return Err(LearnError::Inference(InferenceError::ImpossibleEvidence));
                }
                let q = prop.node_marginals[0][1];
                cache.insert(pattern.clone(), q);
                q
            }
        };
        out.push(q);
    }
    Ok(out)
}

/// Hardens a posterior into a binary state: `s1` iff it exceeds one half
/// (exact ties go to `s0`).
pub fn harden_posterior(p: f64) -> State {
    State::from_bool(p > 0.5)
}

/// Builds the next level's data matrix: each user's hardened posterior for
/// each island latent.
pub fn stack_level(
    data: &BinaryData,
    islands: &IslandPartition,
    fits: &[LcmFit],
) -> Result<BinaryData, LearnError> {
    debug_assert_eq!(islands.len(), fits.len());
    let mut columns = Vec::with_capacity(islands.len());
    for (island, fit) in islands.islands().iter().zip(fits) {
        let posts = lcm_posteriors(data, island, fit)?;
        columns.push(
            posts
                .into_iter()
                .map(|q| harden_posterior(q) == State::S1)
                .collect::<Vec<bool>>(),
        );
    }
    Ok(BinaryData::from_columns(&columns))
}

/// Per-island fit summary for the learning report.
#[derive(Clone, Debug)]
pub struct IslandReport {
    pub latent_label: String,
    pub members: Vec<String>,
    pub final_log_likelihood: f64,
    pub em_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct LevelReport {
    pub level: u32,
    pub islands: Vec<IslandReport>,
}

/// What the learner did: islands per level, per-island likelihoods and EM
/// iteration counts, the top chain if one was needed, the global EM trace,
/// and items flagged as degenerate (consumed by nobody).
#[derive(Clone, Debug)]
pub struct LearnReport {
    pub num_users: usize,
    pub num_items: usize,
    pub levels: Vec<LevelReport>,
    /// Labels of the top-level chain, root first; empty when a single latent
    /// topped the hierarchy.
    pub chain_join: Vec<String>,
    pub global_em_iterations: usize,
    /// Global EM log-likelihood before each M-step, ending at the returned
    /// parameters; non-decreasing within 1e-8.
    pub global_ll_trace: Vec<f64>,
    pub degenerate_items: Vec<String>,
}

impl LearnReport {
    pub fn final_log_likelihood(&self) -> Option<f64> {
        self.global_ll_trace.last().copied()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("learning report\n");
        out.push_str(&format!(
            "data: {} users x {} items\n",
            self.num_users, self.num_items
        ));
        if self.degenerate_items.is_empty() {
            out.push_str("degenerate items: none\n");
        } else {
            out.push_str(&format!(
                "degenerate items ({}): {}\n",
                self.degenerate_items.len(),
                self.degenerate_items.join(",")
            ));
        }
        for level in &self.levels {
            out.push_str(&format!(
                "level {}: {} islands\n",
                level.level,
                level.islands.len()
            ));
            for island in &level.islands {
                out.push_str(&format!(
                    "  {} members={} ll={:.6} iters={} [{}]\n",
                    island.latent_label,
                    island.members.len(),
                    island.final_log_likelihood,
                    island.em_iterations,
                    island.members.join(",")
                ));
            }
        }
        if !self.chain_join.is_empty() {
            out.push_str(&format!(
                "top chain (root first): {}\n",
                self.chain_join.join(" -> ")
            ));
        }
        out.push_str(&format!(
            "global em: iters={} ll={:.6}\n",
            self.global_em_iterations,
            self.final_log_likelihood().unwrap_or(f64::NAN)
        ));
        out
    }
}

/// Learns the full hierarchy from a binary matrix and refines it with a
/// global EM pass; the returned model always validates and is oriented so
/// `s1` is the consuming state of every latent.
pub fn learn_hierarchy(
    matrix: &FeedbackMatrix,
    config: &LearnConfig,
) -> Result<(LatentTreeModel, LearnReport), LearnError> {
    config.validate()?;
    if matrix.num_items() < 2 {
        return Err(LearnError::TooFewItems {
            got: matrix.num_items(),
        });
    }
    if matrix.num_users() == 0 {
        return Err(LearnError::NoUsers);
    }

    let degenerate_items: Vec<String> = (0..matrix.num_items() as u32)
        .filter(|&i| matrix.item_count(i) == 0)
        .map(|i| matrix.item_key(i).to_string())
        .collect();

    // Observed nodes first, one per item, id == item index.
    let mut nodes: Vec<Node> = (0..matrix.num_items() as u32)
        .map(|i| Node {
            kind: NodeKind::Observed,
            label: matrix.item_key(i).to_string(),
            parent: None,
            level: 0,
        })
        .collect();
    let mut cpts: Vec<Option<Cpt>> = vec![None; nodes.len()];

    let mut level_data = BinaryData::from_matrix(matrix);
    let mut var_nodes: Vec<usize> = (0..nodes.len()).collect();
    let mut levels_report = Vec::new();
    let mut level = 0u32;

    let (top_ids, top_islands, top_fits, top_base_data) = loop {
        level += 1;
        let mi = pairwise_mi(&level_data)?;
        let islands = build_islands(&mi, config.max_island_size);
        let mut fits = Vec::with_capacity(islands.len());
        let mut new_ids = Vec::with_capacity(islands.len());
        let mut island_reports = Vec::with_capacity(islands.len());
        for (k, island) in islands.islands().iter().enumerate() {
            let island_data = level_data.select_vars(island);
            let fit = fit_lcm_stream(&island_data, config, &[level as u64, k as u64])?;
            let latent_id = nodes.len();
            let label = format!("g{level}_{k}");
            nodes.push(Node {
                kind: NodeKind::Latent,
                label: label.clone(),
                parent: None,
                level,
            });
            cpts.push(None);
            for (pos, &v) in island.iter().enumerate() {
                nodes[var_nodes[v]].parent = Some(NodeId(latent_id as u32));
                cpts[var_nodes[v]] = Some(fit.child_cpts[pos]);
            }
            island_reports.push(IslandReport {
                latent_label: label,
                members: island
                    .iter()
                    .map(|&v| nodes[var_nodes[v]].label.clone())
                    .collect(),
                final_log_likelihood: fit.log_likelihood,
                em_iterations: fit.iterations,
            });
            fits.push(fit);
            new_ids.push(latent_id);
        }
        levels_report.push(LevelReport {
            level,
            islands: island_reports,
        });

        if islands.len() <= config.min_top_level_vars {
            break (new_ids, islands, fits, level_data);
        }
        level_data = stack_level(&level_data, &islands, &fits)?;
        var_nodes = new_ids;
    };

    // Single top latent becomes the root; several are chained by MI
    // adjacency, with levels increasing along the chain so every parent
    // stays above its children.
    let mut chain_labels = Vec::new();
    let root_marginal;
    if top_ids.len() == 1 {
        root_marginal = {
            let p = top_fits[0].prior_s1;
            [1.0 - p, p]
        };
    } else {
        let top_data = stack_level(&top_base_data, &top_islands, &top_fits)?;
        let mi = pairwise_mi(&top_data)?;
        let k = top_ids.len();
        let mut assigned = vec![false; k];
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..k {
            for b in (a + 1)..k {
                if best.is_none_or(|(_, _, s)| mi[a][b] > s) {
                    best = Some((a, b, mi[a][b]));
                }
            }
        }
        let (a, b, _) = best.expect("k >= 2");
        let mut chain = vec![a, b];
        assigned[a] = true;
        assigned[b] = true;
        while chain.len() < k {
            let tail = *chain.last().expect("chain seeded");
            let mut pick: Option<(usize, f64)> = None;
            for v in 0..k {
                if !assigned[v] && pick.is_none_or(|(_, s)| mi[tail][v] > s) {
                    pick = Some((v, mi[tail][v]));
                }
            }
            let (v, _) = pick.expect("unassigned remains");
            chain.push(v);
            assigned[v] = true;
        }

        let n_rows = top_data.num_rows() as f64;
        let head = chain[0];
        let p_head = (top_data.ones(head) as f64 + 1.0) / (n_rows + 2.0);
        root_marginal = [1.0 - p_head, p_head];
        for w in chain.windows(2) {
            let (parent_var, child_var) = (w[0], w[1]);
            let counts = top_data.pair_counts(parent_var, child_var);
            // counts are [n00, n01, n10, n11] with parent first
            let mut cpt = [[0.0f64; 2]; 2];
            for ps in 0..2 {
                let row = [counts[ps * 2], counts[ps * 2 + 1]];
                let total = row[0] as f64 + row[1] as f64 + 2.0;
                cpt[ps][0] = (row[0] as f64 + 1.0) / total;
                cpt[ps][1] = (row[1] as f64 + 1.0) / total;
            }
            nodes[top_ids[child_var]].parent = Some(NodeId(top_ids[parent_var] as u32));
            cpts[top_ids[child_var]] = Some(cpt);
        }
        for (pos, &var) in chain.iter().enumerate() {
            nodes[top_ids[var]].level = level + (chain.len() - 1 - pos) as u32;
            chain_labels.push(nodes[top_ids[var]].label.clone());
        }
    }

    let model = LatentTreeModel::new(nodes, root_marginal, cpts);
    let violations = model.validate();
    if let Some(first) = violations.first() {
        return Err(LearnError::ProducedInvalidModel {
            first: first.clone(),
        });
    }

    let (model, global_iters, global_trace) = global_em(model, matrix, config)?;
    let model = orient_states(&model);
    let violations = model.validate();
    if let Some(first) = violations.first() {
        return Err(LearnError::ProducedInvalidModel {
            first: first.clone(),
        });
    }

    let report = LearnReport {
        num_users: matrix.num_users(),
        num_items: matrix.num_items(),
        levels: levels_report,
        chain_join: chain_labels,
        global_em_iterations: global_iters,
        global_ll_trace: global_trace,
        degenerate_items,
    };
    Ok((model, report))
}

/// One global E-step over all users: log-likelihood, root state mass, and
/// per-edge expected pair counts.
fn global_e_step(
    model: &LatentTreeModel,
    schedule: &TreeSchedule,
    matrix: &FeedbackMatrix,
) -> Result<(f64, [f64; 2], Vec<EdgeCounts>), LearnError> {
    let n = model.num_nodes();
    let root = model.root().expect("validated").index();
    let num_items = matrix.num_items();
    let mut base: Vec<Option<State>> = vec![None; n];
    for slot in base.iter_mut().take(num_items) {
        *slot = Some(State::S0);
    }
    let mut ll = 0.0f64;
    let mut root_mass = [0.0f64; 2];
    let mut edge_mass = vec![[[0.0f64; 2]; 2]; n];
    let mut leaf_states = base.clone();
    for u in 0..matrix.num_users() as u32 {
        leaf_states.copy_from_slice(&base);
        for &item in matrix.row(u) {
            leaf_states[item as usize] = Some(State::S1);
        }
        let prop = propagate(model, schedule, &leaf_states)?;
        if prop.impossible {
            return Err(LearnError::Inference(InferenceError::ImpossibleEvidence));
        }
        ll += prop.log_likelihood;
        root_mass[0] += prop.node_marginals[root][0];
        root_mass[1] += prop.node_marginals[root][1];
        for (c, mass) in edge_mass.iter_mut().enumerate() {
            if c == root {
                continue;
            }
            for ps in 0..2 {
                for cs in 0..2 {
                    mass[ps][cs] += prop.edge_marginals[c][ps][cs];
                }
            }
        }
    }
    Ok((ll, root_mass, edge_mass))
}

fn global_em(
    model: LatentTreeModel,
    matrix: &FeedbackMatrix,
    config: &LearnConfig,
) -> Result<(LatentTreeModel, usize, Vec<f64>), LearnError> {
    let schedule = TreeSchedule::new(&model)?;
    let root = model.root().expect("validated").index();
    let nodes: Vec<Node> = model.nodes().map(|(_, n)| n.clone()).collect();
    let mut root_marginal = model.root_marginal();
    let mut cpts: Vec<Option<Cpt>> = (0..model.num_nodes())
        .map(|k| model.cpt(NodeId(k as u32)).copied())
        .collect();
    let n_users = matrix.num_users() as f64;

    let rebuild = |root_marginal: [f64; 2], cpts: &Vec<Option<Cpt>>| {
        LatentTreeModel::new(nodes.clone(), root_marginal, cpts.clone())
    };

    let mut current = rebuild(root_marginal, &cpts);
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;
    for _ in 0..config.em_max_iters {
        let (ll, root_mass, edge_mass) = global_e_step(&current, &schedule, matrix)?;
        if let Some(&prev) = trace.last() {
            if relative_improvement(prev, ll) < config.em_tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        let p_root = clamped_ratio(root_mass[1], n_users);
        root_marginal = [1.0 - p_root, p_root];
        for (c, mass) in edge_mass.iter().enumerate() {
            if c == root {
                continue;
            }
            let mut cpt = [[0.0f64; 2]; 2];
            for ps in 0..2 {
                let p1 = clamped_ratio(mass[ps][1], mass[ps][0] + mass[ps][1]);
                cpt[ps][0] = 1.0 - p1;
                cpt[ps][1] = p1;
            }
            cpts[c] = Some(cpt);
        }
        current = rebuild(root_marginal, &cpts);
        iterations += 1;
    }
    if !converged {
        let (ll, _, _) = global_e_step(&current, &schedule, matrix)?;
        trace.push(ll);
    }
    Ok((current, iterations, trace))
}

/// Expected number of observed descendants of `latent` in state `s1`, given
/// the latent's state, by forward propagation through its subtree.
fn descendant_expectation(
    model: &LatentTreeModel,
    children: &[Vec<NodeId>],
    latent: NodeId,
    state: State,
) -> f64 {
    let mut total = 0.0;
    // stack of (node, P(node = s1 | latent = state))
    let mut stack: Vec<(NodeId, f64)> = children[latent.index()]
        .iter()
        .map(|&c| {
            let cpt = model.cpt(c).expect("non-root child");
            (c, cpt[state.index()][1])
        })
        .collect();
    while let Some((node, p_s1)) = stack.pop() {
        if model.node(node).kind == NodeKind::Observed {
            total += p_s1;
        } else {
            for &c in &children[node.index()] {
                let cpt = model.cpt(c).expect("non-root child");
                stack.push((c, (1.0 - p_s1) * cpt[0][1] + p_s1 * cpt[1][1]));
            }
        }
    }
    total
}

/// Resolves latent state label swapping: after orientation, `s1` implies at
/// least as much expected consumption among a latent's observed descendants
/// as `s0`. Pure relabeling; the joint distribution is unchanged.
pub fn orient_states(model: &LatentTreeModel) -> LatentTreeModel {
    let children: Vec<Vec<NodeId>> = model.child_lists();
    // Decisions are independent across latents (relabeling one latent does
    // not change any other latent's descendant distribution), so compute
    // them all first, then apply.
    let swaps: Vec<NodeId> = model
        .nodes()
        .filter(|(_, n)| n.kind == NodeKind::Latent)
        .filter(|(id, _)| {
            let e1 = descendant_expectation(model, &children, *id, State::S1);
            let e0 = descendant_expectation(model, &children, *id, State::S0);
            e0 > e1
        })
        .map(|(id, _)| id)
        .collect();

    let nodes: Vec<Node> = model.nodes().map(|(_, n)| n.clone()).collect();
    let mut root_marginal = model.root_marginal();
    let mut cpts: Vec<Option<Cpt>> = (0..model.num_nodes())
        .map(|k| model.cpt(NodeId(k as u32)).copied())
        .collect();

    for &z in &swaps {
        match model.node(z).parent {
            None => root_marginal.swap(0, 1),
            Some(_) => {
                let cpt = cpts[z.index()].as_mut().expect("non-root latent has cpt");
                cpt[0].swap(0, 1);
                cpt[1].swap(0, 1);
            }
        }
        for &c in &children[z.index()] {
            let cpt = cpts[c.index()].as_mut().expect("child has cpt");
            cpt.swap(0, 1);
        }
    }

    LatentTreeModel::new(nodes, root_marginal, cpts)
}
