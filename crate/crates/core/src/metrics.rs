//! Ranking-quality evaluation: per-user AUC and NDCG@R, aggregated
//! unweighted over evaluable users, plus popularity and user-kNN baselines.
//!
//! A user is evaluable when they have at least one test positive (a test
//! item not already in their training row) and at least one negative (an
//! item in neither row); everyone else is skipped and counted. AUC counts
//! ties as one half, so all-equal scores give exactly 0.5.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::FeedbackMatrix;
use crate::math;
use crate::recommend::top_n;

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsError {
    /// Train and test views must share the item and user universe.
    MismatchedMatrices,
    /// Cutoffs must be at least 1.
    InvalidCutoff {
        cutoff: usize,
    },
    NoEvaluableUsers,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::MismatchedMatrices => {
                write!(f, "train and test matrices do not share a universe")
            }
            MetricsError::InvalidCutoff { cutoff } => {
                write!(f, "cutoff {cutoff} must be at least 1")
            }
            MetricsError::NoEvaluableUsers => write!(f, "no users with test positives"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// Pairwise AUC: the fraction of (positive, negative) pairs where the
/// positive outranks the negative, ties counting one half. `None` when
/// either side is empty.
///
/// Sort-based; equals the quadratic pair count exactly because wins and tie
/// halves are accumulated as exact integers and halves.
pub fn auc(scores: &[f64], positives: &[u32], negatives: &[u32]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut pool: Vec<(f64, bool)> = positives
        .iter()
        .map(|&i| (scores[i as usize], true))
        .chain(negatives.iter().map(|&i| (scores[i as usize], false)))
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut wins = 0u64;
    let mut tie_pairs = 0u64;
    let mut negatives_below = 0u64;
    let mut k = 0usize;
    while k < pool.len() {
        let mut j = k;
        while j < pool.len() && pool[j].0.total_cmp(&pool[k].0) == core::cmp::Ordering::Equal {
            j += 1;
        }
        let pos_here = pool[k..j].iter().filter(|e| e.1).count() as u64;
        let neg_here = (j - k) as u64 - pos_here;
        wins += pos_here * negatives_below;
        tie_pairs += pos_here * neg_here;
        negatives_below += neg_here;
        k = j;
    }
    let total = positives.len() as f64 * negatives.len() as f64;
    Some((wins as f64 + 0.5 * tie_pairs as f64) / total)
}

/// NDCG at cutoff `r` with binary gains: DCG sums `1/log2(rank+1)` over
/// relevant items in the top `r`; the ideal places `min(r, |relevant|)`
/// relevant items on top. `None` when `relevant` is empty.
pub fn ndcg_at_r(ranking: &[u32], relevant: &[u32], r: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    debug_assert!(r >= 1);
    let mut dcg = 0.0f64;
    for (pos, item) in ranking.iter().take(r).enumerate() {
        if relevant.binary_search(item).is_ok() {
            dcg += 1.0 / math::log2(pos as f64 + 2.0);
        }
    }
    let ideal_hits = r.min(relevant.len());
    let mut idcg = 0.0f64;
    for pos in 0..ideal_hits {
        idcg += 1.0 / math::log2(pos as f64 + 2.0);
    }
    Some(dcg / idcg)
}

/// Popularity baseline: an item's score is its training consumption count,
/// identical for every user.
pub fn popularity_scores(train: &FeedbackMatrix) -> Vec<f64> {
    let mut counts = vec![0.0f64; train.num_items()];
    for u in 0..train.num_users() as u32 {
        for &item in train.row(u) {
            counts[item as usize] += 1.0;
        }
    }
    counts
}

fn sorted_intersection_size(a: &[u32], b: &[u32]) -> usize {
    let mut i = 0;
    let mut j = 0;
    let mut n = 0;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// User-kNN baseline: cosine similarity between binary rows, top-`k`
/// positive-similarity neighbors (ties by ascending user index), item score
/// is the similarity-weighted count of neighbors that consumed it.
pub fn user_knn_scores(train: &FeedbackMatrix, k: usize, user: u32) -> Vec<f64> {
    debug_assert!(k >= 1);
    let mut scores = vec![0.0f64; train.num_items()];
    let row = train.row(user);
    if row.is_empty() {
        return scores;
    }
    let mut sims: Vec<(f64, u32)> = Vec::new();
    for v in 0..train.num_users() as u32 {
        if v == user {
            continue;
        }
        let other = train.row(v);
        if other.is_empty() {
            continue;
        }
        let overlap = sorted_intersection_size(row, other);
        if overlap == 0 {
            continue;
        }
        let sim = overlap as f64 / math::sqrt((row.len() * other.len()) as f64);
        sims.push((sim, v));
    }
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(sim, v) in sims.iter().take(k) {
        for &item in train.row(v) {
            scores[item as usize] += sim;
        }
    }
    scores
}

/// Train/test views over a shared universe plus the NDCG cutoffs.
#[derive(Debug)]
pub struct EvalProtocol<'a> {
    pub train: &'a FeedbackMatrix,
    pub test: &'a FeedbackMatrix,
    pub cutoffs: Vec<usize>,
}

impl<'a> EvalProtocol<'a> {
    pub fn new(
        train: &'a FeedbackMatrix,
        test: &'a FeedbackMatrix,
        cutoffs: Vec<usize>,
    ) -> Result<Self, MetricsError> {
        if train.num_users() != test.num_users()
            || train.num_items() != test.num_items()
            || train.item_keys() != test.item_keys()
        {
            return Err(MetricsError::MismatchedMatrices);
        }
        for &c in &cutoffs {
            if c == 0 {
                return Err(MetricsError::InvalidCutoff { cutoff: c });
            }
        }
        Ok(EvalProtocol {
            train,
            test,
            cutoffs,
        })
    }
}

/// Metrics for one evaluable user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserEval {
    pub auc: f64,
    /// Aligned with the protocol's cutoffs.
    pub ndcg: Vec<f64>,
}

/// Evaluates one user, or `None` when the user has no test positives or no
/// negatives. Positives are test items outside the training row; negatives
/// are items in neither row; the ranking excludes the training row.
pub fn evaluate_user(protocol: &EvalProtocol, user: u32, scores: &[f64]) -> Option<UserEval> {
    let train_row = protocol.train.row(user);
    let test_row = protocol.test.row(user);
    let positives: Vec<u32> = test_row
        .iter()
        .copied()
        .filter(|i| train_row.binary_search(i).is_err())
        .collect();
    if positives.is_empty() {
        return None;
    }
    let num_items = protocol.train.num_items() as u32;
    let negatives: Vec<u32> = (0..num_items)
        .filter(|i| train_row.binary_search(i).is_err() && test_row.binary_search(i).is_err())
        .collect();
    let auc = auc(scores, &positives, &negatives)?;
    let ranked = top_n(scores, train_row, num_items as usize);
    let ndcg = protocol
        .cutoffs
        .iter()
        .map(|&r| ndcg_at_r(&ranked.ranking, &positives, r).expect("positives nonempty"))
        .collect();
    Some(UserEval { auc, ndcg })
}

/// Corpus-level evaluation report.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub cutoffs: Vec<usize>,
    /// Unweighted mean over evaluable users.
    pub auc_mean: f64,
    /// Aligned with `cutoffs`.
    pub ndcg_mean: Vec<f64>,
    pub evaluated_users: usize,
    pub skipped_users: usize,
    /// Per-user results in ascending user order.
    pub per_user: Vec<(u32, UserEval)>,
}

impl EvalReport {
    /// Aggregates per-user results; `results` must be ordered by user.
    pub fn aggregate(
        cutoffs: Vec<usize>,
        results: impl IntoIterator<Item = (u32, Option<UserEval>)>,
    ) -> Result<Self, MetricsError> {
        let mut per_user = Vec::new();
        let mut skipped = 0usize;
        for (user, result) in results {
            match result {
                Some(eval) => per_user.push((user, eval)),
                None => skipped += 1,
            }
        }
        if per_user.is_empty() {
            return Err(MetricsError::NoEvaluableUsers);
        }
        let n = per_user.len() as f64;
        let auc_mean = per_user.iter().map(|(_, e)| e.auc).sum::<f64>() / n;
        let ndcg_mean = (0..cutoffs.len())
            .map(|c| per_user.iter().map(|(_, e)| e.ndcg[c]).sum::<f64>() / n)
            .collect();
        Ok(EvalReport {
            cutoffs,
            auc_mean,
            ndcg_mean,
            evaluated_users: per_user.len(),
            skipped_users: skipped,
            per_user,
        })
    }

    /// Human-readable block followed by a machine-readable
    /// `metric,cutoff,value` section.
    pub fn render(&self, name: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("recommender: {name}\n"));
        out.push_str(&format!(
            "users evaluated: {} (skipped: {})\n",
            self.evaluated_users, self.skipped_users
        ));
        out.push_str(&format!("auc: {:.9}\n", self.auc_mean));
        for (r, v) in self.cutoffs.iter().zip(&self.ndcg_mean) {
            out.push_str(&format!("ndcg@{r}: {v:.9}\n"));
        }
        let mut aucs: Vec<f64> = self.per_user.iter().map(|(_, e)| e.auc).collect();
        aucs.sort_by(f64::total_cmp);
        if let (Some(&lo), Some(&hi)) = (aucs.first(), aucs.last()) {
            let median = aucs[aucs.len() / 2];
            out.push_str(&format!(
                "auc per-user min/median/max: {lo:.9}/{median:.9}/{hi:.9}\n"
            ));
        }
        out.push_str("metric,cutoff,value\n");
        out.push_str(&format!("auc,,{:.8e}\n", self.auc_mean));
        for (r, v) in self.cutoffs.iter().zip(&self.ndcg_mean) {
            out.push_str(&format!("ndcg,{r},{v:.8e}\n"));
        }
        out
    }
}

/// Sequential evaluation of a scoring function over every user.
pub fn evaluate<F>(protocol: &EvalProtocol, mut scorer: F) -> Result<EvalReport, MetricsError>
where
    F: FnMut(u32) -> Vec<f64>,
{
    let results = (0..protocol.train.num_users() as u32).map(|u| {
        let scores = scorer(u);
        (u, evaluate_user(protocol, u, &scores))
    });
    // collect first so the closure borrow ends before aggregation
    let collected: Vec<_> = results.collect();
    EvalReport::aggregate(protocol.cutoffs.clone(), collected)
}
