//! Group preference profiles, user memberships, scoring, and top-N ranking.
//!
//! A taste group is the `s1` state of a level-`l` latent. Its preference for
//! an item is the membership-weighted fraction of history users that
//! consumed the item:
//!
//! ```text
//! p(i | G_k, H) = sum_u 1[u consumed i in H] * m_uk  /  sum_u m_uk
//! ```
//!
//! where `m_uk = P(Z_k = s1 | u)`. A group that no one belongs to is
//! degenerate and scores zero. A user's item score is the dot product of
//! their membership vector with the item's preference column, so an item
//! consumed by any positive-membership member of any of the user's groups
//! gets a positive score.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::FeedbackMatrix;
use crate::inference::{self, Evidence, InferenceError};
use crate::ltm::{LatentTreeModel, ModelError, NodeId};

/// Per-user soft memberships, ordered like the group ids they were computed
/// for.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipVector {
    values: Vec<f64>,
}

impl MembershipVector {
    pub fn new(values: Vec<f64>) -> Self {
        MembershipVector { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Preferences of the level-`l` taste groups over the item universe.
#[derive(Clone, Debug)]
pub struct GroupProfile {
    level: u32,
    group_ids: Vec<NodeId>,
    group_labels: Vec<String>,
    item_keys: Vec<String>,
    /// `preferences[k][i]`, each in `[0, 1]`; exactly zero iff no user with
    /// positive membership in group `k` consumed item `i`.
    preferences: Vec<Vec<f64>>,
    /// Per-group total membership mass (the preference denominators).
    membership_mass: Vec<f64>,
    /// Groups with zero mass; their preferences are all zero.
    degenerate_groups: Vec<usize>,
}

impl GroupProfile {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn group_ids(&self) -> &[NodeId] {
        &self.group_ids
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    pub fn num_groups(&self) -> usize {
        self.group_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn preference(&self, group: usize, item: usize) -> f64 {
        self.preferences[group][item]
    }

    pub fn preferences(&self, group: usize) -> &[f64] {
        &self.preferences[group]
    }

    pub fn membership_mass(&self) -> &[f64] {
        &self.membership_mass
    }

    pub fn degenerate_groups(&self) -> &[usize] {
        &self.degenerate_groups
    }
}

/// Scores plus the derived ranking for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    /// Score per item, aligned with the item index.
    pub scores: Vec<f64>,
    /// Top item indices: descending score, ties by ascending item index,
    /// consumed items excluded, truncated to the requested length.
    pub ranking: Vec<u32>,
    /// Items excluded from the ranking (the user's consumed set).
    pub excluded: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecommendError {
    /// Membership count does not match the history matrix users.
    UserCountMismatch {
        users: usize,
        memberships: usize,
    },
    /// A membership vector has the wrong number of groups.
    GroupCountMismatch {
        expected: usize,
        got: usize,
    },
    Model(ModelError),
    Inference(InferenceError),
}

impl fmt::Display for RecommendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecommendError::UserCountMismatch { users, memberships } => write!(
                f,
                "history matrix has {users} users but {memberships} membership vectors supplied"
            ),
            RecommendError::GroupCountMismatch { expected, got } => {
                write!(
                    f,
                    "membership vector has {got} entries, expected {expected}"
                )
            }
            RecommendError::Model(e) => write!(f, "{e}"),
            RecommendError::Inference(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for RecommendError {}

impl From<ModelError> for RecommendError {
    fn from(e: ModelError) -> Self {
        RecommendError::Model(e)
    }
}

impl From<InferenceError> for RecommendError {
    fn from(e: InferenceError) -> Self {
        RecommendError::Inference(e)
    }
}

/// Builds the group preference profile from a history view and per-user
/// memberships.
///
/// `history` is the (possibly recency-filtered) consumption view used for
/// the indicator; `memberships` must be computed against the same model and
/// level, one vector per history user, typically from the user's full
/// training evidence. Groups with zero membership mass are flagged as
/// degenerate and get all-zero preferences.
pub fn group_preferences(
    model: &LatentTreeModel,
    history: &FeedbackMatrix,
    memberships: &[MembershipVector],
    level: u32,
) -> Result<GroupProfile, RecommendError> {
    let group_ids = model.latents_at_level(level)?;
    let k = group_ids.len();
    if memberships.len() != history.num_users() {
        return Err(RecommendError::UserCountMismatch {
            users: history.num_users(),
            memberships: memberships.len(),
        });
    }
    for m in memberships {
        if m.len() != k {
            return Err(RecommendError::GroupCountMismatch {
                expected: k,
                got: m.len(),
            });
        }
    }

    let num_items = history.num_items();
    let mut mass = vec![0.0f64; k];
    let mut numerators = vec![vec![0.0f64; num_items]; k];
    for u in 0..history.num_users() as u32 {
        let m = memberships[u as usize].values();
        for (g, mass_g) in mass.iter_mut().enumerate() {
            *mass_g += m[g];
        }
        for &item in history.row(u) {
            for (g, numerator) in numerators.iter_mut().enumerate() {
                numerator[item as usize] += m[g];
            }
        }
    }

    let mut degenerate = Vec::new();
    let mut preferences = numerators;
    for (g, prefs) in preferences.iter_mut().enumerate() {
        if mass[g] == 0.0 {
            degenerate.push(g);
            for p in prefs.iter_mut() {
                *p = 0.0;
            }
        } else {
            for p in prefs.iter_mut() {
                *p /= mass[g];
            }
        }
    }

    Ok(GroupProfile {
        level,
        group_labels: group_ids
            .iter()
            .map(|&id| model.node(id).label.clone())
            .collect(),
        group_ids,
        item_keys: history.item_keys().to_vec(),
        preferences,
        membership_mass: mass,
        degenerate_groups: degenerate,
    })
}

/// Membership vector for one user: posteriors of the level-`l` latents given
/// the user's evidence, in canonical group order.
pub fn user_membership(
    model: &LatentTreeModel,
    evidence: &Evidence,
    level: u32,
) -> Result<MembershipVector, RecommendError> {
    let group_ids = model.latents_at_level(level)?;
    let post = inference::posteriors(model, evidence)?;
    Ok(MembershipVector::new(
        group_ids.iter().map(|id| post[id]).collect(),
    ))
}

/// Item scores for one user: `score[i] = sum_k membership[k] * p(i | G_k)`.
pub fn score_items(
    profile: &GroupProfile,
    membership: &MembershipVector,
) -> Result<Vec<f64>, RecommendError> {
    if membership.len() != profile.num_groups() {
        return Err(RecommendError::GroupCountMismatch {
            expected: profile.num_groups(),
            got: membership.len(),
        });
    }
    let mut scores = vec![0.0f64; profile.num_items()];
    for (g, &m) in membership.values().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (score, &p) in scores.iter_mut().zip(profile.preferences(g)) {
            *score += m * p;
        }
    }
    Ok(scores)
}

/// Ranks items by descending score (ties by ascending item index), excluding
/// the consumed set, truncated to `n`.
pub fn top_n(scores: &[f64], consumed: &[u32], n: usize) -> RankedList {
    let mut excluded = consumed.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    let mut ranking: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    ranking.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ranking.truncate(n);
    RankedList {
        scores: scores.to_vec(),
        ranking,
        excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_matrix, InteractionRecord};
    use crate::inference::AbsentPolicy;
    use crate::ltm::{Node, NodeKind, State};
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn record(user: &str, item: &str) -> InteractionRecord {
        InteractionRecord {
            user_key: user.to_string(),
            item_key: item.to_string(),
            timestamp: 0,
        }
    }

    fn single_group_model(items: &[&str]) -> LatentTreeModel {
        let mut nodes = vec![Node {
            kind: NodeKind::Latent,
            label: "g1_0".to_string(),
            parent: None,
            level: 1,
        }];
        let mut cpts: Vec<Option<crate::ltm::Cpt>> = vec![None];
        for item in items {
            nodes.push(Node {
                kind: NodeKind::Observed,
                label: item.to_string(),
                parent: Some(NodeId(0)),
                level: 0,
            });
            cpts.push(Some([[0.9, 0.1], [0.3, 0.7]]));
        }
        LatentTreeModel::new(nodes, [0.5, 0.5], cpts)
    }

    #[test]
    fn preference_is_membership_weighted_fraction() {
        // memberships 1.0 and 0.5; item consumed by the first user only:
        // 1.0 / 1.5.
        let model = single_group_model(&["a"]);
        let records = vec![record("u0", "a"), record("u1", "b")];
        let (matrix, _) = build_matrix(&records, None);
        let memberships = vec![
            MembershipVector::new(vec![1.0]),
            MembershipVector::new(vec![0.5]),
        ];
        let profile = group_preferences(&model, &matrix, &memberships, 1).unwrap();
        let a = matrix.item_id("a").unwrap() as usize;
        assert!((profile.preference(0, a) - 1.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn unconsumed_item_has_exactly_zero_preference() {
        let model = single_group_model(&["a", "b"]);
        let records = vec![record("u0", "a"), record("u0", "b"), record("u1", "a")];
        let (matrix, _) = build_matrix(&records, None);
        // u1 did not consume b; drop u1's weight to a positive value anyway.
        let memberships = vec![
            MembershipVector::new(vec![0.0]),
            MembershipVector::new(vec![0.8]),
        ];
        let profile = group_preferences(&model, &matrix, &memberships, 1).unwrap();
        let b = matrix.item_id("b").unwrap() as usize;
        // Only u0 consumed b and u0 has zero membership: exact zero.
        assert_eq!(profile.preference(0, b), 0.0);
    }

    #[test]
    fn fully_consumed_item_has_preference_one() {
        let model = single_group_model(&["a"]);
        let records = vec![record("u0", "a"), record("u1", "a")];
        let (matrix, _) = build_matrix(&records, None);
        let memberships = vec![
            MembershipVector::new(vec![0.3]),
            MembershipVector::new(vec![0.9]),
        ];
        let profile = group_preferences(&model, &matrix, &memberships, 1).unwrap();
        assert_eq!(profile.preference(0, 0), 1.0);
    }

    #[test]
    fn zero_mass_group_is_degenerate_not_an_error() {
        let model = single_group_model(&["a"]);
        let records = vec![record("u0", "a")];
        let (matrix, _) = build_matrix(&records, None);
        let memberships = vec![MembershipVector::new(vec![0.0])];
        let profile = group_preferences(&model, &matrix, &memberships, 1).unwrap();
        assert_eq!(profile.degenerate_groups(), &[0]);
        assert_eq!(profile.preference(0, 0), 0.0);
    }

    #[test]
    fn membership_of_empty_evidence_is_the_prior() {
        let model = single_group_model(&["a", "b"]);
        let evidence = Evidence::new(AbsentPolicy::AsMissing);
        let m = user_membership(&model, &evidence, 1).unwrap();
        assert!((m.values()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deterministic_item_forces_membership_one() {
        let mut nodes = vec![Node {
            kind: NodeKind::Latent,
            label: "g".to_string(),
            parent: None,
            level: 1,
        }];
        nodes.push(Node {
            kind: NodeKind::Observed,
            label: "a".to_string(),
            parent: Some(NodeId(0)),
            level: 0,
        });
        // a occurs only when the latent is s1
        let model = LatentTreeModel::new(
            nodes,
            [0.5, 0.5],
            vec![None, Some([[1.0, 0.0], [0.5, 0.5]])],
        );
        let mut evidence = Evidence::new(AbsentPolicy::AsMissing);
        evidence.set(NodeId(1), State::S1);
        let m = user_membership(&model, &evidence, 1).unwrap();
        assert!((m.values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_the_membership_dot_preferences() {
        let profile = GroupProfile {
            level: 1,
            group_ids: vec![NodeId(0), NodeId(1)],
            group_labels: vec!["g0".into(), "g1".into()],
            item_keys: vec!["i".into()],
            preferences: vec![vec![0.5], vec![0.25]],
            membership_mass: vec![1.0, 1.0],
            degenerate_groups: vec![],
        };
        let single = score_items(&profile, &MembershipVector::new(vec![1.0, 0.0])).unwrap();
        assert!((single[0] - 0.5).abs() < 1e-15);
        let blended = score_items(&profile, &MembershipVector::new(vec![0.6, 0.4])).unwrap();
        assert!((blended[0] - 0.40).abs() < 1e-15);
        let none = score_items(&profile, &MembershipVector::new(vec![0.0, 0.0])).unwrap();
        assert_eq!(none[0], 0.0);
        assert!(matches!(
            score_items(&profile, &MembershipVector::new(vec![1.0])),
            Err(RecommendError::GroupCountMismatch { .. })
        ));
    }

    #[test]
    fn top_n_breaks_ties_by_item_index() {
        let ranked = top_n(&[0.4, 0.9, 0.4], &[], 3);
        assert_eq!(ranked.ranking, vec![1, 0, 2]);
    }

    #[test]
    fn top_n_excludes_consumed_items() {
        let ranked = top_n(&[0.4, 0.9, 0.4], &[1], 3);
        assert_eq!(ranked.ranking, vec![0, 2]);
        assert_eq!(ranked.excluded, vec![1]);
    }

    #[test]
    fn top_n_truncates() {
        let ranked = top_n(&[0.4, 0.9, 0.4], &[], 1);
        assert_eq!(ranked.ranking, vec![1]);
    }

    proptest! {
        /// Direct evaluation of the preference ratio and the score sum on
        /// random small instances.
        #[test]
        fn profile_and_score_match_direct_evaluation(
            consumption in proptest::collection::vec(
                proptest::collection::vec(proptest::bool::ANY, 6), 1..10
            ),
            raw_memberships in proptest::collection::vec(
                proptest::collection::vec(0.0f64..1.0, 2), 10
            ),
        ) {
            let mut records = Vec::new();
            for (u, row) in consumption.iter().enumerate() {
                // phantom item column keeps every user present
                records.push(InteractionRecord {
                    user_key: format!("u{u}"),
                    item_key: "phantom".to_string(),
                    timestamp: 0,
                });
                for (i, &on) in row.iter().enumerate() {
                    if on {
                        records.push(InteractionRecord {
                            user_key: format!("u{u}"),
                            item_key: format!("i{i}"),
                            timestamp: 0,
                        });
                    }
                }
            }
            let (matrix, _) = build_matrix(&records, None);
            let num_users = consumption.len();
            let memberships: Vec<MembershipVector> = (0..num_users)
                .map(|u| MembershipVector::new(raw_memberships[u].clone()))
                .collect();

            // Two level-1 groups; group_preferences only reads group ids and
            // labels, so structural validity is irrelevant here.
            let mut nodes = vec![
                Node { kind: NodeKind::Latent, label: "gA".into(), parent: None, level: 1 },
                Node { kind: NodeKind::Latent, label: "gB".into(), parent: Some(NodeId(0)), level: 1 },
            ];
            let mut cpts: Vec<Option<crate::ltm::Cpt>> =
                vec![None, Some([[0.6, 0.4], [0.4, 0.6]])];
            for i in 0..matrix.num_items() as u32 {
                nodes.push(Node {
                    kind: NodeKind::Observed,
                    label: matrix.item_key(i).to_string(),
                    parent: Some(NodeId(1)),
                    level: 0,
                });
                cpts.push(Some([[0.7, 0.3], [0.2, 0.8]]));
            }
            let model = LatentTreeModel::new(nodes, [0.5, 0.5], cpts);

            let profile = group_preferences(&model, &matrix, &memberships, 1).unwrap();
            let k = profile.num_groups();
            prop_assert_eq!(k, 2);

            for g in 0..k {
                let denom: f64 = (0..num_users).map(|u| memberships[u].values()[g]).sum();
                for i in 0..matrix.num_items() as u32 {
                    let numer: f64 = (0..num_users as u32)
                        .filter(|&u| matrix.contains(u, i))
                        .map(|u| memberships[u as usize].values()[g])
                        .sum();
                    let expected = if denom == 0.0 { 0.0 } else { numer / denom };
                    let got = profile.preference(g, i as usize);
                    prop_assert!((got - expected).abs() <= 1e-12);
                    // exact zero rule
                    prop_assert_eq!(got == 0.0, numer == 0.0);
                }
            }

            for u in 0..num_users {
                let scores = score_items(&profile, &memberships[u]).unwrap();
                let m = memberships[u].values();
                for (i, &score) in scores.iter().enumerate() {
                    let direct: f64 =
                        (0..k).map(|g| profile.preference(g, i) * m[g]).sum();
                    prop_assert!((score - direct).abs() <= 1e-12);
                    let bound: f64 = m.iter().sum();
                    prop_assert!(score >= 0.0 && score <= bound + 1e-12);
                }
            }
        }

        /// Rankings are permutations of the non-excluded items, ordered by
        /// descending score with index tie-breaks.
        #[test]
        fn ranking_is_sorted_permutation(
            scores in proptest::collection::vec(0.0f64..1.0, 1..30),
            consumed in proptest::collection::vec(0u32..30, 0..10),
        ) {
            let consumed: Vec<u32> =
                consumed.into_iter().filter(|&c| (c as usize) < scores.len()).collect();
            let ranked = top_n(&scores, &consumed, scores.len());
            let mut expected: Vec<u32> = (0..scores.len() as u32)
                .filter(|i| !consumed.contains(i))
                .collect();
            prop_assert_eq!(ranked.ranking.len(), expected.len());
            expected.sort_by(|&a, &b| {
                scores[b as usize]
                    .partial_cmp(&scores[a as usize])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            prop_assert_eq!(ranked.ranking, expected);
        }
    }
}
