//! Exact posterior inference on the tree.
//!
//! Evidence on the observed leaves is absorbed in a two-pass message
//! schedule: a leaves-to-root collect pass followed by a root-to-leaves
//! distribute pass. Messages are renormalized after each node so models with
//! thousands of leaves do not underflow; the evidence log-likelihood
//! accumulates the per-node normalizers.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::FeedbackMatrix;
use crate::ltm::{LatentTreeModel, ModelError, NodeId, NodeKind, State, Violation};
use crate::math;
use crate::recommend::MembershipVector;

/// How observed leaves without an evidence value are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbsentPolicy {
    /// Unmapped leaves are observed in state `s0`: the implicit-feedback
    /// reading where a missing event means "not consumed".
    AsS0,
    /// Unmapped leaves are marginalized out.
    AsMissing,
}

/// Evidence over observed leaves plus the policy for the rest of them.
#[derive(Clone, Debug)]
pub struct Evidence {
    values: BTreeMap<NodeId, State>,
    policy: AbsentPolicy,
}

impl Evidence {
    pub fn new(policy: AbsentPolicy) -> Self {
        Evidence {
            values: BTreeMap::new(),
            policy,
        }
    }

    pub fn with_values(values: BTreeMap<NodeId, State>, policy: AbsentPolicy) -> Self {
        Evidence { values, policy }
    }

    pub fn set(&mut self, node: NodeId, state: State) {
        self.values.insert(node, state);
    }

    pub fn values(&self) -> &BTreeMap<NodeId, State> {
        &self.values
    }

    pub fn policy(&self) -> AbsentPolicy {
        self.policy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InferenceError {
    /// Evidence may only be placed on observed leaves.
    EvidenceOnLatent {
        node: NodeId,
    },
    EvidenceOutOfRange {
        node: NodeId,
    },
    /// The model failed validation; the first violation is carried.
    InvalidModel {
        first: Violation,
        total: usize,
    },
    /// The evidence has probability zero under the model, so posteriors are
    /// undefined.
    ImpossibleEvidence,
    /// The model's observed labels and the matrix item keys do not overlap.
    NoSharedItems,
    Model(ModelError),
}

impl fmt::Display for InferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceError::EvidenceOnLatent { node } => {
                write!(f, "evidence on latent node {node}")
            }
            InferenceError::EvidenceOutOfRange { node } => {
                write!(f, "evidence on unknown node {node}")
            }
            InferenceError::InvalidModel { first, total } => {
                write!(f, "invalid model ({total} violations; first: {first})")
            }
            InferenceError::ImpossibleEvidence => {
                write!(f, "evidence has probability zero under the model")
            }
            InferenceError::NoSharedItems => {
                write!(f, "model and matrix share no items")
            }
            InferenceError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for InferenceError {}

impl From<ModelError> for InferenceError {
    fn from(e: ModelError) -> Self {
        InferenceError::Model(e)
    }
}

/// Precomputed traversal order and child lists; reusable across evidence
/// configurations (and across EM iterations, since only parameters change).
pub(crate) struct TreeSchedule {
    pub(crate) root: usize,
    /// Root-first BFS order; reversed for the collect pass.
    pub(crate) order: Vec<usize>,
    pub(crate) children: Vec<Vec<usize>>,
}

impl TreeSchedule {
    /// Requires a unique root and acyclic parent links; callers validate the
    /// model before building a schedule.
    pub(crate) fn new(model: &LatentTreeModel) -> Result<Self, InferenceError> {
        let n = model.num_nodes();
        let root = model
            .root()
            .ok_or(InferenceError::Model(ModelError::Structure(
                Violation::NoRoot,
            )))?
            .index();
        let mut children = vec![Vec::new(); n];
        for (id, node) in model.nodes() {
            if let Some(p) = node.parent {
                children[p.index()].push(id.index());
            }
        }
        let mut order = Vec::with_capacity(n);
        order.push(root);
        let mut cursor = 0;
        while cursor < order.len() {
            let v = order[cursor];
            cursor += 1;
            order.extend(children[v].iter().copied());
        }
        if order.len() != n {
            return Err(InferenceError::InvalidModel {
                first: Violation::Cycle {
                    node: NodeId((0..n).find(|k| !order.contains(k)).unwrap_or(0) as u32),
                },
                total: 1,
            });
        }
        Ok(TreeSchedule {
            root,
            order,
            children,
        })
    }
}

/// Result of one two-pass propagation.
pub(crate) struct Propagation {
    /// Posterior `[P(s0|e), P(s1|e)]` per node; meaningless if `impossible`.
    pub(crate) node_marginals: Vec<[f64; 2]>,
    /// `edge_marginals[c][ps][cs] = P(parent=ps, c=cs | e)` for non-root `c`.
    pub(crate) edge_marginals: Vec<[[f64; 2]; 2]>,
    pub(crate) log_likelihood: f64,
    pub(crate) impossible: bool,
}

/// Runs collect and distribute passes for leaf evidence given as a dense
/// per-node slice (`None` for latents and unobserved leaves).
pub(crate) fn propagate(
    model: &LatentTreeModel,
    schedule: &TreeSchedule,
    leaf_states: &[Option<State>],
) -> Result<Propagation, InferenceError> {
    let n = model.num_nodes();
    debug_assert_eq!(leaf_states.len(), n);

    let evidence_factor = |v: usize| -> [f64; 2] {
        match leaf_states[v] {
            None => [1.0, 1.0],
            Some(State::S0) => [1.0, 0.0],
            Some(State::S1) => [0.0, 1.0],
        }
    };

    // Collect pass: lambda[v] = evidence_v * prod over children of the
    // message they send upward; to_parent[c](ps) = sum_cs cpt[ps][cs] *
    // lambda[c](cs). Each lambda is renormalized and the normalizers are
    // accumulated into the log-likelihood.
    let mut lambda = vec![[1.0f64; 2]; n];
    let mut to_parent = vec![[0.0f64; 2]; n];
    let mut log_norm = 0.0f64;
    let mut impossible = false;

    for &v in schedule.order.iter().rev() {
        let mut lam = evidence_factor(v);
        for &c in &schedule.children[v] {
            lam[0] *= to_parent[c][0];
            lam[1] *= to_parent[c][1];
        }
        let z = lam[0] + lam[1];
        if z <= 0.0 {
            impossible = true;
            break;
        }
        lam[0] /= z;
        lam[1] /= z;
        log_norm += math::ln(z);
        lambda[v] = lam;
        if v != schedule.root {
            let cpt =
                model
                    .cpt(NodeId(v as u32))
                    .ok_or(InferenceError::Model(ModelError::Structure(
                        Violation::MissingCpt {
                            node: NodeId(v as u32),
                        },
                    )))?;
            for ps in 0..2 {
                to_parent[v][ps] = cpt[ps][0] * lam[0] + cpt[ps][1] * lam[1];
            }
        }
    }

    let root_marginal = model.root_marginal();
    let mut log_likelihood = f64::NEG_INFINITY;
    if !impossible {
        let z_root = root_marginal[0] * lambda[schedule.root][0]
            + root_marginal[1] * lambda[schedule.root][1];
        if z_root <= 0.0 {
            impossible = true;
        } else {
            log_likelihood = math::ln(z_root) + log_norm;
        }
    }
    if impossible {
        return Ok(Propagation {
            node_marginals: vec![[0.0; 2]; n],
            edge_marginals: vec![[[0.0; 2]; 2]; n],
            log_likelihood: f64::NEG_INFINITY,
            impossible: true,
        });
    }

    // Distribute pass: rho[v] is the message a node receives from above
    // (the root marginal for the root). The posterior at v is rho * lambda
    // normalized; the message sent to child c excludes c's own upward
    // contribution, which is recomputed as a product over siblings rather
    // than divided out, so zero messages stay safe.
    let mut rho = vec![[0.0f64; 2]; n];
    rho[schedule.root] = root_marginal;
    let mut node_marginals = vec![[0.0f64; 2]; n];
    let mut edge_marginals = vec![[[0.0f64; 2]; 2]; n];

    for &v in &schedule.order {
        let bel = [rho[v][0] * lambda[v][0], rho[v][1] * lambda[v][1]];
        let z = bel[0] + bel[1];
        debug_assert!(z > 0.0);
        node_marginals[v] = [bel[0] / z, bel[1] / z];

        for &c in &schedule.children[v] {
            let ev = evidence_factor(v);
            let mut pi = [rho[v][0] * ev[0], rho[v][1] * ev[1]];
            for &s in &schedule.children[v] {
                if s != c {
                    pi[0] *= to_parent[s][0];
                    pi[1] *= to_parent[s][1];
                }
            }
            let zp = pi[0] + pi[1];
            debug_assert!(zp > 0.0);
            pi[0] /= zp;
            pi[1] /= zp;

            let cpt = model
                .cpt(NodeId(c as u32))
                .expect("checked in collect pass");
            let mut pair = [[0.0f64; 2]; 2];
            let mut zc = 0.0;
            for (ps, pi_ps) in pi.iter().enumerate() {
                for cs in 0..2 {
                    let w = pi_ps * cpt[ps][cs] * lambda[c][cs];
                    pair[ps][cs] = w;
                    zc += w;
                }
            }
            debug_assert!(zc > 0.0);
            for row in &mut pair {
                for cell in row.iter_mut() {
                    *cell /= zc;
                }
            }
            edge_marginals[c] = pair;
            for cs in 0..2 {
                rho[c][cs] = pi[0] * cpt[0][cs] + pi[1] * cpt[1][cs];
            }
        }
    }

    Ok(Propagation {
        node_marginals,
        edge_marginals,
        log_likelihood,
        impossible: false,
    })
}

fn validated_schedule(model: &LatentTreeModel) -> Result<TreeSchedule, InferenceError> {
    let violations = model.validate();
    if let Some(first) = violations.first() {
        return Err(InferenceError::InvalidModel {
            first: first.clone(),
            total: violations.len(),
        });
    }
    TreeSchedule::new(model)
}

fn leaf_states_from_evidence(
    model: &LatentTreeModel,
    evidence: &Evidence,
) -> Result<Vec<Option<State>>, InferenceError> {
    let n = model.num_nodes();
    let mut leaf_states: Vec<Option<State>> = vec![None; n];
    if evidence.policy() == AbsentPolicy::AsS0 {
        for (id, node) in model.nodes() {
            if node.kind == NodeKind::Observed {
                leaf_states[id.index()] = Some(State::S0);
            }
        }
    }
    for (&node, &state) in evidence.values() {
        if node.index() >= n {
            return Err(InferenceError::EvidenceOutOfRange { node });
        }
        if model.node(node).kind != NodeKind::Observed {
            return Err(InferenceError::EvidenceOnLatent { node });
        }
        leaf_states[node.index()] = Some(state);
    }
    Ok(leaf_states)
}

/// Posterior probability of `s1` for every latent node given the evidence.
///
/// Matches brute-force enumeration over all latent assignments; errors if
/// the evidence has probability zero.
pub fn posteriors(
    model: &LatentTreeModel,
    evidence: &Evidence,
) -> Result<BTreeMap<NodeId, f64>, InferenceError> {
    let schedule = validated_schedule(model)?;
    let leaf_states = leaf_states_from_evidence(model, evidence)?;
    let prop = propagate(model, &schedule, &leaf_states)?;
    if prop.impossible {
        return Err(InferenceError::ImpossibleEvidence);
    }
    Ok(model
        .nodes()
        .filter(|(_, n)| n.kind == NodeKind::Latent)
        .map(|(id, _)| (id, prop.node_marginals[id.index()][1]))
        .collect())
}

/// Log probability of the evidence under the model, marginalizing all
/// latents; `-inf` when the evidence is impossible.
pub fn log_likelihood(model: &LatentTreeModel, evidence: &Evidence) -> Result<f64, InferenceError> {
    let schedule = validated_schedule(model)?;
    let leaf_states = leaf_states_from_evidence(model, evidence)?;
    let prop = propagate(model, &schedule, &leaf_states)?;
    Ok(prop.log_likelihood)
}

/// Per-user membership vectors for the level-`level` latents.
#[derive(Clone, Debug)]
pub struct BatchMemberships {
    /// Level latents in ascending id order; defines the vector order.
    pub group_ids: Vec<NodeId>,
    /// One vector per matrix user, indexed like the matrix.
    pub memberships: Vec<MembershipVector>,
    /// Observed model leaves with no matching matrix item (left unobserved).
    pub unmatched_model_leaves: usize,
    /// Matrix items with no matching observed leaf (ignored as evidence).
    pub unmatched_items: usize,
}

/// Computes `P(Z = s1 | user row)` for every user and every latent at
/// `level`. Model leaves and matrix items are matched by label; the
/// intersection is used and mismatches are counted.
pub fn batch_posteriors(
    model: &LatentTreeModel,
    matrix: &FeedbackMatrix,
    level: u32,
    policy: AbsentPolicy,
) -> Result<BatchMemberships, InferenceError> {
    let schedule = validated_schedule(model)?;
    let group_ids = model.latents_at_level(level)?;

    // label -> node mapping against the matrix item index
    let mut item_to_node: Vec<Option<usize>> = vec![None; matrix.num_items()];
    let mut matched = 0usize;
    let mut unmatched_model_leaves = 0usize;
    for (id, node) in model.nodes() {
        if node.kind != NodeKind::Observed {
            continue;
        }
        match matrix.item_id(&node.label) {
            Some(item) => {
                item_to_node[item as usize] = Some(id.index());
                matched += 1;
            }
            None => unmatched_model_leaves += 1,
        }
    }
    if matched == 0 {
        return Err(InferenceError::NoSharedItems);
    }
    let unmatched_items = matrix.num_items() - matched;

    // Base template: mapped leaves get the policy state, everything else is
    // marginalized; per user, consumed mapped items flip to s1.
    let mut base: Vec<Option<State>> = vec![None; model.num_nodes()];
    if policy == AbsentPolicy::AsS0 {
        for mapped in item_to_node.iter().flatten() {
            base[*mapped] = Some(State::S0);
        }
    }

    let mut memberships = Vec::with_capacity(matrix.num_users());
    let mut leaf_states = base.clone();
    for u in 0..matrix.num_users() as u32 {
        leaf_states.copy_from_slice(&base);
        for &item in matrix.row(u) {
            if let Some(node) = item_to_node[item as usize] {
                leaf_states[node] = Some(State::S1);
            }
        }
        let prop = propagate(model, &schedule, &leaf_states)?;
        if prop.impossible {
            return Err(InferenceError::ImpossibleEvidence);
        }
        memberships.push(MembershipVector::new(
            group_ids
                .iter()
                .map(|id| prop.node_marginals[id.index()][1])
                .collect(),
        ));
    }

    Ok(BatchMemberships {
        group_ids,
        memberships,
        unmatched_model_leaves,
        unmatched_items,
    })
}
