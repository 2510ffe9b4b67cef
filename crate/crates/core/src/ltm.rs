//! The latent tree model: a tree-structured Bayesian network over binary
//! variables with observed leaves and latent internal nodes.
//!
//! Parameters are a marginal distribution for the root and a 2x2
//! row-stochastic conditional table for every other node given its parent;
//! their product defines the joint distribution. Construction never
//! rejects a model; [`LatentTreeModel::validate`] reports violations as
//! data and callers decide what to do with them.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

/// Dense node identifier; the node's position in the model's node list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Observed,
    Latent,
}

/// Binary variable state. After orientation, `S1` is the "has the taste"
/// state for every latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum State {
    S0,
    S1,
}

impl State {
    pub fn index(self) -> usize {
        match self {
            State::S0 => 0,
            State::S1 => 1,
        }
    }

    pub fn from_bool(on: bool) -> Self {
        if on {
            State::S1
        } else {
            State::S0
        }
    }
}

/// Conditional probability table: `cpt[parent_state][child_state]`, each row
/// summing to 1.
pub type Cpt = [[f64; 2]; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    /// Item key for observed nodes, generated group name for latents.
    pub label: String,
    pub parent: Option<NodeId>,
    /// 0 for observed nodes; latents sit strictly above their children.
    pub level: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTreeModel {
    nodes: Vec<Node>,
    root_marginal: [f64; 2],
    /// Aligned with `nodes`; `None` for the root.
    cpts: Vec<Option<Cpt>>,
}

/// A broken model invariant, reported by [`LatentTreeModel::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoRoot,
    MultipleRoots {
        roots: Vec<NodeId>,
    },
    ParentOutOfRange {
        node: NodeId,
    },
    /// The node's parent chain loops instead of reaching a root.
    Cycle {
        node: NodeId,
    },
    ObservedWithChildren {
        node: NodeId,
    },
    LatentWithoutChildren {
        node: NodeId,
    },
    ObservedLevelNonZero {
        node: NodeId,
    },
    LatentLevelZero {
        node: NodeId,
    },
    LevelNotBelowParent {
        node: NodeId,
        level: u32,
        parent_level: u32,
    },
    RootMarginalNotStochastic {
        sum: f64,
    },
    CptRowNotStochastic {
        node: NodeId,
        parent_state: State,
        sum: f64,
    },
    EntryOutOfRange {
        node: Option<NodeId>,
        value: f64,
    },
    MissingCpt {
        node: NodeId,
    },
    RootWithCpt {
        node: NodeId,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoRoot => write!(f, "no root node (every node has a parent)"),
            Violation::MultipleRoots { roots } => {
                write!(f, "multiple roots: ")?;
                for (k, r) in roots.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{r}")?;
                }
                Ok(())
            }
            Violation::ParentOutOfRange { node } => {
                write!(f, "node {node} references a parent outside the model")
            }
            Violation::Cycle { node } => {
                write!(f, "node {node} lies on a parent cycle")
            }
            Violation::ObservedWithChildren { node } => {
                write!(f, "observed node {node} has children")
            }
            Violation::LatentWithoutChildren { node } => {
                write!(f, "latent node {node} is a leaf")
            }
            Violation::ObservedLevelNonZero { node } => {
                write!(f, "observed node {node} has non-zero level")
            }
            Violation::LatentLevelZero { node } => {
                write!(f, "latent node {node} has level 0")
            }
            Violation::LevelNotBelowParent {
                node,
                level,
                parent_level,
            } => {
                write!(
                    f,
                    "node {node} has level {level}, not below its parent's level {parent_level}"
                )
            }
            Violation::RootMarginalNotStochastic { sum } => {
                write!(f, "root marginal sums to {sum}")
            }
            Violation::CptRowNotStochastic {
                node,
                parent_state,
                sum,
            } => {
                write!(
                    f,
                    "cpt row of node {node} for parent state s{} sums to {sum}",
                    parent_state.index()
                )
            }
            Violation::EntryOutOfRange { node, value } => match node {
                Some(n) => write!(f, "node {n} has probability entry {value} outside [0, 1]"),
                None => write!(f, "root marginal entry {value} outside [0, 1]"),
            },
            Violation::MissingCpt { node } => write!(f, "non-root node {node} has no cpt"),
            Violation::RootWithCpt { node } => write!(f, "root node {node} has a cpt"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    /// The assignment does not cover every node.
    AssignmentSize {
        expected: usize,
        got: usize,
    },
    /// Level outside `[1, max_level]`.
    LevelOutOfRange {
        requested: u32,
        max: u32,
    },
    Parse {
        line: usize,
        message: String,
    },
    /// A structural defect hit during evaluation (no root / missing cpt).
    Structure(Violation),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::AssignmentSize { expected, got } => {
                write!(f, "assignment covers {got} nodes, model has {expected}")
            }
            ModelError::LevelOutOfRange { requested, max } => {
                write!(
                    f,
                    "level {requested} out of range; valid levels are 1..={max}"
                )
            }
            ModelError::Parse { line, message } => write!(f, "model line {line}: {message}"),
            ModelError::Structure(v) => write!(f, "invalid model: {v}"),
        }
    }
}

impl core::error::Error for ModelError {}

const FORMAT_TAG: &str = "tastecf-ltm v1";
const STOCHASTIC_TOL: f64 = 1e-9;

impl LatentTreeModel {
    /// Stores the parts as-is; run [`validate`](Self::validate) to check them.
    pub fn new(nodes: Vec<Node>, root_marginal: [f64; 2], cpts: Vec<Option<Cpt>>) -> Self {
        debug_assert_eq!(nodes.len(), cpts.len());
        LatentTreeModel {
            nodes,
            root_marginal,
            cpts,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(k, n)| (NodeId(k as u32), n))
    }

    pub fn root_marginal(&self) -> [f64; 2] {
        self.root_marginal
    }

    pub fn cpt(&self, id: NodeId) -> Option<&Cpt> {
        self.cpts[id.index()].as_ref()
    }

    /// First node without a parent, if any.
    pub fn root(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.parent.is_none())
            .map(|k| NodeId(k as u32))
    }

    pub fn max_level(&self) -> u32 {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    /// Child lists indexed by node; parents pointing outside the model are
    /// ignored.
    pub fn child_lists(&self) -> Vec<Vec<NodeId>> {
        let mut children = vec![Vec::new(); self.nodes.len()];
        for (k, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                if p.index() < self.nodes.len() {
                    children[p.index()].push(NodeId(k as u32));
                }
            }
        }
        children
    }

    /// Checks every model invariant and returns all violations found;
    /// an empty list means the model is valid. Nothing is repaired.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.nodes.len();

        let roots: Vec<NodeId> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, node)| node.parent.is_none())
            .map(|(k, _)| NodeId(k as u32))
            .collect();
        match roots.len() {
            0 => out.push(Violation::NoRoot),
            1 => {}
            _ => out.push(Violation::MultipleRoots {
                roots: roots.clone(),
            }),
        }

        for (k, node) in self.nodes.iter().enumerate() {
            let id = NodeId(k as u32);
            if let Some(p) = node.parent {
                if p.index() >= n {
                    out.push(Violation::ParentOutOfRange { node: id });
                }
            }
        }

        // Walk parent chains; a chain that takes more than n steps without
        // reaching a parentless node loops. Report each cycle once, by its
        // smallest member.
        let mut cycle_members: Vec<u32> = Vec::new();
        for start in 0..n {
            let mut cursor = start;
            let mut steps = 0;
            loop {
                match self.nodes[cursor].parent {
                    None => break,
                    Some(p) if p.index() >= n => break,
                    Some(p) => {
                        cursor = p.index();
                        steps += 1;
                        if steps > n {
                            cycle_members.push(start as u32);
                            break;
                        }
                    }
                }
            }
        }
        if !cycle_members.is_empty() {
            // Members of one cycle all walk into the same loop; report the
            // smallest id among nodes that are on a loop themselves.
            let mut on_loop: Vec<u32> = cycle_members
                .iter()
                .copied()
                .filter(|&k| {
                    let mut cursor = k as usize;
                    for _ in 0..n {
                        match self.nodes[cursor].parent {
                            Some(p) if p.index() < n => cursor = p.index(),
                            _ => return false,
                        }
                        if cursor == k as usize {
                            return true;
                        }
                    }
                    false
                })
                .collect();
            on_loop.sort_unstable();
            let mut reported: Vec<u32> = Vec::new();
            for &k in &on_loop {
                let mut members = vec![k];
                let mut cursor = k as usize;
                loop {
                    cursor = self.nodes[cursor].parent.unwrap().index();
                    if cursor == k as usize {
                        break;
                    }
                    members.push(cursor as u32);
                }
                if members.iter().all(|m| !reported.contains(m)) {
                    reported.extend(&members);
                    out.push(Violation::Cycle { node: NodeId(k) });
                }
            }
        }

        let children = self.child_lists();
        for (k, node) in self.nodes.iter().enumerate() {
            let id = NodeId(k as u32);
            let has_children = !children[k].is_empty();
            match node.kind {
                NodeKind::Observed => {
                    if has_children {
                        out.push(Violation::ObservedWithChildren { node: id });
                    }
                    if node.level != 0 {
                        out.push(Violation::ObservedLevelNonZero { node: id });
                    }
                }
                NodeKind::Latent => {
                    if !has_children {
                        out.push(Violation::LatentWithoutChildren { node: id });
                    }
                    if node.level == 0 {
                        out.push(Violation::LatentLevelZero { node: id });
                    }
                }
            }
            if let Some(p) = node.parent {
                if p.index() < n {
                    let parent_level = self.nodes[p.index()].level;
                    if node.level >= parent_level {
                        out.push(Violation::LevelNotBelowParent {
                            node: id,
                            level: node.level,
                            parent_level,
                        });
                    }
                }
            }
        }

        for &v in &self.root_marginal {
            if !(0.0..=1.0).contains(&v) {
                out.push(Violation::EntryOutOfRange {
                    node: None,
                    value: v,
                });
            }
        }
        let root_sum = self.root_marginal[0] + self.root_marginal[1];
        if math::abs(root_sum - 1.0) > STOCHASTIC_TOL {
            out.push(Violation::RootMarginalNotStochastic { sum: root_sum });
        }

        for (k, node) in self.nodes.iter().enumerate() {
            let id = NodeId(k as u32);
            match (&self.cpts[k], node.parent) {
                (None, Some(_)) => out.push(Violation::MissingCpt { node: id }),
                (Some(_), None) => out.push(Violation::RootWithCpt { node: id }),
                (Some(cpt), Some(_)) => {
                    for (ps, row) in [(State::S0, &cpt[0]), (State::S1, &cpt[1])] {
                        for &v in row.iter() {
                            if !(0.0..=1.0).contains(&v) {
                                out.push(Violation::EntryOutOfRange {
                                    node: Some(id),
                                    value: v,
                                });
                            }
                        }
                        let sum = row[0] + row[1];
                        if math::abs(sum - 1.0) > STOCHASTIC_TOL {
                            out.push(Violation::CptRowNotStochastic {
                                node: id,
                                parent_state: ps,
                                sum,
                            });
                        }
                    }
                }
                (None, None) => {}
            }
        }

        out
    }

    /// Log probability of a full assignment, one state per node in id order.
    /// `-inf` when any factor is zero.
    pub fn joint_log_prob(&self, assignment: &[State]) -> Result<f64, ModelError> {
        if assignment.len() != self.nodes.len() {
            return Err(ModelError::AssignmentSize {
                expected: self.nodes.len(),
                got: assignment.len(),
            });
        }
        let mut total = 0.0;
        for (k, node) in self.nodes.iter().enumerate() {
            let s = assignment[k].index();
            let p = match node.parent {
                None => self.root_marginal[s],
                Some(parent) => {
                    let ps = assignment[parent.index()].index();
                    let cpt = self.cpts[k].as_ref().ok_or(ModelError::Structure(
                        Violation::MissingCpt {
                            node: NodeId(k as u32),
                        },
                    ))?;
                    cpt[ps][s]
                }
            };
            total += math::ln(p);
        }
        Ok(total)
    }

    /// Latent nodes at `level`, ascending by id; this order defines the
    /// group order used everywhere downstream.
    pub fn latents_at_level(&self, level: u32) -> Result<Vec<NodeId>, ModelError> {
        let max = self.max_level();
        if level == 0 || level > max {
            return Err(ModelError::LevelOutOfRange {
                requested: level,
                max,
            });
        }
        Ok(self
            .nodes()
            .filter(|(_, n)| n.kind == NodeKind::Latent && n.level == level)
            .map(|(id, _)| id)
            .collect())
    }

    /// Renders the model as versioned structured text. Probabilities carry 17
    /// significant digits after the leading digit, so parsing them back is
    /// bit-exact; node order is canonical (ascending id).
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(FORMAT_TAG);
        out.push('\n');
        out.push_str(&format!("nodes {}\n", self.nodes.len()));
        for (k, node) in self.nodes.iter().enumerate() {
            let kind = match node.kind {
                NodeKind::Observed => "observed",
                NodeKind::Latent => "latent",
            };
            let parent = match node.parent {
                None => "none".to_string(),
                Some(p) => format!("{}", p.0),
            };
            out.push_str(&format!(
                "node {k} kind={kind} parent={parent} level={} label={}\n",
                node.level, node.label
            ));
        }
        out.push_str(&format!(
            "root {:.17e} {:.17e}\n",
            self.root_marginal[0], self.root_marginal[1]
        ));
        for (k, cpt) in self.cpts.iter().enumerate() {
            if let Some(cpt) = cpt {
                out.push_str(&format!(
                    "cpt {k} {:.17e} {:.17e} {:.17e} {:.17e}\n",
                    cpt[0][0], cpt[0][1], cpt[1][0], cpt[1][1]
                ));
            }
        }
        out
    }

    /// Parses the text produced by [`serialize`](Self::serialize). Structural
    /// invariants are not enforced here; validation is separate.
    pub fn deserialize(input: &str) -> Result<Self, ModelError> {
        let mut lines = input
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim_end_matches('\r')));
        let parse_err = |line: usize, message: String| ModelError::Parse { line, message };

        let (line, tag) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty input".to_string()))?;
        if tag != FORMAT_TAG {
            return Err(parse_err(line, format!("expected header '{FORMAT_TAG}'")));
        }

        let (line, count_line) = lines
            .next()
            .ok_or_else(|| parse_err(2, "missing node count".to_string()))?;
        let count: usize = count_line
            .strip_prefix("nodes ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(line, "expected 'nodes <count>'".to_string()))?;

        let mut nodes = Vec::with_capacity(count);
        for expected in 0..count {
            let (line, text) = lines
                .next()
                .ok_or_else(|| parse_err(expected + 3, "truncated node list".to_string()))?;
            let rest = text
                .strip_prefix("node ")
                .ok_or_else(|| parse_err(line, "expected a 'node' line".to_string()))?;
            let (id_text, rest) = rest
                .split_once(' ')
                .ok_or_else(|| parse_err(line, "malformed node line".to_string()))?;
            let id: usize = id_text
                .parse()
                .map_err(|_| parse_err(line, format!("bad node id '{id_text}'")))?;
            if id != expected {
                return Err(parse_err(
                    line,
                    format!("node id {id}, expected {expected}"),
                ));
            }
            let (kind_text, rest) = rest
                .split_once(' ')
                .ok_or_else(|| parse_err(line, "missing kind field".to_string()))?;
            let kind = match kind_text.strip_prefix("kind=") {
                Some("observed") => NodeKind::Observed,
                Some("latent") => NodeKind::Latent,
                _ => return Err(parse_err(line, format!("bad kind field '{kind_text}'"))),
            };
            let (parent_text, rest) = rest
                .split_once(' ')
                .ok_or_else(|| parse_err(line, "missing parent field".to_string()))?;
            let parent = match parent_text.strip_prefix("parent=") {
                Some("none") => None,
                Some(p) => Some(NodeId(p.parse().map_err(|_| {
                    parse_err(line, format!("bad parent field '{parent_text}'"))
                })?)),
                None => return Err(parse_err(line, format!("bad parent field '{parent_text}'"))),
            };
            let (level_text, rest) = rest
                .split_once(' ')
                .ok_or_else(|| parse_err(line, "missing level field".to_string()))?;
            let level: u32 = level_text
                .strip_prefix("level=")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(line, format!("bad level field '{level_text}'")))?;
            let label = rest
                .strip_prefix("label=")
                .ok_or_else(|| parse_err(line, "missing label field".to_string()))?;
            nodes.push(Node {
                kind,
                label: label.to_string(),
                parent,
                level,
            });
        }

        let (line, root_line) = lines
            .next()
            .ok_or_else(|| parse_err(count + 3, "missing root marginal".to_string()))?;
        let root_fields: Vec<&str> = root_line
            .strip_prefix("root ")
            .ok_or_else(|| parse_err(line, "expected 'root <p0> <p1>'".to_string()))?
            .split(' ')
            .collect();
        if root_fields.len() != 2 {
            return Err(parse_err(
                line,
                "root marginal needs two values".to_string(),
            ));
        }
        let mut root_marginal = [0.0; 2];
        for (slot, text) in root_marginal.iter_mut().zip(&root_fields) {
            *slot = text
                .parse()
                .map_err(|_| parse_err(line, format!("bad probability '{text}'")))?;
        }

        let mut cpts: Vec<Option<Cpt>> = vec![None; count];
        for (line, text) in lines {
            if text.is_empty() {
                continue;
            }
            let rest = text
                .strip_prefix("cpt ")
                .ok_or_else(|| parse_err(line, "expected a 'cpt' line".to_string()))?;
            let fields: Vec<&str> = rest.split(' ').collect();
            if fields.len() != 5 {
                return Err(parse_err(
                    line,
                    "cpt line needs node id and 4 values".to_string(),
                ));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(line, format!("bad node id '{}'", fields[0])))?;
            if id >= count {
                return Err(parse_err(line, format!("cpt for unknown node {id}")));
            }
            if cpts[id].is_some() {
                return Err(parse_err(line, format!("duplicate cpt for node {id}")));
            }
            let mut values = [0.0f64; 4];
            for (slot, text) in values.iter_mut().zip(&fields[1..]) {
                *slot = text
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad probability '{text}'")))?;
            }
            cpts[id] = Some([[values[0], values[1]], [values[2], values[3]]]);
        }

        Ok(LatentTreeModel {
            nodes,
            root_marginal,
            cpts,
        })
    }
}
