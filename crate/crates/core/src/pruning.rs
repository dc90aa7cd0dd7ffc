//! Pruning actions, filtering trees, and tree execution against a dependency
//! graph (with reconnection of pruned nodes' callers to their callees).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PruneError, TreeError};
use crate::indicators::{IndicatorVector, Indicators, Metric};
use crate::trace::{ComponentId, DependencyGraph};

pub const NUM_ACTIONS: usize = 36;
pub const FILTER_OUT: ActionId = ActionId(35);
pub const MIN_TREE_NODES: usize = 2;
pub const MAX_TREE_NODES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    AvgExclusiveLatency,
    MaxExclusiveLatency,
    AvgInclusiveLatency,
    NormalizedCount,
    OverHead,
    RankScore,
    RootTargetCorrelation,
    FilterOut,
}

impl ActionKind {
    pub fn metric(self) -> Option<Metric> {
        Some(match self {
            ActionKind::AvgExclusiveLatency => Metric::AvgExl,
            ActionKind::MaxExclusiveLatency => Metric::MaxExl,
            ActionKind::AvgInclusiveLatency => Metric::AvgInl,
            ActionKind::NormalizedCount => Metric::NormalizeCount,
            ActionKind::OverHead => Metric::Overhead,
            ActionKind::RankScore => Metric::AnomalyRankScore,
            ActionKind::RootTargetCorrelation => Metric::RootTargetCorr,
            ActionKind::FilterOut => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum Threshold {
    /// Percentile level in `[0, 1]`, compared against the percentile rank.
    Percentile(f64),
    /// Raw value in the metric's unit (ms for latencies).
    Absolute(f64),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningAction {
    pub kind: ActionKind,
    pub threshold: Threshold,
}

impl fmt::Display for PruningAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.threshold {
            Threshold::Percentile(p) => write!(f, "{:?}>=P{}", self.kind, (p * 100.0).round()),
            Threshold::Absolute(v) if self.kind == ActionKind::MaxExclusiveLatency => {
                write!(f, "{:?}>={}s", self.kind, v / 1000.0)
            }
            Threshold::Absolute(v) => write!(f, "{:?}>={}", self.kind, v),
            Threshold::None => write!(f, "{:?}", self.kind),
        }
    }
}

/// Index into [`action_vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u8);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_filter_out(self) -> bool {
        self == FILTER_OUT
    }

    pub fn action(self) -> PruningAction {
        VOCABULARY[self.index()]
    }

    pub fn from_index(i: usize) -> Result<Self, TreeError> {
        if i < NUM_ACTIONS {
            Ok(ActionId(i as u8))
        } else {
            Err(TreeError::UnknownAction(i as i64))
        }
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} {}", self.0, self.action())
    }
}

const fn pct(kind: ActionKind, p: f64) -> PruningAction {
    PruningAction { kind, threshold: Threshold::Percentile(p) }
}

const fn abs(kind: ActionKind, v: f64) -> PruningAction {
    PruningAction { kind, threshold: Threshold::Absolute(v) }
}

use ActionKind::*;

/// Row-major over the action pool, FilterOut last.
static VOCABULARY: [PruningAction; NUM_ACTIONS] = [
    pct(AvgExclusiveLatency, 0.80),
    pct(AvgExclusiveLatency, 0.85),
    pct(AvgExclusiveLatency, 0.90),
    pct(AvgExclusiveLatency, 0.95),
    pct(AvgExclusiveLatency, 0.99),
    // thresholds of 0.01 s .. 1 s, held in ms
    abs(MaxExclusiveLatency, 10.0),
    abs(MaxExclusiveLatency, 50.0),
    abs(MaxExclusiveLatency, 100.0),
    abs(MaxExclusiveLatency, 500.0),
    abs(MaxExclusiveLatency, 1000.0),
    pct(AvgInclusiveLatency, 0.80),
    pct(AvgInclusiveLatency, 0.85),
    pct(AvgInclusiveLatency, 0.90),
    pct(AvgInclusiveLatency, 0.95),
    pct(AvgInclusiveLatency, 0.99),
    pct(NormalizedCount, 0.50),
    pct(NormalizedCount, 0.65),
    pct(NormalizedCount, 0.70),
    pct(NormalizedCount, 0.80),
    pct(NormalizedCount, 0.90),
    pct(OverHead, 0.80),
    pct(OverHead, 0.85),
    pct(OverHead, 0.90),
    pct(OverHead, 0.95),
    pct(OverHead, 0.99),
    pct(RankScore, 0.80),
    pct(RankScore, 0.85),
    pct(RankScore, 0.90),
    pct(RankScore, 0.95),
    pct(RankScore, 0.99),
    abs(RootTargetCorrelation, 0.1),
    abs(RootTargetCorrelation, 0.3),
    abs(RootTargetCorrelation, 0.5),
    abs(RootTargetCorrelation, 0.7),
    abs(RootTargetCorrelation, 0.9),
    PruningAction { kind: FilterOut, threshold: Threshold::None },
];

pub fn action_vocabulary() -> &'static [PruningAction; NUM_ACTIONS] {
    &VOCABULARY
}

/// Whether a component passes an action's threshold (routes right).
/// A missing metric never passes.
pub fn satisfies(action: &PruningAction, ind: &IndicatorVector) -> Result<bool, PruneError> {
    let metric = action.kind.metric().ok_or(PruneError::FilterOutTested)?;
    Ok(match action.threshold {
        Threshold::Percentile(level) => ind
            .percentile_rank
            .get(&metric)
            .is_some_and(|r| *r >= level),
        Threshold::Absolute(t) => ind.value(metric).is_some_and(|v| v >= t),
        Threshold::None => return Err(PruneError::FilterOutTested),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub action: ActionId,
    pub left: Option<usize>,
    pub right: Option<usize>,
}

impl TreeNode {
    pub fn leaf(action: ActionId) -> Self {
        TreeNode { action, left: None, right: None }
    }
}

/// Binary tree of pruning actions. Components failing a node's threshold go
/// left, passing components go right; FilterOut leaves remove what reaches
/// them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteringTree {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
}

/// One slot of a breadth-first serialization; `None` marks an absent child.
pub type BfsToken = Option<ActionId>;

impl FilteringTree {
    /// Builds and fully validates a tree.
    pub fn new(nodes: Vec<TreeNode>, root: usize) -> Result<Self, TreeError> {
        let t = FilteringTree { nodes, root };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node indices in breadth-first order, after checking that the index
    /// links form a single tree rooted at `root`.
    fn bfs_order(&self) -> Result<Vec<usize>, TreeError> {
        let n = self.nodes.len();
        if self.root >= n {
            return Err(TreeError::BadIndex(self.root));
        }
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([self.root]);
        seen[self.root] = true;
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for c in [self.nodes[i].left, self.nodes[i].right].into_iter().flatten() {
                if c >= n {
                    return Err(TreeError::BadIndex(c));
                }
                if seen[c] {
                    return Err(TreeError::NotATree(c));
                }
                seen[c] = true;
                queue.push_back(c);
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(TreeError::NotATree(orphan));
        }
        Ok(order)
    }

    /// Structural checks only: links form a tree and every node satisfies
    /// the FilterOut and parent-duplicate rules. Size bounds are not checked.
    pub fn validate_structure(&self) -> Result<(), TreeError> {
        self.bfs_order()?;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.action.index() >= NUM_ACTIONS {
                return Err(TreeError::UnknownAction(node.action.0 as i64));
            }
            if node.action.is_filter_out() && (node.left.is_some() || node.right.is_some()) {
                return Err(TreeError::FilterOutHasChildren(i));
            }
            if let Some(r) = node.right {
                if self.nodes[r].action.is_filter_out() {
                    return Err(TreeError::FilterOutRight(r));
                }
            }
            for c in [node.left, node.right].into_iter().flatten() {
                if self.nodes[c].action == node.action {
                    return Err(TreeError::DuplicateOfParent { parent: i, child: c });
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        if !(MIN_TREE_NODES..=MAX_TREE_NODES).contains(&self.nodes.len()) {
            return Err(TreeError::Size(self.nodes.len()));
        }
        self.validate_structure()
    }

    /// Level-order serialization. Each non-FilterOut node contributes two
    /// child slots (`None` when absent); FilterOut leaves contribute none.
    /// Trailing `None`s are trimmed.
    pub fn serialize_bfs(&self) -> Result<Vec<BfsToken>, TreeError> {
        self.validate()?;
        let mut out = vec![Some(self.nodes[self.root].action)];
        let mut queue = VecDeque::from([self.root]);
        while let Some(i) = queue.pop_front() {
            let node = self.nodes[i];
            if node.action.is_filter_out() {
                continue;
            }
            for c in [node.left, node.right] {
                match c {
                    Some(c) => {
                        out.push(Some(self.nodes[c].action));
                        queue.push_back(c);
                    }
                    None => out.push(None),
                }
            }
        }
        while out.last() == Some(&None) {
            out.pop();
        }
        Ok(out)
    }

    /// Inverse of [`serialize_bfs`](Self::serialize_bfs). The result is in
    /// canonical form: nodes stored in BFS order with the root at index 0.
    pub fn deserialize_bfs(seq: &[BfsToken]) -> Result<Self, TreeError> {
        let Some(Some(root_action)) = seq.first() else {
            return Err(TreeError::BadSequence("sequence must start with the root action".into()));
        };
        let mut nodes = vec![TreeNode::leaf(*root_action)];
        let mut queue = VecDeque::from([0usize]);
        let mut pos = 1;
        while let Some(i) = queue.pop_front() {
            if nodes[i].action.is_filter_out() {
                continue;
            }
            for side in 0..2 {
                let token = seq.get(pos).copied().flatten();
                pos += 1;
                if let Some(action) = token {
                    let idx = nodes.len();
                    nodes.push(TreeNode::leaf(action));
                    if side == 0 {
                        nodes[i].left = Some(idx);
                    } else {
                        nodes[i].right = Some(idx);
                    }
                    queue.push_back(idx);
                }
            }
        }
        if pos < seq.len() {
            return Err(TreeError::BadSequence(format!(
                "{} trailing tokens after the last slot",
                seq.len() - pos
            )));
        }
        FilteringTree::new(nodes, 0)
    }

    /// Canonical form (BFS node order, root at 0).
    pub fn canonical(&self) -> Result<Self, TreeError> {
        FilteringTree::deserialize_bfs(&self.serialize_bfs()?)
    }

    /// Node actions in breadth-first order.
    pub fn bfs_actions(&self) -> Result<Vec<ActionId>, TreeError> {
        Ok(self.bfs_order()?.into_iter().map(|i| self.nodes[i].action).collect())
    }

    /// The tree formed by the first `k` nodes in BFS order (always connected).
    pub fn bfs_prefix(&self, k: usize) -> Result<FilteringTree, TreeError> {
        let order = self.bfs_order()?;
        let k = k.min(order.len());
        let mut new_index = vec![None; self.nodes.len()];
        for (pos, &old) in order[..k].iter().enumerate() {
            new_index[old] = Some(pos);
        }
        let nodes = order[..k]
            .iter()
            .map(|&old| {
                let n = self.nodes[old];
                TreeNode {
                    action: n.action,
                    left: n.left.and_then(|c| new_index[c]),
                    right: n.right.and_then(|c| new_index[c]),
                }
            })
            .collect();
        Ok(FilteringTree { nodes, root: 0 })
    }

    /// Human-readable indented rendering.
    pub fn render(&self) -> String {
        fn walk(t: &FilteringTree, i: usize, depth: usize, label: &str, out: &mut String) {
            let node = t.nodes[i];
            out.push_str(&format!("{}{label}{}\n", "  ".repeat(depth), node.action));
            if let Some(l) = node.left {
                walk(t, l, depth + 1, "fail: ", out);
            }
            if let Some(r) = node.right {
                walk(t, r, depth + 1, "pass: ", out);
            }
        }
        let mut out = String::new();
        if self.root < self.nodes.len() {
            walk(self, self.root, 0, "", &mut out);
        }
        out
    }
}

/// The on-disk tree form: either the node list or a BFS token sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeFile {
    Nodes(FilteringTree),
    Bfs(Vec<BfsToken>),
}

impl TreeFile {
    pub fn into_tree(self) -> Result<FilteringTree, TreeError> {
        match self {
            TreeFile::Nodes(t) => {
                t.validate()?;
                Ok(t)
            }
            TreeFile::Bfs(seq) => FilteringTree::deserialize_bfs(&seq),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub kept: BTreeSet<ComponentId>,
    pub removed: BTreeSet<ComponentId>,
    pub pruned_graph: DependencyGraph,
    /// Components removed by each FilterOut leaf (node index → count).
    pub per_leaf_removed: BTreeMap<usize, usize>,
}

/// Where a component ends up after routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Removed { leaf: usize },
    Kept,
}

/// Routes one component from the root: right when it satisfies the node's
/// action, left otherwise, until a FilterOut leaf or a missing child.
pub fn route(tree: &FilteringTree, ind: &IndicatorVector) -> Result<Route, PruneError> {
    let mut cur = tree.root;
    loop {
        let node = tree.nodes[cur];
        if node.action.is_filter_out() {
            return Ok(Route::Removed { leaf: cur });
        }
        let next = if satisfies(&node.action.action(), ind)? {
            node.right
        } else {
            node.left
        };
        match next {
            Some(n) => cur = n,
            None => return Ok(Route::Kept),
        }
    }
}

/// Executes a fully valid tree.
pub fn execute(
    tree: &FilteringTree,
    graph: &DependencyGraph,
    inds: &Indicators,
) -> Result<PruneResult, PruneError> {
    tree.validate()?;
    execute_partial(tree, graph, inds)
}

/// Executes a tree that only needs to be structurally sound; used for the
/// partial trees grown during an episode.
pub fn execute_partial(
    tree: &FilteringTree,
    graph: &DependencyGraph,
    inds: &Indicators,
) -> Result<PruneResult, PruneError> {
    tree.validate_structure()?;
    let mut kept = BTreeSet::new();
    let mut removed = BTreeSet::new();
    let mut per_leaf_removed = BTreeMap::new();
    for id in graph.components().keys() {
        if id == graph.frontend() {
            kept.insert(id.clone());
            continue;
        }
        let ind = inds
            .get(id)
            .ok_or_else(|| PruneError::MissingIndicators(id.clone()))?;
        match route(tree, ind)? {
            Route::Kept => {
                kept.insert(id.clone());
            }
            Route::Removed { leaf } => {
                removed.insert(id.clone());
                *per_leaf_removed.entry(leaf).or_insert(0) += 1;
            }
        }
    }
    let pruned_graph = if removed.is_empty() {
        graph.clone()
    } else {
        graph.restricted(&kept, reconnect(graph, &removed))?
    };
    Ok(PruneResult {
        kept,
        removed,
        pruned_graph,
        per_leaf_removed,
    })
}

/// Edges among kept nodes: `x → y` whenever the original graph has a path
/// from `x` to `y` whose interior nodes were all removed.
pub fn reconnect(
    graph: &DependencyGraph,
    removed: &BTreeSet<ComponentId>,
) -> BTreeSet<(ComponentId, ComponentId)> {
    let mut edges = BTreeSet::new();
    for x in graph.components().keys().filter(|id| !removed.contains(*id)) {
        let mut seen: BTreeSet<&ComponentId> = BTreeSet::new();
        let mut stack: Vec<&ComponentId> = graph.children(x).collect();
        while let Some(y) = stack.pop() {
            if !seen.insert(y) {
                continue;
            }
            if removed.contains(y) {
                stack.extend(graph.children(y));
            } else {
                edges.insert((x.clone(), y.clone()));
            }
        }
    }
    edges
}
