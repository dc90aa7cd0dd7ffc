//! Tree-growing environment: slot bookkeeping, action masks and rewards.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{attribute, CausalModel, RcaConfig};
use crate::error::RlError;
use crate::indicators::{compute_indicators, Indicators};
use crate::metrics::{pr_avg, rca_rank_score};
use crate::pruning::{
    execute, reconnect, route, ActionId, FilteringTree, PruneResult, Route, TreeNode, FILTER_OUT, MAX_TREE_NODES,
    NUM_ACTIONS,
};
use crate::trace::{ComponentId, DependencyGraph, GraphSummary, IncidentCase};

pub const PAD_TOKEN: u8 = NUM_ACTIONS as u8;
pub const SEQ_LEN: usize = MAX_TREE_NODES + 1;

pub type ActionMask = [bool; NUM_ACTIONS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotSide {
    Root,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub parent: Option<usize>,
    pub side: SlotSide,
}

/// Grows a tree one node at a time in level order.
///
/// Open slots form a FIFO queue. A non-FilterOut node opens a left and a
/// right slot. FilterOut placed as the left child of a node that is itself a
/// right child also closes that node's right slot, so a right-hand chain ends
/// with its first FilterOut.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeBuilder {
    nodes: Vec<TreeNode>,
    is_right: Vec<bool>,
    open: VecDeque<Slot>,
}

impl Default for TreeBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl TreeBuilder {
    pub fn new() -> Self {
        TreeBuilder {
            nodes: Vec::new(),
            is_right: Vec::new(),
            open: VecDeque::from([Slot { parent: None, side: SlotSide::Root }]),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_done(&self) -> bool {
        self.open.is_empty() || self.nodes.len() >= MAX_TREE_NODES
    }

    pub fn next_slot(&self) -> Option<Slot> {
        if self.is_done() {
            None
        } else {
            self.open.front().copied()
        }
    }

    pub fn parent_action(&self) -> Option<ActionId> {
        self.next_slot().and_then(|s| s.parent).map(|p| self.nodes[p].action)
    }

    /// Actions in placement order.
    pub fn actions(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.nodes.iter().map(|n| n.action)
    }

    /// Constraint mask for the next slot: FilterOut is barred from the root
    /// and from right slots, and a child may not repeat its parent's action.
    pub fn structural_mask(&self) -> ActionMask {
        let mut mask = [false; NUM_ACTIONS];
        let Some(slot) = self.next_slot() else { return mask };
        mask.iter_mut().for_each(|m| *m = true);
        if slot.side != SlotSide::Left {
            mask[FILTER_OUT.index()] = false;
        }
        if let Some(p) = slot.parent {
            mask[self.nodes[p].action.index()] = false;
        }
        mask
    }

    pub fn place(&mut self, action: ActionId) -> Result<(), RlError> {
        if self.is_done() {
            return Err(RlError::Finished);
        }
        if action.index() >= NUM_ACTIONS || !self.structural_mask()[action.index()] {
            return Err(RlError::IllegalAction { action: action.index() });
        }
        let slot = self.open.pop_front().expect("not done implies an open slot");
        let idx = self.nodes.len();
        self.nodes.push(TreeNode::leaf(action));
        self.is_right.push(slot.side == SlotSide::Right);
        if let Some(p) = slot.parent {
            match slot.side {
                SlotSide::Left => self.nodes[p].left = Some(idx),
                SlotSide::Right => self.nodes[p].right = Some(idx),
                SlotSide::Root => unreachable!("root slot has no parent"),
            }
        }
        if action.is_filter_out() {
            if let Some(p) = slot.parent {
                if self.is_right[p] {
                    let sibling = self.open.pop_front();
                    debug_assert_eq!(sibling, Some(Slot { parent: Some(p), side: SlotSide::Right }));
                }
            }
        } else {
            self.open.push_back(Slot { parent: Some(idx), side: SlotSide::Left });
            self.open.push_back(Slot { parent: Some(idx), side: SlotSide::Right });
        }
        Ok(())
    }

    /// The tree built so far (root at index 0, nodes in level order).
    pub fn tree(&self) -> FilteringTree {
        FilteringTree { nodes: self.nodes.clone(), root: 0 }
    }

    /// Rebuilds a builder by replaying a tree's level-order actions.
    pub fn replay(tree: &FilteringTree) -> Result<Self, RlError> {
        let mut b = TreeBuilder::new();
        for a in tree.bfs_actions()? {
            b.place(a)?;
        }
        Ok(b)
    }
}

/// Mean complexity summary over the cases of an environment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryFeatures {
    pub nodes: f64,
    pub edges: f64,
    pub sparsity: f64,
}

impl SummaryFeatures {
    pub fn mean(summaries: &[GraphSummary]) -> Self {
        let n = summaries.len().max(1) as f64;
        SummaryFeatures {
            nodes: summaries.iter().map(|s| s.nodes as f64).sum::<f64>() / n,
            edges: summaries.iter().map(|s| s.edges as f64).sum::<f64>() / n,
            sparsity: summaries.iter().map(|s| s.sparsity).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    /// Placed actions padded with [`PAD_TOKEN`].
    pub tree_seq: [u8; SEQ_LEN],
    pub graph_summary: SummaryFeatures,
    pub step: usize,
    pub episode: usize,
    pub builder: TreeBuilder,
}

impl EpisodeState {
    pub fn done(&self) -> bool {
        self.builder.is_done()
    }

    /// The last `n` placed actions, oldest first.
    pub fn recent_actions(&self, n: usize) -> &[u8] {
        &self.tree_seq[self.step.saturating_sub(n)..self.step]
    }
}

/// Constraints that hold in every episode.
pub fn legal_action_mask(state: &EpisodeState) -> ActionMask {
    state.builder.structural_mask()
}

/// Probability of forcing FilterOut in a given episode.
pub fn force_probability(base: f64, episode: usize) -> f64 {
    base.powi(episode as i32 + 1)
}

/// [`legal_action_mask`] plus the FilterOut-recency rule: when none of the
/// last four actions was FilterOut and FilterOut is legal here, it becomes
/// the only legal action with probability `base^(episode + 1)`.
pub fn constrained_mask<R: Rng + ?Sized>(state: &EpisodeState, base: f64, rng: &mut R) -> ActionMask {
    let mut mask = legal_action_mask(state);
    let fo = FILTER_OUT.index();
    if mask[fo] && state.step >= 4 && !state.recent_actions(4).contains(&FILTER_OUT.0) {
        let p = force_probability(base, state.episode);
        if rng.random::<f64>() < p {
            mask = [false; NUM_ACTIONS];
            mask[fo] = true;
        }
    }
    mask
}

/// `−(|N| + |E| + |E|/|N|²)`.
pub fn complexity_reward(summary: &GraphSummary) -> Result<f64, RlError> {
    if summary.nodes == 0 {
        return Err(RlError::EmptyGraph);
    }
    let n = summary.nodes as f64;
    let e = summary.edges as f64;
    Ok(-(n + e + e / (n * n)))
}

/// Node and edge counts after executing a (possibly partial) tree, without
/// materialising the pruned graph.
pub fn pruned_summary(
    tree: &FilteringTree,
    graph: &DependencyGraph,
    inds: &Indicators,
) -> Result<(GraphSummary, BTreeSet<ComponentId>), RlError> {
    let mut removed = BTreeSet::new();
    if !tree.is_empty() {
        tree.validate_structure()?;
        for id in graph.components().keys() {
            if id == graph.frontend() {
                continue;
            }
            let ind = inds
                .get(id)
                .ok_or_else(|| crate::error::PruneError::MissingIndicators(id.clone()))?;
            if let Route::Removed { .. } = route(tree, ind)? {
                removed.insert(id.clone());
            }
        }
    }
    let nodes = graph.node_count() - removed.len();
    let edges = if removed.is_empty() { graph.edge_count() } else { reconnect(graph, &removed).len() };
    Ok((GraphSummary::new(nodes, edges), removed))
}

/// `PR@Avg + RankScore` of causal RCA on the pruned graph. RCA failures score
/// 0 and are logged.
pub fn rca_reward(case: &IncidentCase, pruned: &PruneResult, cfg: &RcaConfig) -> f64 {
    let ranking = CausalModel::fit(&pruned.pruned_graph, cfg.min_samples).and_then(|m| attribute(&m, &cfg.shapley));
    match ranking {
        Ok(attr) => {
            let truth = case.root_causes();
            match (pr_avg(&attr.ranking, truth), rca_rank_score(&attr.ranking, truth)) {
                (Ok(a), Ok(b)) => a + b,
                _ => {
                    log::warn!("case {}: no labelled root causes, rca reward 0", case.case_id);
                    0.0
                }
            }
        }
        Err(e) => {
            log::warn!("case {}: rca failed ({e}), reward 0", case.case_id);
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub rca: RcaConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { alpha: 0.01, beta: 1.0, rca: RcaConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EpisodeState,
    pub done: bool,
    /// Mean complexity reward of the partial tree over the cases.
    pub r_com: f64,
}

/// Multi-incident environment. One episode grows one tree that is executed
/// on every case; rewards are case means.
pub struct Environment {
    cases: Vec<IncidentCase>,
    indicators: Vec<Indicators>,
    reward: RewardConfig,
    rca_cache: HashMap<(usize, Vec<ComponentId>), f64>,
}

impl Environment {
    pub fn new(cases: &[IncidentCase], reward: RewardConfig) -> Result<Self, RlError> {
        if cases.is_empty() {
            return Err(RlError::NoCases);
        }
        if let Some(c) = cases.iter().find(|c| c.root_causes().is_empty()) {
            return Err(RlError::Unlabelled(c.case_id.clone()));
        }
        Ok(Environment {
            indicators: cases.iter().map(|c| compute_indicators(&c.graph)).collect(),
            cases: cases.to_vec(),
            reward,
            rca_cache: HashMap::new(),
        })
    }

    pub fn cases(&self) -> &[IncidentCase] {
        &self.cases
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    fn summaries(&self, tree: &FilteringTree) -> Result<Vec<GraphSummary>, RlError> {
        self.cases
            .iter()
            .zip(&self.indicators)
            .map(|(c, i)| pruned_summary(tree, &c.graph, i).map(|(s, _)| s))
            .collect()
    }

    pub fn reset(&self, episode: usize) -> EpisodeState {
        let summaries: Vec<GraphSummary> = self.cases.iter().map(|c| c.graph.summary()).collect();
        EpisodeState {
            tree_seq: [PAD_TOKEN; SEQ_LEN],
            graph_summary: SummaryFeatures::mean(&summaries),
            step: 0,
            episode,
            builder: TreeBuilder::new(),
        }
    }

    pub fn step(&self, state: &EpisodeState, action: ActionId) -> Result<StepOutcome, RlError> {
        let mut next = state.clone();
        next.builder.place(action)?;
        next.tree_seq[state.step] = action.0;
        next.step += 1;
        let summaries = self.summaries(&next.builder.tree())?;
        let mut r_com = 0.0;
        for s in &summaries {
            r_com += complexity_reward(s)?;
        }
        r_com /= summaries.len() as f64;
        next.graph_summary = SummaryFeatures::mean(&summaries);
        Ok(StepOutcome { done: next.done(), state: next, r_com })
    }

    /// Mean RCA reward of a finished tree, memoised on the kept sets.
    pub fn rca_reward(&mut self, tree: &FilteringTree) -> Result<f64, RlError> {
        let mut total = 0.0;
        for i in 0..self.cases.len() {
            let res = execute(tree, &self.cases[i].graph, &self.indicators[i])?;
            let key = (i, res.kept.iter().cloned().collect::<Vec<_>>());
            let r = match self.rca_cache.get(&key) {
                Some(r) => *r,
                None => {
                    let r = rca_reward(&self.cases[i], &res, &self.reward.rca);
                    self.rca_cache.insert(key, r);
                    r
                }
            };
            total += r;
        }
        Ok(total / self.cases.len() as f64)
    }

    /// [`evaluate_policy`] on this environment's cases, sharing its caches.
    pub fn evaluate(&mut self, tree: &FilteringTree) -> Result<f64, RlError> {
        tree.validate()?;
        let mut r_com = 0.0;
        for k in 1..=tree.len() {
            let summaries = self.summaries(&tree.bfs_prefix(k)?)?;
            for s in &summaries {
                r_com += complexity_reward(s)? / summaries.len() as f64;
            }
        }
        Ok(self.reward.alpha * r_com + self.reward.beta * self.rca_reward(tree)?)
    }
}

/// Average episodic reward of a fixed tree: per case, the complexity
/// rewards of each level-order prefix weighted by alpha, plus beta times
/// the RCA reward of the full tree; then the mean over cases.
pub fn evaluate_policy(tree: &FilteringTree, cases: &[IncidentCase], cfg: &RewardConfig) -> Result<f64, RlError> {
    if cases.is_empty() {
        return Err(RlError::NoCases);
    }
    tree.validate()?;
    let mut total = 0.0;
    for case in cases {
        let inds = compute_indicators(&case.graph);
        let mut r_com = 0.0;
        for k in 1..=tree.len() {
            let (s, _) = pruned_summary(&tree.bfs_prefix(k)?, &case.graph, &inds)?;
            r_com += complexity_reward(&s)?;
        }
        let pruned = execute(tree, &case.graph, &inds)?;
        total += cfg.alpha * r_com + cfg.beta * rca_reward(case, &pruned, &cfg.rca);
    }
    Ok(total / cases.len() as f64)
}
