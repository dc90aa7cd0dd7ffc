#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use tracediag_core::causal::{diagnose, simulate_frontend, CausalModel, Mechanism, NodeMechanisms};
use tracediag_core::indicators::{compute_indicators, Indicators};
use tracediag_core::ingest::Trace;
use tracediag_core::pruning::{satisfies, ActionId, FilteringTree, TreeNode, FILTER_OUT, MAX_TREE_NODES, NUM_ACTIONS};
use tracediag_core::rl::RewardConfig;
use tracediag_core::simgen::GenConfig;
use tracediag_core::trace::{
    ComponentId, ComponentStats, DependencyGraph, IncidentCase, Interval, SpanRecord, TimeSeries, TraceTotals, Window, WindowPair, WindowStats,
    DEFAULT_BUCKET_MS,
};

pub fn id(s: &str) -> ComponentId {
    ComponentId::new(s)
}

pub fn ids(xs: &[&str]) -> BTreeSet<ComponentId> {
    xs.iter().map(|x| id(x)).collect()
}

pub fn windows(buckets: usize) -> WindowPair {
    let split = buckets as i64 * DEFAULT_BUCKET_MS;
    WindowPair::new(Interval::new(0, split), Interval::new(split, 2 * split)).unwrap()
}

/// Component with fully observed series.
pub fn stats(name: &str, base_inl: &[f64], base_exl: &[f64], alert_inl: &[f64], alert_exl: &[f64]) -> ComponentStats {
    let w = windows(base_inl.len());
    let ws = |start, inl: &[f64], exl: &[f64]| WindowStats {
        inl: TimeSeries::from_values(start, DEFAULT_BUCKET_MS, inl),
        exl: TimeSeries::from_values(start, DEFAULT_BUCKET_MS, exl),
        trace_occurrences: inl.len() as u64,
    };
    ComponentStats {
        component_id: id(name),
        base: ws(w.base.start_ms, base_inl, base_exl),
        alert: ws(w.alert.start_ms, alert_inl, alert_exl),
    }
}

pub fn graph_from(components: Vec<ComponentStats>, edges: &[(&str, &str)], frontend: &str) -> DependencyGraph {
    let n = components[0].base.inl.len() as u64;
    DependencyGraph::new(
        components,
        edges.iter().map(|(a, b)| (id(a), id(b))),
        id(frontend),
        windows(n as usize),
        TraceTotals { base: n, alert: n },
    )
    .unwrap()
}

pub fn node_name(i: usize) -> String {
    if i == 0 {
        "frontend".into()
    } else {
        format!("n{i:02}")
    }
}

/// Random DAG rooted at `frontend` (node 0) with random series. Every node
/// has a parent of smaller index; extra forward edges are added with
/// probability `extra`.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, buckets: usize, extra: f64) -> DependencyGraph {
    let mut edges = BTreeSet::new();
    for j in 1..n {
        edges.insert((rng.random_range(0..j), j));
        for i in 0..j {
            if rng.random::<f64>() < extra {
                edges.insert((i, j));
            }
        }
    }
    let mut series = |scale: f64| -> Vec<f64> { (0..buckets).map(|_| scale * rng.random_range(0.5..1.5f64)).collect() };
    let components = (0..n)
        .map(|i| {
            let scale = 1.0 + i as f64;
            let (bi, be, ai, ae) = (series(scale * 3.0), series(scale), series(scale * 3.5), series(scale * 1.2));
            stats(&node_name(i), &bi, &be, &ai, &ae)
        })
        .collect::<Vec<_>>();
    DependencyGraph::new(
        components,
        edges.iter().map(|&(a, b)| (id(&node_name(a)), id(&node_name(b)))),
        id("frontend"),
        windows(buckets),
        TraceTotals { base: buckets as u64, alert: buckets as u64 },
    )
    .unwrap()
}

/// Nodes reachable from `from` along `edges` (excluding `from` unless on a cycle).
pub fn reachable(edges: &BTreeSet<(ComponentId, ComponentId)>, from: &ComponentId) -> BTreeSet<ComponentId> {
    let mut adj: BTreeMap<&ComponentId, Vec<&ComponentId>> = BTreeMap::new();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
    }
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<&ComponentId> = VecDeque::from([from]);
    while let Some(x) = queue.pop_front() {
        for &y in adj.get(x).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(y.clone()) {
                queue.push_back(y);
            }
        }
    }
    seen
}

fn random_action<R: Rng>(rng: &mut R, parent: Option<ActionId>, allow_fo: bool, fo_bias: f64) -> ActionId {
    if allow_fo && rng.random::<f64>() < fo_bias {
        return FILTER_OUT;
    }
    loop {
        let a = ActionId(rng.random_range(0..NUM_ACTIONS as u8 - 1));
        if Some(a) != parent {
            return a;
        }
    }
}

/// A random tree satisfying every structural rule, grown by filling random
/// open slots. Node indices follow insertion order, not BFS order.
pub fn random_tree<R: Rng>(rng: &mut R, max_nodes: usize) -> FilteringTree {
    let target = rng.random_range(2..=max_nodes.min(MAX_TREE_NODES));
    let mut nodes = vec![TreeNode::leaf(random_action(rng, None, false, 0.0))];
    let mut open: Vec<(usize, bool)> = vec![(0, false), (0, true)];
    while nodes.len() < target && !open.is_empty() {
        let (parent, right) = open.swap_remove(rng.random_range(0..open.len()));
        let a = random_action(rng, Some(nodes[parent].action), !right, 0.35);
        let idx = nodes.len();
        nodes.push(TreeNode::leaf(a));
        if right {
            nodes[parent].right = Some(idx);
        } else {
            nodes[parent].left = Some(idx);
        }
        if !a.is_filter_out() {
            open.push((idx, false));
            open.push((idx, true));
        }
    }
    FilteringTree::new(nodes, 0).unwrap()
}

/// The same tree with node indices permuted.
pub fn relabel<R: Rng>(tree: &FilteringTree, rng: &mut R) -> FilteringTree {
    let n = tree.nodes.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut nodes = vec![TreeNode::leaf(FILTER_OUT); n];
    for (old, node) in tree.nodes.iter().enumerate() {
        nodes[perm[old]] = TreeNode {
            action: node.action,
            left: node.left.map(|c| perm[c]),
            right: node.right.map(|c| perm[c]),
        };
    }
    FilteringTree { nodes, root: perm[tree.root] }
}

/// Structural equality that ignores index layout.
pub fn same_tree(a: &FilteringTree, b: &FilteringTree) -> bool {
    fn walk(a: &FilteringTree, i: Option<usize>, b: &FilteringTree, j: Option<usize>) -> bool {
        match (i, j) {
            (None, None) => true,
            (Some(i), Some(j)) => {
                let (x, y) = (a.nodes[i], b.nodes[j]);
                x.action == y.action && walk(a, x.left, b, y.left) && walk(a, x.right, b, y.right)
            }
            _ => false,
        }
    }
    a.nodes.len() == b.nodes.len() && walk(a, Some(a.root), b, Some(b.root))
}

/// Independent constraint check for emitted trees.
pub fn tree_violations(t: &FilteringTree) -> Vec<String> {
    let mut out = Vec::new();
    if !(2..=30).contains(&t.nodes.len()) {
        out.push(format!("size {}", t.nodes.len()));
    }
    let mut indegree = vec![0; t.nodes.len()];
    for (i, n) in t.nodes.iter().enumerate() {
        if n.action.is_filter_out() && (n.left.is_some() || n.right.is_some()) {
            out.push(format!("FilterOut {i} has children"));
        }
        for (c, right) in [(n.left, false), (n.right, true)] {
            let Some(c) = c else { continue };
            indegree[c] += 1;
            if right && t.nodes[c].action.is_filter_out() {
                out.push(format!("FilterOut {c} is a right child"));
            }
            if t.nodes[c].action == n.action {
                out.push(format!("{c} repeats its parent's action"));
            }
        }
    }
    if t.nodes[t.root].action.is_filter_out() {
        out.push("FilterOut root".into());
    }
    for (i, d) in indegree.iter().enumerate() {
        let expect = if i == t.root { 0 } else { 1 };
        if *d != expect {
            out.push(format!("node {i} has {d} parents"));
        }
    }
    out
}

/// A generator config small enough for quick tests.
pub fn small_gen(seed: u64) -> GenConfig {
    GenConfig { n_components: 40, base_buckets: 24, alert_buckets: 24, traces_per_bucket: 10, seed, ..Default::default() }
}

/// The running topology: frontend→A, frontend→B, B→C, C→F, B→E, E→F.
pub const RUNNING_EDGES: [(&str, &str); 6] =
    [("frontend", "A"), ("frontend", "B"), ("B", "C"), ("C", "F"), ("B", "E"), ("E", "F")];

/// `n` traces over the running topology with start times spread over both
/// windows. Each call is made with probability `p`; exclusive latency is
/// uniform on 2..12 ms, plus `surge` ms for the listed components in the
/// alert window.
pub fn running_traces<R: Rng>(rng: &mut R, w: &WindowPair, n: usize, p: f64, surge: &[(&str, i64)]) -> Vec<Trace> {
    struct Gen<'a, R> {
        rng: &'a mut R,
        p: f64,
        surge: &'a [(&'a str, i64)],
        alert: bool,
        spans: Vec<SpanRecord>,
    }
    impl<R: Rng> Gen<'_, R> {
        fn visit(&mut self, tid: &str, name: &str, parent: Option<&str>, start: i64) -> i64 {
            let slot = self.spans.len();
            self.spans.push(SpanRecord::new(tid, name, parent, start, start));
            let mut exl = self.rng.random_range(2..12);
            if self.alert {
                exl += self.surge.iter().filter(|(c, _)| *c == name).map(|(_, s)| s).sum::<i64>();
            }
            let pre = exl / 2;
            let mut cursor = start + pre;
            for (a, b) in RUNNING_EDGES {
                if a == name && self.rng.random::<f64>() < self.p {
                    cursor = self.visit(tid, b, Some(name), cursor);
                }
            }
            cursor += exl - pre;
            self.spans[slot].exit_time = cursor;
            cursor
        }
    }
    let mut g = Gen { rng, p, surge, alert: false, spans: Vec::new() };
    (0..n)
        .map(|i| {
            let tid = format!("t{i:06}");
            let start = g.rng.random_range(w.base.start_ms..w.alert.end_ms - 10_000);
            g.alert = w.alert.contains(start);
            g.spans = Vec::new();
            g.visit(&tid, "frontend", None, start);
            Trace { trace_id: tid, spans: std::mem::take(&mut g.spans) }
        })
        .collect()
}

pub fn mech(coefficient: f64, residuals: Vec<f64>) -> Mechanism {
    Mechanism { coefficient, residuals, fallback: false }
}

pub fn model_ids(n: usize) -> Vec<ComponentId> {
    (0..n).map(|i| id(&node_name(i))).collect()
}

/// Random linear model on `n` nodes with node 0 as the frontend. Every other
/// node feeds at least one node of smaller index. Returns the model and the
/// nodes whose base and alert mechanisms are identical.
pub fn random_causal_model<R: Rng>(rng: &mut R, n: usize, p_null: f64) -> (CausalModel, Vec<usize>) {
    let mut causes = vec![Vec::new(); n];
    for k in 1..n {
        causes[rng.random_range(0..k)].push(k);
        for c in causes.iter_mut().take(k) {
            if !c.contains(&k) && rng.random::<f64>() < 0.25 {
                c.push(k);
            }
        }
    }
    let mut nulls = Vec::new();
    let mechanisms = (0..n)
        .map(|j| {
            let c = if causes[j].is_empty() { 0.0 } else { rng.random_range(0.3..1.2) };
            let mu = rng.random_range(5.0..50.0);
            let sd = rng.random_range(0.5..5.0);
            let base: Vec<f64> = (0..40).map(|_| mu + sd * rng.random_range(-1.7..1.7)).collect();
            let alert = if rng.random::<f64>() < p_null {
                nulls.push(j);
                mech(c, base.clone())
            } else {
                let shift = rng.random_range(-5.0..30.0);
                let spread = rng.random_range(0.5..2.0);
                let c2 = if causes[j].is_empty() { 0.0 } else { c * rng.random_range(0.8..1.5) };
                mech(c2, base.iter().map(|x| mu + shift + spread * (x - mu)).collect())
            };
            NodeMechanisms { base: mech(c, base), alert }
        })
        .collect();
    (CausalModel::from_parts(model_ids(n), causes, mechanisms, 0).unwrap(), nulls)
}

/// Frontend median with the nodes in `mask` on alert mechanisms.
pub fn coalition_median(model: &CausalModel, mask: usize, n_samples: usize, seed: u64) -> f64 {
    let assign: BTreeMap<ComponentId, Window> = model
        .ids()
        .iter()
        .enumerate()
        .map(|(j, id)| (id.clone(), if mask & (1 << j) != 0 { Window::Alert } else { Window::Base }))
        .collect();
    let mut xs = simulate_frontend(model, &assign, n_samples, seed).unwrap();
    xs.sort_by(f64::total_cmp);
    let m = xs.len();
    if m % 2 == 1 {
        xs[m / 2]
    } else {
        (xs[m / 2 - 1] + xs[m / 2]) / 2.0
    }
}

/// Shapley values by averaging marginal contributions over every ordering.
pub fn shapley_by_orderings(model: &CausalModel, n_samples: usize, seed: u64) -> Vec<f64> {
    fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permutations(items, k + 1, out);
            items.swap(k, i);
        }
    }
    let n = model.len();
    let v: Vec<f64> = (0..1usize << n).map(|m| coalition_median(model, m, n_samples, seed)).collect();
    let mut orders = Vec::new();
    permutations(&mut (0..n).collect(), 0, &mut orders);
    let mut phi = vec![0.0; n];
    for order in &orders {
        let mut mask = 0;
        for &j in order {
            phi[j] += v[mask | (1 << j)] - v[mask];
            mask |= 1 << j;
        }
    }
    phi.iter().map(|p| p / orders.len() as f64).collect()
}

/// PR@k counted position by position.
pub fn oracle_pr_at_k(pred: &[ComponentId], truth: &BTreeSet<ComponentId>, k: usize) -> f64 {
    let mut hits = 0usize;
    for (i, p) in pred.iter().enumerate() {
        if i >= k {
            break;
        }
        if truth.iter().any(|t| t == p) {
            hits += 1;
        }
    }
    let denom = if truth.len() < k { truth.len() } else { k };
    hits as f64 / denom as f64
}

pub fn oracle_pr_avg(pred: &[ComponentId], truth: &BTreeSet<ComponentId>) -> f64 {
    let ks = [1, 2, 3, 4, 5];
    ks.iter().map(|&k| oracle_pr_at_k(pred, truth, k)).sum::<f64>() / ks.len() as f64
}

/// Rank score with 0-based ranks; a truth outside the top `|truth|` scores 0.
pub fn oracle_rank_score(pred: &[ComponentId], truth: &BTreeSet<ComponentId>) -> f64 {
    let mut total = 0.0;
    for t in truth {
        let mut s = 1.0;
        for (rank, p) in pred.iter().enumerate() {
            if p == t {
                if rank < truth.len() {
                    s = rank as f64 / pred.len() as f64;
                }
                break;
            }
        }
        total += 1.0 - s;
    }
    total / truth.len() as f64
}

/// A random prediction list of distinct ids (at most `max_pred`) and a
/// non-empty truth set drawn from the same pool.
pub fn random_prediction<R: Rng>(rng: &mut R, max_pred: usize) -> (Vec<ComponentId>, BTreeSet<ComponentId>) {
    let pool: Vec<ComponentId> = (0..15).map(|i| id(&format!("c{i}"))).collect();
    let mut shuffled = pool.clone();
    shuffled.shuffle(rng);
    let pred = shuffled[..rng.random_range(0..=max_pred)].to_vec();
    let k = rng.random_range(1..=5);
    let truth = pool.choose_multiple(rng, k).cloned().collect();
    (pred, truth)
}

/// Components removed by a tree, routed by hand.
pub fn removed_by(tree: &FilteringTree, case: &IncidentCase, inds: &Indicators) -> BTreeSet<ComponentId> {
    let mut out = BTreeSet::new();
    for id in case.graph.components().keys().filter(|id| *id != case.graph.frontend()) {
        let mut cur = Some(tree.root);
        while let Some(i) = cur {
            let node = tree.nodes[i];
            if node.action.is_filter_out() {
                out.insert(id.clone());
                break;
            }
            cur = if satisfies(&node.action.action(), &inds[id]).unwrap() { node.right } else { node.left };
        }
    }
    out
}

/// Level-order prefix of `tree` with `k` nodes.
pub fn prefix(tree: &FilteringTree, k: usize) -> FilteringTree {
    let mut order = Vec::new();
    let mut queue = VecDeque::from([tree.root]);
    while let Some(i) = queue.pop_front() {
        order.push(i);
        queue.extend(tree.nodes[i].left);
        queue.extend(tree.nodes[i].right);
    }
    let keep: BTreeMap<usize, usize> = order[..k].iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let nodes = order[..k]
        .iter()
        .map(|&old| {
            let mut n = tree.nodes[old];
            n.left = n.left.and_then(|c| keep.get(&c).copied());
            n.right = n.right.and_then(|c| keep.get(&c).copied());
            n
        })
        .collect();
    FilteringTree { nodes, root: 0 }
}

pub fn hand_complexity(nodes: usize, edges: usize) -> f64 {
    let (n, e) = (nodes as f64, edges as f64);
    -(n + e + e / (n * n))
}

/// Episodic reward of `tree` on one case, assembled from hand-computed pieces.
pub fn hand_reward(tree: &FilteringTree, case: &IncidentCase, cfg: &RewardConfig) -> f64 {
    let inds = compute_indicators(&case.graph);
    let mut r_com = 0.0;
    for k in 1..=tree.len() {
        let removed = removed_by(&prefix(tree, k), case, &inds);
        let kept: BTreeSet<ComponentId> = case.graph.components().keys().filter(|c| !removed.contains(*c)).cloned().collect();
        let mut edges = 0;
        for x in &kept {
            // Kept nodes reachable from x through removed nodes only.
            let mut seen = BTreeSet::new();
            let mut stack: Vec<ComponentId> = case.graph.children(x).cloned().collect();
            while let Some(y) = stack.pop() {
                if !seen.insert(y.clone()) {
                    continue;
                }
                if removed.contains(&y) {
                    stack.extend(case.graph.children(&y).cloned());
                } else {
                    edges += 1;
                }
            }
        }
        r_com += hand_complexity(kept.len(), edges);
    }
    let report = diagnose(case, Some(tree), &cfg.rca).unwrap();
    let truth = case.root_causes();
    let r_rca = oracle_pr_avg(&report.ranking, truth) + oracle_rank_score(&report.ranking, truth);
    cfg.alpha * r_com + cfg.beta * r_rca
}
