//! Causal root cause analysis on a (pruned) dependency graph.
//!
//! Every component gets one mechanism per window, fitted on bucket data:
//! `InL_j = c_j · Σ_{k ∈ callees(j)} InL_k + N_j`, where `N_j` is the
//! empirical residual distribution. Swapping a subset of mechanisms from
//! base to alert and simulating the frontend gives a value function over
//! coalitions; Shapley values split the frontend median shift among
//! components.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiagnoseError, GraphError, RcaError};
use crate::indicators::compute_indicators;
use crate::pruning::{execute, FilteringTree};
use crate::trace::{ComponentId, DependencyGraph, IncidentCase, TimeSeries, Window};

pub const DEFAULT_MIN_SAMPLES: usize = 8;
pub const MIN_SIM_SAMPLES: usize = 100;

/// One fitted conditional: `value = coefficient · Σ callees + residual`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub coefficient: f64,
    /// Sorted residual sample; drawn from by quantile at simulation time.
    pub residuals: Vec<f64>,
    /// Set when too little data forced a marginal-only fit.
    pub fallback: bool,
}

impl Mechanism {
    fn marginal(values: Vec<f64>, fallback: bool) -> Self {
        let mut residuals = if values.is_empty() { vec![0.0] } else { values };
        residuals.sort_by(f64::total_cmp);
        Mechanism { coefficient: 0.0, residuals, fallback }
    }

    /// Residual at quantile `u ∈ [0, 1)`.
    #[inline]
    fn residual(&self, u: f64) -> f64 {
        let n = self.residuals.len();
        self.residuals[((u * n as f64) as usize).min(n - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMechanisms {
    pub base: Mechanism,
    pub alert: Mechanism,
}

impl NodeMechanisms {
    pub fn get(&self, w: Window) -> &Mechanism {
        match w {
            Window::Base => &self.base,
            Window::Alert => &self.alert,
        }
    }
}

/// Fitted graphical causal model over a pruned graph.
#[derive(Debug, Clone)]
pub struct CausalModel {
    ids: Vec<ComponentId>,
    /// Callee indices per node (the node's causal parents).
    causes: Vec<Vec<usize>>,
    mechanisms: Vec<NodeMechanisms>,
    /// Node indices with callees before callers.
    order: Vec<usize>,
    frontend: usize,
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * (1.0 + mx.abs()) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn fit_window(own: &TimeSeries, callees: &[&TimeSeries], min_samples: usize) -> Mechanism {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (b, y) in own.values.iter().enumerate() {
        let Some(y) = y else { continue };
        // A callee missing from a bucket contributed nothing to it.
        let x: f64 = callees.iter().filter_map(|s| s.values.get(b).copied().flatten()).sum();
        xs.push(x);
        ys.push(*y);
    }
    if callees.is_empty() {
        return Mechanism::marginal(ys, false);
    }
    if ys.len() < min_samples {
        return Mechanism::marginal(ys, true);
    }
    // Without variation in the callees the structural identity
    // InL = ExL + Σ callee InL is the best available coefficient.
    let c = ols_slope(&xs, &ys).unwrap_or(1.0).max(0.0);
    let mut residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - c * x).collect();
    residuals.sort_by(f64::total_cmp);
    Mechanism { coefficient: c, residuals, fallback: false }
}

impl CausalModel {
    /// Fits base and alert mechanisms for every node of `graph`.
    pub fn fit(graph: &DependencyGraph, min_samples: usize) -> Result<Self, RcaError> {
        let ids: Vec<ComponentId> = graph.components().keys().cloned().collect();
        if ids.is_empty() {
            return Err(RcaError::EmptyModel);
        }
        let index: BTreeMap<&ComponentId, usize> = ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
        let causes: Vec<Vec<usize>> = ids
            .iter()
            .map(|id| graph.children(id).map(|c| index[c]).collect())
            .collect();
        let mut mechanisms = Vec::with_capacity(ids.len());
        for id in &ids {
            let stats = &graph.components()[id];
            let callee_stats: Vec<_> = graph.children(id).map(|c| &graph.components()[c]).collect();
            let base_x: Vec<&TimeSeries> = callee_stats.iter().map(|s| &s.base.inl).collect();
            let alert_x: Vec<&TimeSeries> = callee_stats.iter().map(|s| &s.alert.inl).collect();
            let mut base = fit_window(&stats.base.inl, &base_x, min_samples);
            let mut alert = fit_window(&stats.alert.inl, &alert_x, min_samples);
            // A window with no observation at all borrows the other window.
            if stats.base.inl.present_count() == 0 && stats.alert.inl.present_count() > 0 {
                base = alert.clone();
                base.fallback = true;
            } else if stats.alert.inl.present_count() == 0 && stats.base.inl.present_count() > 0 {
                alert = base.clone();
                alert.fallback = true;
            }
            if base.fallback || alert.fallback {
                log::warn!("{id}: too few buckets for a conditional fit, using the marginal");
            }
            mechanisms.push(NodeMechanisms { base, alert });
        }
        let topo = graph.topological_order()?;
        let order = topo.iter().rev().map(|id| index[id]).collect();
        Ok(CausalModel {
            frontend: index[graph.frontend()],
            ids,
            causes,
            mechanisms,
            order,
        })
    }

    /// Builds a model from explicit mechanisms. `causes[j]` lists the
    /// indices feeding node `j`; the graph they form must be acyclic.
    pub fn from_parts(
        ids: Vec<ComponentId>,
        causes: Vec<Vec<usize>>,
        mechanisms: Vec<NodeMechanisms>,
        frontend: usize,
    ) -> Result<Self, RcaError> {
        let n = ids.len();
        if n == 0 {
            return Err(RcaError::EmptyModel);
        }
        assert_eq!(causes.len(), n);
        assert_eq!(mechanisms.len(), n);
        // Depth-first post-order puts causes before effects.
        let mut state = vec![0u8; n];
        let mut order = Vec::with_capacity(n);
        fn visit(j: usize, causes: &[Vec<usize>], state: &mut [u8], order: &mut Vec<usize>, ids: &[ComponentId]) -> Result<(), RcaError> {
            match state[j] {
                2 => return Ok(()),
                1 => return Err(GraphError::Cycle(ids[j].clone()).into()),
                _ => {}
            }
            state[j] = 1;
            for &k in &causes[j] {
                visit(k, causes, state, order, ids)?;
            }
            state[j] = 2;
            order.push(j);
            Ok(())
        }
        for j in 0..n {
            visit(j, &causes, &mut state, &mut order, &ids)?;
        }
        let mechanisms = mechanisms
            .into_iter()
            .map(|mut m| {
                m.base.residuals.sort_by(f64::total_cmp);
                m.alert.residuals.sort_by(f64::total_cmp);
                m
            })
            .collect();
        Ok(CausalModel { ids, causes, mechanisms, order, frontend })
    }

    pub fn ids(&self) -> &[ComponentId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mechanisms(&self, id: &ComponentId) -> Option<&NodeMechanisms> {
        self.ids.iter().position(|x| x == id).map(|i| &self.mechanisms[i])
    }

    pub fn fallback_nodes(&self) -> Vec<ComponentId> {
        self.ids
            .iter()
            .zip(&self.mechanisms)
            .filter(|(_, m)| m.base.fallback || m.alert.fallback)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Fits the model on a pruned graph; the windows are those of the graph.
pub fn fit_model(pruned: &DependencyGraph) -> Result<CausalModel, RcaError> {
    CausalModel::fit(pruned, DEFAULT_MIN_SAMPLES)
}

/// Ancestral sampler with common random numbers and incremental updates:
/// switching one node's mechanism recomputes only that node and the nodes
/// downstream of it.
struct Simulator<'m> {
    model: &'m CausalModel,
    n: usize,
    uniforms: Vec<f64>,
    values: Vec<f64>,
    assign: Vec<Window>,
    /// Per node: itself plus every node it feeds, in evaluation order.
    affected: Vec<Vec<usize>>,
    scratch: Vec<f64>,
}

impl<'m> Simulator<'m> {
    fn new(model: &'m CausalModel, n_samples: usize, seed: u64) -> Self {
        let nodes = model.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniforms: Vec<f64> = (0..nodes * n_samples).map(|_| rng.random::<f64>()).collect();

        let mut effects: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for (j, cs) in model.causes.iter().enumerate() {
            for &k in cs {
                effects[k].push(j);
            }
        }
        let mut pos = vec![0; nodes];
        for (p, &j) in model.order.iter().enumerate() {
            pos[j] = p;
        }
        let affected = (0..nodes)
            .map(|j| {
                let mut seen = BTreeSet::from([j]);
                let mut stack = vec![j];
                while let Some(x) = stack.pop() {
                    for &e in &effects[x] {
                        if seen.insert(e) {
                            stack.push(e);
                        }
                    }
                }
                let mut v: Vec<usize> = seen.into_iter().collect();
                v.sort_by_key(|&x| pos[x]);
                v
            })
            .collect();

        let mut sim = Simulator {
            model,
            n: n_samples,
            uniforms,
            values: vec![0.0; nodes * n_samples],
            assign: vec![Window::Base; nodes],
            affected,
            scratch: vec![0.0; n_samples],
        };
        for &j in &model.order {
            sim.recompute(j);
        }
        sim
    }

    fn recompute(&mut self, j: usize) {
        let n = self.n;
        let mech = self.model.mechanisms[j].get(self.assign[j]);
        let (before, rest) = self.values.split_at_mut(j * n);
        let (own, after) = rest.split_at_mut(n);
        let u = &self.uniforms[j * n..(j + 1) * n];
        for s in 0..n {
            own[s] = mech.residual(u[s]);
        }
        if mech.coefficient != 0.0 {
            for &k in &self.model.causes[j] {
                let src = if k < j {
                    &before[k * n..(k + 1) * n]
                } else {
                    &after[(k - j - 1) * n..(k - j) * n]
                };
                for s in 0..n {
                    own[s] += mech.coefficient * src[s];
                }
            }
        }
    }

    fn set(&mut self, j: usize, w: Window) {
        if self.assign[j] == w {
            return;
        }
        self.assign[j] = w;
        for idx in 0..self.affected[j].len() {
            let k = self.affected[j][idx];
            self.recompute(k);
        }
    }

    fn frontend_samples(&self) -> &[f64] {
        let f = self.model.frontend;
        &self.values[f * self.n..(f + 1) * self.n]
    }

    fn frontend_median(&mut self) -> f64 {
        let f = self.model.frontend;
        self.scratch.copy_from_slice(&self.values[f * self.n..(f + 1) * self.n]);
        median_in_place(&mut self.scratch)
    }
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median_in_place(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    let mid = n / 2;
    let (lower, m, _) = xs.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (below + m) / 2.0
    }
}

/// Draws `n_samples` frontend values with each node using the mechanism of
/// its assigned window.
pub fn simulate_frontend(
    model: &CausalModel,
    assignment: &BTreeMap<ComponentId, Window>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>, RcaError> {
    let mut sim = Simulator::new(model, n_samples, seed);
    for (j, id) in model.ids.iter().enumerate() {
        let w = *assignment.get(id).ok_or_else(|| RcaError::Uncovered(id.clone()))?;
        sim.set(j, w);
    }
    Ok(sim.frontend_samples().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapleyMode {
    /// Exact below the player limit, permutation sampling above it.
    Auto,
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapleyConfig {
    pub n_samples: usize,
    pub permutations: usize,
    pub exact_max_players: usize,
    pub mode: ShapleyMode,
    pub seed: u64,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        ShapleyConfig {
            n_samples: 1000,
            permutations: 200,
            exact_max_players: 12,
            mode: ShapleyMode::Auto,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub contributions: BTreeMap<ComponentId, f64>,
    pub delta_phi: f64,
    /// Descending contribution; ties broken by ascending id.
    pub ranking: Vec<ComponentId>,
    pub exact: bool,
}

fn exact_shapley(sim: &mut Simulator, base_median: f64) -> Vec<f64> {
    let n = sim.model.len();
    let total = 1usize << n;
    let mut v = vec![0.0; total];
    let mut mask = 0usize;
    // Gray-code walk: one mechanism swap per coalition.
    for i in 1..total {
        let bit = i.trailing_zeros() as usize;
        mask ^= 1 << bit;
        let w = if mask & (1 << bit) != 0 { Window::Alert } else { Window::Base };
        sim.set(bit, w);
        v[mask] = sim.frontend_median() - base_median;
    }
    // weight(s) = s! (n − s − 1)! / n!
    let mut weight = vec![0.0; n];
    for (s, w) in weight.iter_mut().enumerate() {
        let mut x = 1.0 / n as f64;
        for t in 1..=s {
            x *= t as f64 / (n - t) as f64;
        }
        *w = x;
    }
    let mut phi = vec![0.0; n];
    for s in 0..total {
        let size = s.count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if s & (1 << j) == 0 {
                *p += weight[size] * (v[s | (1 << j)] - v[s]);
            }
        }
    }
    phi
}

/// Antithetic permutation sampling: even rounds add players along a random
/// order, odd rounds remove them along the same order, which evaluates the
/// reversed ordering.
fn sampled_shapley(sim: &mut Simulator, base_median: f64, permutations: usize, seed: u64) -> Vec<f64> {
    let n = sim.model.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a3b_1e00_0001);
    let mut phi = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut current = 0.0;
    let rounds = permutations.max(1);
    for round in 0..rounds {
        let adding = round % 2 == 0;
        if adding {
            order.shuffle(&mut rng);
        }
        for &j in &order {
            let w = if adding { Window::Alert } else { Window::Base };
            sim.set(j, w);
            let next = sim.frontend_median() - base_median;
            phi[j] += if adding { next - current } else { current - next };
            current = next;
        }
    }
    // Leave the simulator at all-base regardless of parity.
    if rounds % 2 == 1 {
        for j in 0..n {
            sim.set(j, Window::Base);
        }
    }
    phi.iter_mut().for_each(|p| *p /= rounds as f64);
    phi
}

/// Shapley attribution of the frontend median shift.
pub fn attribute(model: &CausalModel, cfg: &ShapleyConfig) -> Result<AttributionResult, RcaError> {
    if cfg.n_samples < MIN_SIM_SAMPLES {
        return Err(RcaError::TooFewSamples(cfg.n_samples));
    }
    let n = model.len();
    let mut sim = Simulator::new(model, cfg.n_samples, cfg.seed);
    let base_median = sim.frontend_median();
    let exact = match cfg.mode {
        ShapleyMode::Exact => true,
        ShapleyMode::Sampled => false,
        ShapleyMode::Auto => n <= cfg.exact_max_players,
    };
    let phi = if exact {
        exact_shapley(&mut sim, base_median)
    } else {
        sampled_shapley(&mut sim, base_median, cfg.permutations, cfg.seed)
    };
    for j in 0..n {
        sim.set(j, Window::Alert);
    }
    let delta_phi = sim.frontend_median() - base_median;

    let contributions: BTreeMap<ComponentId, f64> =
        model.ids.iter().cloned().zip(phi.iter().copied()).collect();
    Ok(AttributionResult {
        ranking: rank_by_contribution(&contributions),
        contributions,
        delta_phi,
        exact,
    })
}

pub fn rank_by_contribution(contributions: &BTreeMap<ComponentId, f64>) -> Vec<ComponentId> {
    let mut ranked: Vec<(&ComponentId, f64)> = contributions.iter().map(|(k, v)| (k, *v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().map(|(k, _)| k.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RcaConfig {
    pub min_samples: usize,
    pub shapley: ShapleyConfig,
}

impl Default for RcaConfig {
    fn default() -> Self {
        RcaConfig { min_samples: DEFAULT_MIN_SAMPLES, shapley: ShapleyConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub case_id: String,
    pub delta_phi_ms: f64,
    pub ranking: Vec<ComponentId>,
    pub contributions: BTreeMap<ComponentId, f64>,
    pub kept: Vec<ComponentId>,
    pub removed: Vec<ComponentId>,
}

impl DiagnosisReport {
    pub fn render_text(&self, top: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "case {}", self.case_id);
        let _ = writeln!(
            out,
            "frontend median shift: {:+.3} ms ({} components kept, {} removed)",
            self.delta_phi_ms,
            self.kept.len(),
            self.removed.len()
        );
        for (i, id) in self.ranking.iter().take(top).enumerate() {
            let _ = writeln!(out, "{:>3}. {:<32} {:+.3} ms", i + 1, id.as_str(), self.contributions[id]);
        }
        out
    }
}

/// Full pipeline: indicators, pruning (when a tree is given), model fit and
/// attribution.
pub fn diagnose(
    case: &IncidentCase,
    tree: Option<&FilteringTree>,
    cfg: &RcaConfig,
) -> Result<DiagnosisReport, DiagnoseError> {
    let (pruned, kept, removed) = match tree {
        Some(tree) => {
            let inds = compute_indicators(&case.graph);
            let res = execute(tree, &case.graph, &inds)?;
            (res.pruned_graph, res.kept, res.removed)
        }
        None => (
            case.graph.clone(),
            case.graph.components().keys().cloned().collect(),
            BTreeSet::new(),
        ),
    };
    let model = CausalModel::fit(&pruned, cfg.min_samples)?;
    let attr = attribute(&model, &cfg.shapley)?;
    Ok(DiagnosisReport {
        case_id: case.case_id.clone(),
        delta_phi_ms: attr.delta_phi,
        ranking: attr.ranking,
        contributions: attr.contributions,
        kept: kept.into_iter().collect(),
        removed: removed.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mech(c: f64, res: &[f64]) -> Mechanism {
        Mechanism { coefficient: c, residuals: res.to_vec(), fallback: false }
    }

    fn node(base: Mechanism, alert: Mechanism) -> NodeMechanisms {
        NodeMechanisms { base, alert }
    }

    fn ids(n: usize) -> Vec<ComponentId> {
        (0..n).map(|i| ComponentId::new(format!("n{i}"))).collect()
    }

    #[test]
    fn single_player_gets_the_whole_shift() {
        let model = CausalModel::from_parts(
            ids(1),
            vec![vec![]],
            vec![node(mech(0.0, &[5.0, 6.0, 7.0]), mech(0.0, &[15.0, 16.0, 17.0]))],
            0,
        )
        .unwrap();
        let r = attribute(&model, &ShapleyConfig { n_samples: 1001, ..Default::default() }).unwrap();
        assert!((r.delta_phi - 10.0).abs() < 1e-9);
        assert!((r.contributions[&ComponentId::new("n0")] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_players_share_equally() {
        // frontend = a + b; a and b each shift by +4.
        let m = || node(mech(0.0, &[1.0, 2.0, 3.0]), mech(0.0, &[5.0, 6.0, 7.0]));
        let model = CausalModel::from_parts(
            ids(3),
            vec![vec![1, 2], vec![], vec![]],
            vec![node(mech(1.0, &[0.0]), mech(1.0, &[0.0])), m(), m()],
            0,
        )
        .unwrap();
        let r = attribute(&model, &ShapleyConfig { n_samples: 2000, ..Default::default() }).unwrap();
        let a = r.contributions[&ComponentId::new("n1")];
        let b = r.contributions[&ComponentId::new("n2")];
        assert!((a - b).abs() < 0.05 * r.delta_phi.abs(), "{a} vs {b}");
        assert_eq!(r.contributions[&ComponentId::new("n0")], 0.0);
        let sum: f64 = r.contributions.values().sum();
        assert!((sum - r.delta_phi).abs() < 1e-9);
    }

    #[test]
    fn deterministic_model_gives_identical_samples() {
        let model = CausalModel::from_parts(
            ids(2),
            vec![vec![1], vec![]],
            vec![node(mech(2.0, &[1.0]), mech(2.0, &[1.0])), node(mech(0.0, &[3.0]), mech(0.0, &[4.0]))],
            0,
        )
        .unwrap();
        let assign: BTreeMap<_, _> = ids(2).into_iter().map(|id| (id, Window::Base)).collect();
        let s = simulate_frontend(&model, &assign, 200, 3).unwrap();
        assert!(s.iter().all(|v| *v == 7.0));
        let mut missing = assign.clone();
        missing.remove(&ComponentId::new("n1"));
        assert!(matches!(simulate_frontend(&model, &missing, 200, 3), Err(RcaError::Uncovered(_))));
    }

    #[test]
    fn too_few_samples_rejected() {
        let model = CausalModel::from_parts(ids(1), vec![vec![]], vec![node(mech(0.0, &[1.0]), mech(0.0, &[1.0]))], 0).unwrap();
        assert_eq!(
            attribute(&model, &ShapleyConfig { n_samples: 99, ..Default::default() }),
            Err(RcaError::TooFewSamples(99))
        );
    }

    #[test]
    fn fit_recovers_structural_identity() {
        use crate::trace::testutil::windows;
        use crate::trace::{ComponentStats, TraceTotals, WindowStats, DEFAULT_BUCKET_MS};
        let w = windows();
        let child: Vec<f64> = (0..12).map(|i| 10.0 + (i * 7 % 5) as f64).collect();
        let mk = |id: &str, vals: &[f64]| ComponentStats {
            component_id: id.into(),
            base: WindowStats {
                inl: TimeSeries::from_values(w.base.start_ms, DEFAULT_BUCKET_MS, vals),
                exl: TimeSeries::from_values(w.base.start_ms, DEFAULT_BUCKET_MS, vals),
                trace_occurrences: 12,
            },
            alert: WindowStats {
                inl: TimeSeries::from_values(w.alert.start_ms, DEFAULT_BUCKET_MS, vals),
                exl: TimeSeries::from_values(w.alert.start_ms, DEFAULT_BUCKET_MS, vals),
                trace_occurrences: 12,
            },
        };
        let g = DependencyGraph::new(
            [mk("fe", &child), mk("leaf", &child)],
            [("fe".into(), "leaf".into())],
            "fe".into(),
            w,
            TraceTotals { base: 12, alert: 12 },
        )
        .unwrap();
        let model = fit_model(&g).unwrap();
        let fe = model.mechanisms(&"fe".into()).unwrap();
        assert!((fe.base.coefficient - 1.0).abs() < 1e-9);
        assert!(fe.base.residuals.iter().all(|r| r.abs() < 1e-9));
    }

    #[test]
    fn constant_leaf_samples_constant() {
        let model = CausalModel::from_parts(ids(1), vec![vec![]], vec![node(mech(0.0, &[5.0; 8]), mech(0.0, &[5.0; 8]))], 0).unwrap();
        let assign: BTreeMap<_, _> = ids(1).into_iter().map(|id| (id, Window::Alert)).collect();
        assert!(simulate_frontend(&model, &assign, 500, 1).unwrap().iter().all(|v| *v == 5.0));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median_in_place(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_in_place(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
