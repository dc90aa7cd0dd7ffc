//! Domain vocabulary shared by every stage: spans, latency pairs, bucketed
//! time series, per-component statistics and the aggregated dependency graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GraphError, TraceError};

/// Default aggregation bucket: 15 minutes.
pub const DEFAULT_BUCKET_MS: i64 = 15 * 60 * 1000;

/// Opaque component (microservice or function) identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentId(pub String);

impl ComponentId {
    pub fn new(s: impl Into<String>) -> Self {
        ComponentId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ComponentId {
    fn from(s: &str) -> Self {
        ComponentId(s.to_owned())
    }
}

/// One span of a trace: a single invocation of a component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub trace_id: String,
    #[serde(rename = "component")]
    pub component_id: ComponentId,
    #[serde(rename = "parent")]
    pub parent_component_id: Option<ComponentId>,
    #[serde(rename = "entry_ms")]
    pub entry_time: i64,
    #[serde(rename = "exit_ms")]
    pub exit_time: i64,
}

impl SpanRecord {
    pub fn new(
        trace_id: impl Into<String>,
        component: impl Into<String>,
        parent: Option<&str>,
        entry_time: i64,
        exit_time: i64,
    ) -> Self {
        SpanRecord {
            trace_id: trace_id.into(),
            component_id: ComponentId::new(component),
            parent_component_id: parent.map(ComponentId::from),
            entry_time,
            exit_time,
        }
    }

    pub fn duration(&self) -> i64 {
        self.exit_time - self.entry_time
    }
}

/// Inclusive (entry to exit) and exclusive (own running time) latency, in ms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyPair {
    pub inclusive_ms: f64,
    pub exclusive_ms: f64,
}

impl LatencyPair {
    pub fn add(&mut self, other: LatencyPair) {
        self.inclusive_ms += other.inclusive_ms;
        self.exclusive_ms += other.exclusive_ms;
    }
}

/// Per-component latencies of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLatencies {
    pub root: ComponentId,
    pub per_component: BTreeMap<ComponentId, LatencyPair>,
    /// Set when concurrent children made a naive exclusive latency negative.
    pub overlap: bool,
    /// Distinct (caller, callee) pairs observed in the trace.
    pub edges: BTreeSet<(ComponentId, ComponentId)>,
}

/// A validated span tree: `parent[i]` is the index of span `i`'s parent span.
#[derive(Debug, Clone)]
pub(crate) struct SpanTree {
    pub spans: Vec<SpanRecord>,
    pub parent: Vec<Option<usize>>,
    pub root: usize,
}

impl SpanTree {
    /// Resolves parent spans by component id and interval containment.
    ///
    /// Spans are sorted canonically first so the result does not depend on
    /// input order. Among candidate parent spans the tightest containing
    /// interval wins.
    pub fn build(spans: &[SpanRecord]) -> Result<Self, TraceError> {
        if spans.is_empty() {
            return Err(TraceError::Empty);
        }
        let mut spans = spans.to_vec();
        spans.sort_by(|a, b| {
            (&a.component_id, a.entry_time, a.exit_time, &a.parent_component_id).cmp(&(
                &b.component_id,
                b.entry_time,
                b.exit_time,
                &b.parent_component_id,
            ))
        });
        let trace_id = spans[0].trace_id.clone();
        for s in &spans {
            if s.exit_time < s.entry_time {
                return Err(TraceError::NegativeDuration {
                    trace_id: s.trace_id.clone(),
                    component: s.component_id.clone(),
                });
            }
            if s.trace_id != trace_id {
                return Err(TraceError::MixedTraceIds {
                    expected: trace_id,
                    found: s.trace_id.clone(),
                });
            }
        }

        let roots: Vec<usize> = (0..spans.len())
            .filter(|&i| spans[i].parent_component_id.is_none())
            .collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(TraceError::NoRoot { trace_id }),
            _ => {
                return Err(TraceError::MultipleRoots {
                    trace_id,
                    component: spans[roots[1]].component_id.clone(),
                })
            }
        };

        let mut by_component: BTreeMap<&ComponentId, Vec<usize>> = BTreeMap::new();
        for (i, s) in spans.iter().enumerate() {
            by_component.entry(&s.component_id).or_default().push(i);
        }

        let mut parent = vec![None; spans.len()];
        for (i, s) in spans.iter().enumerate() {
            let Some(pid) = &s.parent_component_id else { continue };
            let candidates = by_component.get(pid).map(Vec::as_slice).unwrap_or(&[]);
            if candidates.is_empty() {
                return Err(TraceError::UnknownParent {
                    trace_id: trace_id.clone(),
                    component: s.component_id.clone(),
                    parent: pid.clone(),
                });
            }
            let best = candidates
                .iter()
                .copied()
                .filter(|&j| j != i)
                .filter(|&j| {
                    spans[j].entry_time <= s.entry_time && s.exit_time <= spans[j].exit_time
                })
                .min_by_key(|&j| (spans[j].duration(), j));
            match best {
                Some(j) => parent[i] = Some(j),
                None => {
                    return Err(TraceError::EscapesParent {
                        trace_id: trace_id.clone(),
                        component: s.component_id.clone(),
                        parent: pid.clone(),
                    })
                }
            }
        }

        // Every span must reach the root without revisiting a span.
        for start in 0..spans.len() {
            let mut cur = start;
            let mut hops = 0usize;
            while let Some(p) = parent[cur] {
                cur = p;
                hops += 1;
                if hops > spans.len() {
                    return Err(TraceError::Cycle {
                        trace_id: trace_id.clone(),
                        component: spans[start].component_id.clone(),
                    });
                }
            }
            if cur != root {
                return Err(TraceError::Cycle {
                    trace_id: trace_id.clone(),
                    component: spans[start].component_id.clone(),
                });
            }
        }

        Ok(SpanTree { spans, parent, root })
    }

    /// Per-span `(inclusive, exclusive)` in whole ms, plus the overlap flag.
    pub fn span_pairs(&self) -> (Vec<(i64, i64)>, bool) {
        let mut child_sum = vec![0i64; self.spans.len()];
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                child_sum[*p] += self.spans[i].duration();
            }
        }
        let mut overlap = false;
        let pairs = self
            .spans
            .iter()
            .zip(&child_sum)
            .map(|(s, &cs)| {
                let inl = s.duration();
                let raw = inl - cs;
                if raw < 0 {
                    overlap = true;
                }
                (inl, raw.max(0))
            })
            .collect();
        (pairs, overlap)
    }
}

/// Inclusive and exclusive latency per component for one trace.
///
/// Components invoked several times in the trace have their pairs summed.
pub fn span_latencies(spans: &[SpanRecord]) -> Result<TraceLatencies, TraceError> {
    let tree = SpanTree::build(spans)?;
    let (pairs, overlap) = tree.span_pairs();
    let mut per_component: BTreeMap<ComponentId, LatencyPair> = BTreeMap::new();
    let mut edges = BTreeSet::new();
    for (i, s) in tree.spans.iter().enumerate() {
        per_component
            .entry(s.component_id.clone())
            .or_default()
            .add(LatencyPair {
                inclusive_ms: pairs[i].0 as f64,
                exclusive_ms: pairs[i].1 as f64,
            });
        if let Some(p) = tree.parent[i] {
            edges.insert((tree.spans[p].component_id.clone(), s.component_id.clone()));
        }
    }
    Ok(TraceLatencies {
        root: tree.spans[tree.root].component_id.clone(),
        per_component,
        overlap,
        edges,
    })
}

/// Regularly bucketed series; `None` marks a bucket no trace contributed to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub bucket_width_ms: i64,
    pub start_ms: i64,
    pub values: Vec<Option<f64>>,
    pub counts: Vec<u32>,
}

impl TimeSeries {
    pub fn empty(start_ms: i64, bucket_width_ms: i64, len: usize) -> Self {
        TimeSeries {
            bucket_width_ms,
            start_ms,
            values: vec![None; len],
            counts: vec![0; len],
        }
    }

    /// Builds a fully observed series (count 1 per bucket). Handy for tests.
    pub fn from_values(start_ms: i64, bucket_width_ms: i64, values: &[f64]) -> Self {
        TimeSeries {
            bucket_width_ms,
            start_ms,
            values: values.iter().copied().map(Some).collect(),
            counts: vec![1; values.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Non-missing values in bucket order.
    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().filter_map(|v| *v)
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn mean(&self) -> Option<f64> {
        let n = self.present_count();
        (n > 0).then(|| self.present().sum::<f64>() / n as f64)
    }

    pub fn max(&self) -> Option<f64> {
        self.present().fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    pub(crate) fn check(&self) -> Result<(), String> {
        if self.values.len() != self.counts.len() {
            return Err("values and counts differ in length".into());
        }
        for (v, c) in self.values.iter().zip(&self.counts) {
            if v.is_some() != (*c > 0) {
                return Err("missing marker does not match a zero count".into());
            }
        }
        Ok(())
    }
}

/// Latency observations of one component within one analysis window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub inl: TimeSeries,
    pub exl: TimeSeries,
    /// Number of traces in the window that invoked the component.
    pub trace_occurrences: u64,
}

impl WindowStats {
    pub fn empty(start_ms: i64, bucket_width_ms: i64, len: usize) -> Self {
        WindowStats {
            inl: TimeSeries::empty(start_ms, bucket_width_ms, len),
            exl: TimeSeries::empty(start_ms, bucket_width_ms, len),
            trace_occurrences: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub component_id: ComponentId,
    pub base: WindowStats,
    pub alert: WindowStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start_ms: i64,
    pub end_ms: i64,
}

impl Interval {
    pub fn new(start_ms: i64, end_ms: i64) -> Self {
        Interval { start_ms, end_ms }
    }

    /// Half-open containment: `[start, end)`.
    pub fn contains(&self, t: i64) -> bool {
        self.start_ms <= t && t < self.end_ms
    }

    pub fn len_ms(&self) -> i64 {
        self.end_ms - self.start_ms
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start_ms < other.end_ms && other.start_ms < self.end_ms
    }

    pub fn bucket_count(&self, bucket_ms: i64) -> usize {
        ((self.len_ms() + bucket_ms - 1) / bucket_ms).max(0) as usize
    }
}

/// Base (healthy) and alert (incident) windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPair {
    pub base: Interval,
    pub alert: Interval,
}

impl WindowPair {
    pub fn new(base: Interval, alert: Interval) -> Result<Self, GraphError> {
        let w = WindowPair { base, alert };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.base.len_ms() <= 0 || self.alert.len_ms() <= 0 {
            return Err(GraphError::InvalidWindows("windows must be non-empty".into()));
        }
        if self.base.overlaps(&self.alert) {
            return Err(GraphError::InvalidWindows("base and alert windows overlap".into()));
        }
        Ok(())
    }
}

/// Which of the two analysis windows an observation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Base,
    Alert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceTotals {
    pub base: u64,
    pub alert: u64,
}

/// Aggregated component graph. Edges point caller → callee.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    components: BTreeMap<ComponentId, ComponentStats>,
    edges: BTreeSet<(ComponentId, ComponentId)>,
    frontend: ComponentId,
    windows: WindowPair,
    total_traces: TraceTotals,
    children: BTreeMap<ComponentId, BTreeSet<ComponentId>>,
    parents: BTreeMap<ComponentId, BTreeSet<ComponentId>>,
}

impl DependencyGraph {
    pub fn new(
        components: impl IntoIterator<Item = ComponentStats>,
        edges: impl IntoIterator<Item = (ComponentId, ComponentId)>,
        frontend: ComponentId,
        windows: WindowPair,
        total_traces: TraceTotals,
    ) -> Result<Self, GraphError> {
        let components: BTreeMap<_, _> = components
            .into_iter()
            .map(|c| (c.component_id.clone(), c))
            .collect();
        let edges: BTreeSet<_> = edges.into_iter().collect();
        windows.validate()?;
        if !components.contains_key(&frontend) {
            return Err(GraphError::MissingFrontend(frontend));
        }
        for stats in components.values() {
            for series in [&stats.base.inl, &stats.base.exl, &stats.alert.inl, &stats.alert.exl] {
                series.check().map_err(|reason| GraphError::BadSeries {
                    component: stats.component_id.clone(),
                    reason,
                })?;
            }
            if stats.base.inl.bucket_width_ms != stats.alert.inl.bucket_width_ms {
                return Err(GraphError::BadSeries {
                    component: stats.component_id.clone(),
                    reason: "base and alert bucket widths differ".into(),
                });
            }
        }
        let mut children: BTreeMap<ComponentId, BTreeSet<ComponentId>> = BTreeMap::new();
        let mut parents: BTreeMap<ComponentId, BTreeSet<ComponentId>> = BTreeMap::new();
        for (a, b) in &edges {
            for id in [a, b] {
                if !components.contains_key(id) {
                    return Err(GraphError::UnknownComponent(id.clone()));
                }
            }
            if a == b {
                return Err(GraphError::Cycle(a.clone()));
            }
            children.entry(a.clone()).or_default().insert(b.clone());
            parents.entry(b.clone()).or_default().insert(a.clone());
        }
        let graph = DependencyGraph {
            components,
            edges,
            frontend,
            windows,
            total_traces,
            children,
            parents,
        };
        graph.topological_order()?;
        let reach = graph.reachable_from(&graph.frontend);
        if let Some(orphan) = graph.components.keys().find(|id| !reach.contains(*id)) {
            return Err(GraphError::Unreachable(orphan.clone()));
        }
        Ok(graph)
    }

    pub fn frontend(&self) -> &ComponentId {
        &self.frontend
    }

    pub fn windows(&self) -> &WindowPair {
        &self.windows
    }

    pub fn total_traces(&self) -> TraceTotals {
        self.total_traces
    }

    pub fn components(&self) -> &BTreeMap<ComponentId, ComponentStats> {
        &self.components
    }

    pub fn component(&self, id: &ComponentId) -> Option<&ComponentStats> {
        self.components.get(id)
    }

    pub fn contains(&self, id: &ComponentId) -> bool {
        self.components.contains_key(id)
    }

    pub fn edges(&self) -> &BTreeSet<(ComponentId, ComponentId)> {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.components.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Callees of `id`.
    pub fn children(&self, id: &ComponentId) -> impl Iterator<Item = &ComponentId> {
        self.children.get(id).into_iter().flatten()
    }

    /// Callers of `id`.
    pub fn parents(&self, id: &ComponentId) -> impl Iterator<Item = &ComponentId> {
        self.parents.get(id).into_iter().flatten()
    }

    fn reachable_from(&self, id: &ComponentId) -> BTreeSet<ComponentId> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([id.clone()]);
        seen.insert(id.clone());
        while let Some(cur) = queue.pop_front() {
            for c in self.children(&cur) {
                if seen.insert(c.clone()) {
                    queue.push_back(c.clone());
                }
            }
        }
        seen
    }

    /// Transitive callees of `id`, excluding `id`.
    pub fn descendants(&self, id: &ComponentId) -> Result<BTreeSet<ComponentId>, GraphError> {
        if !self.contains(id) {
            return Err(GraphError::UnknownComponent(id.clone()));
        }
        let mut reach = self.reachable_from(id);
        reach.remove(id);
        Ok(reach)
    }

    /// Callers before callees (Kahn's algorithm, ties by id).
    pub fn topological_order(&self) -> Result<Vec<ComponentId>, GraphError> {
        let mut indegree: BTreeMap<&ComponentId, usize> =
            self.components.keys().map(|k| (k, 0)).collect();
        for (_, b) in &self.edges {
            *indegree.get_mut(b).expect("edge endpoints validated") += 1;
        }
        let mut ready: BTreeSet<&ComponentId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(k, _)| *k)
            .collect();
        let mut order = Vec::with_capacity(self.components.len());
        while let Some(next) = ready.pop_first() {
            order.push(next.clone());
            for c in self.children(next) {
                let d = indegree.get_mut(c).expect("edge endpoints validated");
                *d -= 1;
                if *d == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != self.components.len() {
            let stuck = indegree
                .iter()
                .find(|(_, d)| **d > 0)
                .map(|(k, _)| (*k).clone())
                .expect("some node is left on a cycle");
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Complexity summary used by the pruning environment.
    pub fn summary(&self) -> GraphSummary {
        GraphSummary::new(self.node_count(), self.edge_count())
    }

    /// Subgraph on `keep` with the given edge set. Used after pruning.
    pub(crate) fn restricted(
        &self,
        keep: &BTreeSet<ComponentId>,
        edges: BTreeSet<(ComponentId, ComponentId)>,
    ) -> Result<Self, GraphError> {
        DependencyGraph::new(
            keep.iter().map(|id| self.components[id].clone()),
            edges,
            self.frontend.clone(),
            self.windows,
            self.total_traces,
        )
    }
}

/// Node count, edge count and sparsity |E|/|N|².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub sparsity: f64,
}

impl GraphSummary {
    pub fn new(nodes: usize, edges: usize) -> Self {
        let sparsity = if nodes == 0 {
            0.0
        } else {
            edges as f64 / (nodes as f64 * nodes as f64)
        };
        GraphSummary { nodes, edges, sparsity }
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    frontend: ComponentId,
    components: Vec<ComponentStats>,
    edges: Vec<(ComponentId, ComponentId)>,
    windows: WindowPair,
    total_traces: TraceTotals,
}

impl Serialize for DependencyGraph {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        GraphFile {
            frontend: self.frontend.clone(),
            components: self.components.values().cloned().collect(),
            edges: self.edges.iter().cloned().collect(),
            windows: self.windows,
            total_traces: self.total_traces,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DependencyGraph {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let f = GraphFile::deserialize(deserializer)?;
        DependencyGraph::new(f.components, f.edges, f.frontend, f.windows, f.total_traces)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Truth {
    pub root_causes: BTreeSet<ComponentId>,
}

/// A graph under investigation plus (optionally) its labelled root causes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncidentCase {
    pub case_id: String,
    #[serde(flatten)]
    pub graph: DependencyGraph,
    pub truth: Truth,
}

impl IncidentCase {
    pub fn new(
        case_id: impl Into<String>,
        graph: DependencyGraph,
        root_causes: BTreeSet<ComponentId>,
    ) -> Result<Self, GraphError> {
        if let Some(bad) = root_causes.iter().find(|id| !graph.contains(id)) {
            return Err(GraphError::UnknownComponent(bad.clone()));
        }
        Ok(IncidentCase {
            case_id: case_id.into(),
            graph,
            truth: Truth { root_causes },
        })
    }

    pub fn windows(&self) -> &WindowPair {
        self.graph.windows()
    }

    pub fn root_causes(&self) -> &BTreeSet<ComponentId> {
        &self.truth.root_causes
    }

    /// Components whose descendants include a root cause.
    pub fn affected(&self) -> BTreeSet<ComponentId> {
        let mut out = BTreeSet::new();
        for id in self.graph.components().keys() {
            if let Ok(desc) = self.graph.descendants(id) {
                if desc.iter().any(|d| self.truth.root_causes.contains(d)) {
                    out.insert(id.clone());
                }
            }
        }
        out
    }
}

impl<'de> Deserialize<'de> for IncidentCase {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct CaseFile {
            case_id: String,
            #[serde(flatten)]
            graph: GraphFile,
            #[serde(default)]
            truth: Truth,
        }
        let f = CaseFile::deserialize(deserializer)?;
        let g = f.graph;
        let graph = DependencyGraph::new(g.components, g.edges, g.frontend, g.windows, g.total_traces)
            .map_err(serde::de::Error::custom)?;
        IncidentCase::new(f.case_id, graph, f.truth.root_causes).map_err(serde::de::Error::custom)
    }
}
