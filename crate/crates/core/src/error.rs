use std::path::PathBuf;

use thiserror::Error;

use crate::trace::ComponentId;

/// A single trace failed span-tree validation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trace has no spans")]
    Empty,
    #[error("trace {trace_id}: span of {component} exits before it enters")]
    NegativeDuration { trace_id: String, component: ComponentId },
    #[error("span list mixes trace ids {expected} and {found}")]
    MixedTraceIds { expected: String, found: String },
    #[error("trace {trace_id}: no root span")]
    NoRoot { trace_id: String },
    #[error("trace {trace_id}: second root span {component}")]
    MultipleRoots { trace_id: String, component: ComponentId },
    #[error("trace {trace_id}: span {component} names parent {parent} which has no span")]
    UnknownParent { trace_id: String, component: ComponentId, parent: ComponentId },
    #[error("trace {trace_id}: span {component} is not contained in any span of parent {parent}")]
    EscapesParent { trace_id: String, component: ComponentId, parent: ComponentId },
    #[error("trace {trace_id}: span {component} is on a parent cycle")]
    Cycle { trace_id: String, component: ComponentId },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown component {0}")]
    UnknownComponent(ComponentId),
    #[error("frontend {0} is not a component of the graph")]
    MissingFrontend(ComponentId),
    #[error("edge set has a cycle through {0}")]
    Cycle(ComponentId),
    #[error("component {0} is not reachable from the frontend")]
    Unreachable(ComponentId),
    #[error("invalid windows: {0}")]
    InvalidWindows(String),
    #[error("component {component}: {reason}")]
    BadSeries { component: ComponentId, reason: String },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("sample rate {0} is outside (0, 1]")]
    BadRate(f64),
    #[error("bucket width must be positive, got {0} ms")]
    BadBucket(i64),
    #[error("no traces fall in the {0} window")]
    EmptyWindow(&'static str),
    #[error("traces disagree on the frontend: {first} vs {second}")]
    AmbiguousFrontend { first: ComponentId, second: ComponentId },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndicatorError {
    #[error("total trace count must be positive")]
    ZeroTotal,
    #[error("{component}: insufficient data ({reason})")]
    InsufficientData { component: ComponentId, reason: &'static str },
    #[error("unknown component {0}")]
    NotFound(ComponentId),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree has {0} nodes; allowed range is 2..=30")]
    Size(usize),
    #[error("node {0}: FilterOut must be a leaf")]
    FilterOutHasChildren(usize),
    #[error("node {0}: FilterOut cannot be a right child")]
    FilterOutRight(usize),
    #[error("node {child}: repeats the action of its parent {parent}")]
    DuplicateOfParent { parent: usize, child: usize },
    #[error("node {0}: index out of range")]
    BadIndex(usize),
    #[error("node {0}: reachable more than once or unreachable from the root")]
    NotATree(usize),
    #[error("action id {0} is outside the vocabulary")]
    UnknownAction(i64),
    #[error("serialized sequence: {0}")]
    BadSequence(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("FilterOut has no threshold to test")]
    FilterOutTested,
    #[error("no indicators for component {0}")]
    MissingIndicators(ComponentId),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ground-truth root cause set is empty")]
    EmptyTruth,
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RcaError {
    #[error("n_samples = {0} is too small for stable medians (need >= 100)")]
    TooFewSamples(usize),
    #[error("mechanism assignment does not cover component {0}")]
    Uncovered(ComponentId),
    #[error("causal model has no nodes")]
    EmptyModel,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A pipeline failure tagged with the stage that produced it.
#[derive(Debug, Error)]
pub enum DiagnoseError {
    #[error("indicators: {0}")]
    Indicators(#[from] IndicatorError),
    #[error("pruning: {0}")]
    Pruning(#[from] PruneError),
    #[error("causal analysis: {0}")]
    Rca(#[from] RcaError),
}

#[derive(Debug, Error)]
pub enum RlError {
    #[error("action {action} is illegal in the current state")]
    IllegalAction { action: usize },
    #[error("every action is masked")]
    AllMasked,
    #[error("episode is already finished")]
    Finished,
    #[error("need at least one training case")]
    NoCases,
    #[error("case {0} has no labelled root causes")]
    Unlabelled(String),
    #[error("node budget must be at least 1")]
    BadBudget,
    #[error("complexity reward is undefined for a graph with no nodes")]
    EmptyGraph,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at episode {episode}: {detail}")]
    Divergence { episode: usize, detail: String },
    #[error("invalid policy file: {0}")]
    PolicyFile(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Indicators(#[from] IndicatorError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("writing spans: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}
