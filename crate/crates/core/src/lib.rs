//! Trace-driven latency root cause analysis: trace aggregation, component
//! indicators, filtering-tree pruning, a learned pruning policy, causal
//! attribution, evaluation metrics and a synthetic incident generator.

pub mod causal;
pub mod error;
pub mod indicators;
pub mod ingest;
pub mod metrics;
pub mod pruning;
pub mod rl;
pub mod simgen;
pub mod trace;

pub use error::*;
pub use trace::{
    ComponentId, ComponentStats, DependencyGraph, GraphSummary, IncidentCase, Interval, SpanRecord,
    TimeSeries, TraceTotals, Window, WindowPair, WindowStats,
};
