//! Span loading, trace-level sampling and aggregation into a
//! [`DependencyGraph`] with 15-minute latency series per window.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{IngestError, TraceError};
use crate::trace::{
    ComponentId, ComponentStats, DependencyGraph, SpanRecord, SpanTree, TimeSeries, TraceTotals,
    Window, WindowPair, WindowStats,
};

/// All spans sharing one trace id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub trace_id: String,
    pub spans: Vec<SpanRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedTrace {
    pub trace_id: String,
    pub reason: TraceError,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedTraces {
    pub traces: Vec<Trace>,
    /// Traces dropped because their spans do not form a valid tree.
    pub skipped: Vec<SkippedTrace>,
}

/// On-disk span formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpanFormat {
    /// One JSON span object per line.
    #[default]
    Jsonl,
}

pub fn load_traces(path: &Path, format: SpanFormat) -> Result<LoadedTraces, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })?;
    match format {
        SpanFormat::Jsonl => read_jsonl(BufReader::new(file)).map_err(|e| match e {
            IngestError::Io { source, .. } => IngestError::Io {
                path: path.to_owned(),
                source,
            },
            other => other,
        }),
    }
}

/// Parses span jsonl and groups spans by trace id in first-seen order.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<LoadedTraces, IngestError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<SpanRecord>> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: Default::default(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let span: SpanRecord = serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let group = groups.entry(span.trace_id.clone()).or_insert_with(|| {
            order.push(span.trace_id.clone());
            Vec::new()
        });
        group.push(span);
    }

    let mut out = LoadedTraces::default();
    for trace_id in order {
        let spans = groups.remove(&trace_id).expect("grouped above");
        match SpanTree::build(&spans) {
            Ok(_) => out.traces.push(Trace { trace_id, spans }),
            Err(reason) => {
                log::warn!("skipping trace {trace_id}: {reason}");
                out.skipped.push(SkippedTrace { trace_id, reason });
            }
        }
    }
    Ok(out)
}

/// Writes spans as jsonl, one per line.
pub fn write_jsonl<'a, W: std::io::Write>(
    mut w: W,
    spans: impl IntoIterator<Item = &'a SpanRecord>,
) -> std::io::Result<()> {
    for s in spans {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Keep decision for one trace. Depends only on `(trace_id, seed)`, so the
/// kept set is independent of input order.
pub fn keep_trace(trace_id: &str, rate: f64, seed: u64) -> bool {
    if rate >= 1.0 {
        return true;
    }
    let u = (splitmix64(fnv1a(trace_id.as_bytes()) ^ splitmix64(seed)) >> 11) as f64
        / (1u64 << 53) as f64;
    u < rate
}

/// Trace-level Bernoulli sampling; spans are never sampled individually.
pub fn sample_traces<I>(
    traces: I,
    rate: f64,
    seed: u64,
) -> Result<impl Iterator<Item = Trace>, IngestError>
where
    I: IntoIterator<Item = Trace>,
{
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(IngestError::BadRate(rate));
    }
    Ok(traces
        .into_iter()
        .filter(move |t| keep_trace(&t.trace_id, rate, seed)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct BucketAcc {
    inl_ms: i64,
    exl_ms: i64,
    traces: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ComponentAcc {
    buckets: [Vec<BucketAcc>; 2],
    occurrences: [u64; 2],
}

/// Mergeable per-component accumulators.
///
/// Latencies are whole milliseconds and are summed as integers, so partial
/// accumulators can be merged in any order with bit-identical results.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    windows: WindowPair,
    bucket_ms: i64,
    lens: [usize; 2],
    components: BTreeMap<ComponentId, ComponentAcc>,
    edges: BTreeSet<(ComponentId, ComponentId)>,
    roots: BTreeSet<ComponentId>,
    totals: [u64; 2],
    skipped: usize,
}

fn slot(w: Window) -> usize {
    match w {
        Window::Base => 0,
        Window::Alert => 1,
    }
}

impl Aggregator {
    pub fn new(windows: WindowPair, bucket_ms: i64) -> Result<Self, IngestError> {
        windows.validate()?;
        if bucket_ms <= 0 {
            return Err(IngestError::BadBucket(bucket_ms));
        }
        Ok(Aggregator {
            windows,
            bucket_ms,
            lens: [
                windows.base.bucket_count(bucket_ms),
                windows.alert.bucket_count(bucket_ms),
            ],
            components: BTreeMap::new(),
            edges: BTreeSet::new(),
            roots: BTreeSet::new(),
            totals: [0, 0],
            skipped: 0,
        })
    }

    fn locate(&self, t: i64) -> Option<(Window, usize)> {
        for (w, iv) in [(Window::Base, self.windows.base), (Window::Alert, self.windows.alert)] {
            if iv.contains(t) {
                return Some((w, ((t - iv.start_ms) / self.bucket_ms) as usize));
            }
        }
        None
    }

    /// Adds one trace. Spans outside both windows are ignored.
    pub fn add(&mut self, spans: &[SpanRecord]) -> Result<(), TraceError> {
        let tree = SpanTree::build(spans)?;
        let (pairs, _) = tree.span_pairs();

        let mut per_trace: BTreeMap<(&ComponentId, Window, usize), (i64, i64)> = BTreeMap::new();
        let mut seen: BTreeSet<(&ComponentId, Window)> = BTreeSet::new();
        for (i, s) in tree.spans.iter().enumerate() {
            let Some((w, b)) = self.locate(s.entry_time) else { continue };
            let e = per_trace.entry((&s.component_id, w, b)).or_default();
            e.0 += pairs[i].0;
            e.1 += pairs[i].1;
            seen.insert((&s.component_id, w));
            if let Some(p) = tree.parent[i] {
                self.edges
                    .insert((tree.spans[p].component_id.clone(), s.component_id.clone()));
            }
        }

        let root = &tree.spans[tree.root];
        if let Some((w, _)) = self.locate(root.entry_time) {
            self.totals[slot(w)] += 1;
            self.roots.insert(root.component_id.clone());
        }

        let lens = self.lens;
        let acc_for = |id: &ComponentId, comps: &mut BTreeMap<ComponentId, ComponentAcc>| {
            comps
                .entry(id.clone())
                .or_insert_with(|| ComponentAcc {
                    buckets: [vec![BucketAcc::default(); lens[0]], vec![BucketAcc::default(); lens[1]]],
                    occurrences: [0, 0],
                });
        };
        for ((id, w, b), (inl, exl)) in per_trace {
            acc_for(id, &mut self.components);
            let acc = self.components.get_mut(id).expect("inserted above");
            let bucket = &mut acc.buckets[slot(w)][b];
            bucket.inl_ms += inl;
            bucket.exl_ms += exl;
            bucket.traces += 1;
        }
        for (id, w) in seen {
            self.components.get_mut(id).expect("inserted above").occurrences[slot(w)] += 1;
        }
        Ok(())
    }

    /// Adds a trace, counting (not propagating) validation failures.
    pub fn add_or_skip(&mut self, trace: &Trace) {
        if let Err(e) = self.add(&trace.spans) {
            log::warn!("skipping trace {}: {e}", trace.trace_id);
            self.skipped += 1;
        }
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Combines two partial accumulators built with the same windows.
    pub fn merge(mut self, other: Aggregator) -> Aggregator {
        assert_eq!(self.windows, other.windows, "merging accumulators with different windows");
        assert_eq!(self.bucket_ms, other.bucket_ms);
        for (id, acc) in other.components {
            match self.components.get_mut(&id) {
                None => {
                    self.components.insert(id, acc);
                }
                Some(mine) => {
                    for w in 0..2 {
                        for (a, b) in mine.buckets[w].iter_mut().zip(&acc.buckets[w]) {
                            a.inl_ms += b.inl_ms;
                            a.exl_ms += b.exl_ms;
                            a.traces += b.traces;
                        }
                        mine.occurrences[w] += acc.occurrences[w];
                    }
                }
            }
        }
        self.edges.extend(other.edges);
        self.roots.extend(other.roots);
        self.totals[0] += other.totals[0];
        self.totals[1] += other.totals[1];
        self.skipped += other.skipped;
        self
    }

    pub fn finish(self) -> Result<DependencyGraph, IngestError> {
        if self.totals[0] == 0 {
            return Err(IngestError::EmptyWindow("base"));
        }
        if self.totals[1] == 0 {
            return Err(IngestError::EmptyWindow("alert"));
        }
        let mut roots = self.roots.into_iter();
        let frontend = roots.next().expect("non-empty windows imply a root");
        if let Some(second) = roots.next() {
            return Err(IngestError::AmbiguousFrontend { first: frontend, second });
        }

        let bucket_ms = self.bucket_ms;
        let starts = [self.windows.base.start_ms, self.windows.alert.start_ms];
        let series = |buckets: &[BucketAcc], start: i64| {
            let mut inl = TimeSeries::empty(start, bucket_ms, buckets.len());
            let mut exl = TimeSeries::empty(start, bucket_ms, buckets.len());
            for (i, b) in buckets.iter().enumerate() {
                if b.traces > 0 {
                    let n = f64::from(b.traces);
                    inl.values[i] = Some(b.inl_ms as f64 / n);
                    exl.values[i] = Some(b.exl_ms as f64 / n);
                    inl.counts[i] = b.traces;
                    exl.counts[i] = b.traces;
                }
            }
            (inl, exl)
        };
        let components = self.components.into_iter().map(|(id, acc)| {
            let (binl, bexl) = series(&acc.buckets[0], starts[0]);
            let (ainl, aexl) = series(&acc.buckets[1], starts[1]);
            ComponentStats {
                component_id: id,
                base: WindowStats {
                    inl: binl,
                    exl: bexl,
                    trace_occurrences: acc.occurrences[0],
                },
                alert: WindowStats {
                    inl: ainl,
                    exl: aexl,
                    trace_occurrences: acc.occurrences[1],
                },
            }
        });
        Ok(DependencyGraph::new(
            components,
            self.edges,
            frontend,
            self.windows,
            TraceTotals {
                base: self.totals[0],
                alert: self.totals[1],
            },
        )?)
    }
}

/// Aggregates traces into per-component bucket means over the two windows.
///
/// Invalid traces are skipped with a warning.
pub fn aggregate<'a, I>(traces: I, windows: WindowPair, bucket_ms: i64) -> Result<DependencyGraph, IngestError>
where
    I: IntoIterator<Item = &'a Trace>,
{
    let mut agg = Aggregator::new(windows, bucket_ms)?;
    for t in traces {
        agg.add_or_skip(t);
    }
    agg.finish()
}
