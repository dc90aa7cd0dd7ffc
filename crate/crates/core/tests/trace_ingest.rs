mod common;

use std::collections::{BTreeSet, HashSet};

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracediag_core::indicators::compute_indicators;
use tracediag_core::ingest::{aggregate, keep_trace, read_jsonl, write_jsonl, Aggregator, Trace};
use tracediag_core::simgen::generate_case_with;
use tracediag_core::trace::{span_latencies, SpanRecord, WindowPair, DEFAULT_BUCKET_MS};

/// Random nested trace. Siblings are laid out back to back unless
/// `overlap`, in which case each child picks any sub-interval.
fn random_trace(rng: &mut ChaCha8Rng, overlap: bool) -> Vec<SpanRecord> {
    fn grow(rng: &mut ChaCha8Rng, spans: &mut Vec<SpanRecord>, parent: usize, depth: usize, overlap: bool) {
        let (s, e) = (spans[parent].entry_time, spans[parent].exit_time);
        let m = if depth >= 3 { 0 } else { rng.random_range(0..=3) };
        let mut cursor = s;
        for _ in 0..m {
            let (a, b) = if overlap {
                let a = rng.random_range(s..=e);
                (a, rng.random_range(a..=e))
            } else {
                if cursor >= e {
                    break;
                }
                let a = rng.random_range(cursor..=e);
                let b = rng.random_range(a..=e);
                cursor = b;
                (a, b)
            };
            let name = format!("c{}", spans.len());
            let pname = spans[parent].component_id.as_str().to_owned();
            spans.push(SpanRecord::new("t", name, Some(&pname), a, b));
            let idx = spans.len() - 1;
            grow(rng, spans, idx, depth + 1, overlap);
        }
    }
    let mut spans = vec![SpanRecord::new("t", "c0", None, 0, rng.random_range(1..500))];
    grow(rng, &mut spans, 0, 0, overlap);
    spans
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn exclusive_sum_equals_root_inclusive_without_overlap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans = random_trace(&mut rng, false);
        let lat = span_latencies(&spans).unwrap();
        let total: f64 = lat.per_component.values().map(|p| p.exclusive_ms).sum();
        prop_assert_eq!(total, lat.per_component[&lat.root].inclusive_ms);
        prop_assert!(!lat.overlap);
    }

    #[test]
    fn overlapping_children_clamp_at_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans = random_trace(&mut rng, true);
        let lat = span_latencies(&spans).unwrap();
        for s in &spans {
            let children: i64 = spans
                .iter()
                .filter(|c| c.parent_component_id.as_ref() == Some(&s.component_id))
                .map(SpanRecord::duration)
                .sum();
            let expect = (s.duration() - children).max(0) as f64;
            prop_assert_eq!(lat.per_component[&s.component_id].exclusive_ms, expect);
        }
    }

    #[test]
    fn span_latencies_ignore_input_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans = random_trace(&mut rng, seed % 2 == 0);
        let mut shuffled = spans.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(span_latencies(&spans).unwrap(), span_latencies(&shuffled).unwrap());
    }

    #[test]
    fn descendants_are_transitive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 12, 4, 0.15);
        for x in g.components().keys() {
            let dx = g.descendants(x).unwrap();
            for y in &dx {
                for z in g.descendants(y).unwrap() {
                    prop_assert!(dx.contains(&z), "{z} under {y} under {x}");
                }
            }
            prop_assert_eq!(&dx, &reachable(g.edges(), x));
        }
    }
}

#[test]
fn overlap_can_push_the_exclusive_sum_past_the_root() {
    let spans = [
        SpanRecord::new("t", "root", None, 0, 100),
        SpanRecord::new("t", "a", Some("root"), 0, 60),
        SpanRecord::new("t", "b", Some("root"), 50, 100),
    ];
    let lat = span_latencies(&spans).unwrap();
    let total: f64 = lat.per_component.values().map(|p| p.exclusive_ms).sum();
    assert!(lat.overlap);
    assert_eq!(lat.per_component[&id("root")].exclusive_ms, 0.0);
    assert_eq!(total, 110.0);
}

#[test]
fn aggregated_edges_match_the_generating_topology() {
    let w = windows(48);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let traces = running_traces(&mut rng, &w, 2000, 0.9, &[]);
    let g = aggregate(&traces, w, DEFAULT_BUCKET_MS).unwrap();
    let expect: BTreeSet<_> = [("frontend", "A"), ("frontend", "B"), ("B", "C"), ("C", "F"), ("B", "E"), ("E", "F")]
        .into_iter()
        .map(|(a, b)| (id(a), id(b)))
        .collect();
    assert_eq!(g.edges(), &expect);
}

#[test]
fn normalize_count_recovers_invocation_probability() {
    let w = windows(8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let traces = running_traces(&mut rng, &w, 20_000, 0.3, &[]);
    let g = aggregate(&traces, w, DEFAULT_BUCKET_MS).unwrap();
    let alert = g.total_traces().alert;
    assert!(alert > 9000, "{alert}");
    let inds = compute_indicators(&g);
    let a = inds[&id("A")].normalize_count.unwrap();
    assert!((a - 0.3).abs() < 0.02, "{a}");
}

fn small_traces(seed: u64) -> (Vec<Trace>, WindowPair) {
    let cfg = small_gen(seed);
    let mut traces = Vec::new();
    generate_case_with(&cfg, |t| {
        traces.push(t.clone());
        Ok(())
    })
    .unwrap();
    (traces, cfg.windows())
}

#[test]
fn aggregation_ignores_trace_order() {
    let (mut traces, w) = small_traces(3);
    let a = aggregate(&traces, w, DEFAULT_BUCKET_MS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        traces.shuffle(&mut rng);
        assert_eq!(aggregate(&traces, w, DEFAULT_BUCKET_MS).unwrap(), a);
    }
    let (left, right) = traces.split_at(traces.len() / 3);
    let mut x = Aggregator::new(w, DEFAULT_BUCKET_MS).unwrap();
    let mut y = Aggregator::new(w, DEFAULT_BUCKET_MS).unwrap();
    left.iter().for_each(|t| x.add_or_skip(t));
    right.iter().for_each(|t| y.add_or_skip(t));
    assert_eq!(y.merge(x).finish().unwrap(), a);
}

#[test]
fn bucket_counts_bounded_by_traces_in_bucket() {
    let (traces, w) = small_traces(4);
    let g = aggregate(&traces, w, DEFAULT_BUCKET_MS).unwrap();
    let nb = w.base.bucket_count(DEFAULT_BUCKET_MS);
    let mut per_bucket = vec![0u32; 2 * nb];
    for t in &traces {
        let (lo, hi) = t.spans.iter().fold((i64::MAX, i64::MIN), |(lo, hi), s| (lo.min(s.entry_time), hi.max(s.exit_time)));
        let first = (lo.max(0) / DEFAULT_BUCKET_MS) as usize;
        let last = ((hi / DEFAULT_BUCKET_MS) as usize).min(2 * nb - 1);
        for b in first..=last {
            per_bucket[b] += 1;
        }
    }
    for s in g.components().values() {
        for (i, c) in s.base.inl.counts.iter().chain(&s.alert.inl.counts).enumerate() {
            assert!(*c <= per_bucket[i], "{} bucket {i}: {c} > {}", s.component_id, per_bucket[i]);
        }
    }
}

#[test]
fn rerun_is_byte_identical() {
    let run = || {
        let (traces, w) = small_traces(5);
        let g = aggregate(&traces, w, DEFAULT_BUCKET_MS).unwrap();
        let mut spans = Vec::new();
        write_jsonl(&mut spans, traces.iter().flat_map(|t| &t.spans)).unwrap();
        (serde_json::to_vec(&g).unwrap(), spans)
    };
    assert_eq!(run(), run());
}

#[test]
fn jsonl_group_count_matches_distinct_ids() {
    let (traces, _) = small_traces(6);
    let mut buf = Vec::new();
    let mut lines = 0;
    for t in traces.iter().take(2500) {
        for s in &t.spans {
            serde_json::to_writer(&mut buf, s).unwrap();
            buf.push(b'\n');
            lines += 1;
        }
        if lines >= 10_000 {
            break;
        }
    }
    let text = String::from_utf8(buf.clone()).unwrap();
    let distinct: HashSet<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["trace_id"].as_str().unwrap().to_owned())
        .collect();
    let loaded = read_jsonl(buf.as_slice()).unwrap();
    assert!(lines >= 10_000);
    assert_eq!(loaded.traces.len(), distinct.len());
}

#[test]
fn one_percent_sampling_is_binomial() {
    let n = 100_000u32;
    let kept = (0..n).filter(|i| keep_trace(&format!("trace-{i}"), 0.01, 42)).count() as f64;
    let sd = (n as f64 * 0.01 * 0.99).sqrt();
    assert!((kept - 1000.0).abs() <= 3.0 * sd, "{kept}");
}
