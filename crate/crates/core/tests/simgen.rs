mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use tracediag_core::ingest::Trace;
use tracediag_core::simgen::{generate_case, generate_case_jsonl, generate_case_with, GenConfig, Topology};
use tracediag_core::trace::{span_latencies, ComponentId, IncidentCase, TimeSeries};

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Rejects equality of distributions at level `alpha`.
fn ks_rejects(a: &[f64], b: &[f64], alpha: f64) -> bool {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    ks_statistic(a, b) > c * ((n + m) / (n * m)).sqrt()
}

fn present(s: &TimeSeries) -> Vec<f64> {
    s.present().collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Welch t statistic of `b` against `a`.
fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let var = |xs: &[f64]| {
        let m = mean(xs);
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
    };
    (mean(b) - mean(a)) / (var(a) / a.len() as f64 + var(b) / b.len() as f64).sqrt()
}

#[test]
fn chain_surge_shifts_inclusive_but_not_exclusive_latency_upstream() {
    let cfg = GenConfig {
        n_components: 3,
        topology: Topology::Chain,
        invocation_prob: (1.0, 1.0),
        root_causes: vec![id("svc-002")],
        base_buckets: 60,
        alert_buckets: 60,
        ..small_gen(3)
    };
    let case = generate_case(&cfg).unwrap();
    assert_eq!(case.root_causes(), &ids(&["svc-002"]));
    for name in ["frontend", "svc-001", "svc-002"] {
        let s = case.graph.component(&id(name)).unwrap();
        let t_inl = welch_t(&present(&s.base.inl), &present(&s.alert.inl));
        assert!(t_inl > 10.0, "{name} InL t = {t_inl}");
        let t_exl = welch_t(&present(&s.base.exl), &present(&s.alert.exl));
        if name == "svc-002" {
            assert!(t_exl > 10.0, "{name} ExL t = {t_exl}");
        } else {
            assert!(t_exl.abs() < 4.0, "{name} ExL t = {t_exl}");
        }
    }
}

#[test]
fn exclusive_latency_changes_only_at_injected_components() {
    for seed in 0..3 {
        let cfg = GenConfig { base_buckets: 60, alert_buckets: 60, traces_per_bucket: 20, ..small_gen(40 + seed) };
        let case = generate_case(&cfg).unwrap();
        let n = case.graph.node_count() as f64;
        let flagged: BTreeSet<ComponentId> = case
            .graph
            .components()
            .values()
            .filter(|s| {
                let (a, b) = (present(&s.base.exl), present(&s.alert.exl));
                a.len() >= 50 && b.len() >= 50 && ks_rejects(&a, &b, 0.01 / n)
            })
            .map(|s| s.component_id.clone())
            .collect();
        assert_eq!(&flagged, case.root_causes(), "seed {seed}");
    }
}

#[test]
fn zero_surge_leaves_the_frontend_unchanged() {
    for seed in 0..5 {
        let cfg = GenConfig { surge_magnitude: 0.0, base_buckets: 60, alert_buckets: 60, ..small_gen(60 + seed) };
        let case = generate_case(&cfg).unwrap();
        let fe = case.graph.component(&id("frontend")).unwrap();
        assert!(!ks_rejects(&present(&fe.base.inl), &present(&fe.alert.inl), 0.01), "seed {seed}");
    }
}

#[test]
fn affected_count_is_small_relative_to_system_size() {
    let cfgs: Vec<GenConfig> = (0..8)
        .map(|seed| GenConfig { base_buckets: 8, alert_buckets: 8, traces_per_bucket: 5, seed, ..Default::default() })
        .collect();
    let counts: Vec<f64> = cfgs.iter().map(|c| generate_case(c).unwrap().affected().len() as f64).collect();
    let m = mean(&counts);
    assert!((8.0..=32.0).contains(&m), "{counts:?}");
}

fn check_trace(t: &Trace) -> Result<(), String> {
    span_latencies(&t.spans).map_err(|e| e.to_string())?;
    let roots = t.spans.iter().filter(|s| s.parent_component_id.is_none()).count();
    if roots != 1 {
        return Err(format!("{roots} roots"));
    }
    for s in &t.spans {
        if s.trace_id != t.trace_id || s.exit_time < s.entry_time {
            return Err(format!("bad span {s:?}"));
        }
        if let Some(p) = &s.parent_component_id {
            let contained = t
                .spans
                .iter()
                .any(|q| &q.component_id == p && q.entry_time <= s.entry_time && s.exit_time <= q.exit_time);
            if !contained {
                return Err(format!("{} escapes its parent {p}", s.component_id));
            }
        }
    }
    Ok(())
}

#[test]
fn every_emitted_trace_is_valid() {
    for seed in 0..3 {
        let mut n = 0;
        generate_case_with(&small_gen(seed), |t| {
            check_trace(t).unwrap_or_else(|e| panic!("{}: {e}", t.trace_id));
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 48 * 10);
    }
}

#[test]
fn output_is_deterministic_under_seed() {
    let run = |seed| {
        let mut jsonl = Vec::new();
        let case: IncidentCase = generate_case_jsonl(&small_gen(seed), &mut jsonl).unwrap();
        (serde_json::to_string(&case).unwrap(), jsonl)
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7).1, run(8).1);
}

#[test]
fn root_causes_of_a_case_are_reached_by_traces() {
    let case = generate_case(&small_gen(9)).unwrap();
    let occurrences: BTreeMap<&ComponentId, u64> =
        case.graph.components().iter().map(|(k, s)| (k, s.alert.trace_occurrences)).collect();
    assert!(!case.root_causes().is_empty());
    for c in case.root_causes() {
        assert!(occurrences[c] > 0, "{c}");
        assert!(!case.graph.parents(c).collect::<Vec<_>>().is_empty());
    }
}
