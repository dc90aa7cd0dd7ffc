//! Synthetic incidents: a random call topology, per-trace span trees with
//! log-normal exclusive latencies, and an exclusive-latency surge on a few
//! root-cause components during the alert window.
//!
//! Inclusive latencies of callers shift only through span nesting.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::ingest::{Aggregator, Trace};
use crate::trace::{ComponentId, IncidentCase, Interval, SpanRecord, WindowPair, DEFAULT_BUCKET_MS};

pub const FRONTEND: &str = "frontend";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// Breadth-first random tree plus forward cross edges.
    Random {
        min_branching: usize,
        max_branching: usize,
        /// Expected extra callers per component.
        cross_edge_rate: f64,
    },
    /// `frontend → svc-001 → svc-002 → …`.
    Chain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_components: usize,
    pub topology: Topology,
    /// Per-edge call probability range.
    pub invocation_prob: (f64, f64),
    /// Range of per-component log-normal medians, ms.
    pub median_ms: (f64, f64),
    /// Range of per-component log-space standard deviations.
    pub sigma_log: (f64, f64),
    /// Inclusive range for the number of root causes.
    pub n_root_causes: (usize, usize),
    /// Exclusive-latency shift in units of the standard deviation of the
    /// component's base-window per-call latency.
    pub surge_magnitude: f64,
    /// Root causes are drawn among components called by at least this
    /// fraction of traces.
    pub min_cause_reach: f64,
    /// Explicit root causes; overrides the random draw when non-empty.
    pub root_causes: Vec<ComponentId>,
    pub bucket_ms: i64,
    pub base_buckets: usize,
    pub alert_buckets: usize,
    pub traces_per_bucket: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_components: 500,
            topology: Topology::Random { min_branching: 1, max_branching: 3, cross_edge_rate: 0.2 },
            invocation_prob: (0.6, 1.0),
            median_ms: (2.0, 40.0),
            sigma_log: (0.3, 0.8),
            n_root_causes: (1, 3),
            surge_magnitude: 5.0,
            min_cause_reach: 0.4,
            root_causes: Vec::new(),
            bucket_ms: DEFAULT_BUCKET_MS,
            base_buckets: 96,
            alert_buckets: 96,
            traces_per_bucket: 20,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: (f64, f64), lo: f64, hi: f64) -> Result<(), SimError> {
    if !(r.0.is_finite() && r.1.is_finite() && lo <= r.0 && r.0 <= r.1 && r.1 <= hi) {
        return Err(SimError::Config(format!("{name} = {r:?} must satisfy {lo} <= min <= max <= {hi}")));
    }
    Ok(())
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_components < 2 {
            return Err(SimError::Config("need at least 2 components".into()));
        }
        if let Topology::Random { min_branching, max_branching, cross_edge_rate } = self.topology {
            if min_branching == 0 || min_branching > max_branching {
                return Err(SimError::Config("branching range must satisfy 1 <= min <= max".into()));
            }
            if !(0.0..=1.0).contains(&cross_edge_rate) {
                return Err(SimError::Config("cross_edge_rate must be in [0, 1]".into()));
            }
        }
        check_range("invocation_prob", self.invocation_prob, 0.0, 1.0)?;
        if self.invocation_prob.0 <= 0.0 {
            return Err(SimError::Config("invocation probabilities must be positive".into()));
        }
        check_range("median_ms", self.median_ms, f64::MIN_POSITIVE, f64::MAX)?;
        check_range("sigma_log", self.sigma_log, 0.0, 5.0)?;
        let (lo, hi) = self.n_root_causes;
        if self.root_causes.is_empty() && (lo == 0 || lo > hi || hi >= self.n_components) {
            return Err(SimError::Config(format!(
                "n_root_causes = {:?} must satisfy 1 <= min <= max < n_components",
                self.n_root_causes
            )));
        }
        if !(self.surge_magnitude.is_finite() && self.surge_magnitude >= 0.0) {
            return Err(SimError::Config("surge_magnitude must be finite and non-negative".into()));
        }
        if self.bucket_ms <= 0 || self.base_buckets == 0 || self.alert_buckets == 0 {
            return Err(SimError::Config("windows must contain at least one bucket".into()));
        }
        if self.traces_per_bucket == 0 {
            return Err(SimError::Config("traces_per_bucket must be positive".into()));
        }
        Ok(())
    }

    pub fn windows(&self) -> WindowPair {
        let split = self.base_buckets as i64 * self.bucket_ms;
        WindowPair {
            base: Interval::new(0, split),
            alert: Interval::new(split, split + self.alert_buckets as i64 * self.bucket_ms),
        }
    }
}

/// The sampled system: topology plus per-component latency laws.
#[derive(Debug, Clone)]
pub struct SyntheticSystem {
    pub names: Vec<ComponentId>,
    /// `(callee, call probability)` per component, in call order.
    pub calls: Vec<Vec<(usize, f64)>>,
    pub latency: Vec<LogNormal<f64>>,
    /// Exact mean and standard deviation of one call's inclusive latency
    /// in the base window.
    pub inl_mean_ms: Vec<f64>,
    pub sigma_ms: Vec<f64>,
    /// Probability that a trace calls the component at least once.
    pub reach: Vec<f64>,
    pub root_causes: Vec<usize>,
}

fn component_name(i: usize) -> ComponentId {
    if i == 0 {
        ComponentId::new(FRONTEND)
    } else {
        ComponentId::new(format!("svc-{i:03}"))
    }
}

fn build_system(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<SyntheticSystem, SimError> {
    let n = cfg.n_components;
    let names: Vec<ComponentId> = (0..n).map(component_name).collect();
    let mut callees: Vec<Vec<usize>> = vec![Vec::new(); n];
    match cfg.topology {
        Topology::Chain => {
            for i in 1..n {
                callees[i - 1].push(i);
            }
        }
        Topology::Random { min_branching, max_branching, cross_edge_rate } => {
            let mut next = 1;
            let mut parent = 0;
            while next < n {
                let k = rng.random_range(min_branching..=max_branching);
                for _ in 0..k.min(n - next) {
                    callees[parent].push(next);
                    next += 1;
                }
                parent += 1;
            }
            // Cross edges go from a lower to a higher index, keeping the
            // graph acyclic.
            for dst in 2..n {
                if rng.random::<f64>() < cross_edge_rate {
                    let src = rng.random_range(0..dst);
                    if !callees[src].contains(&dst) {
                        callees[src].push(dst);
                    }
                }
            }
        }
    }

    let calls: Vec<Vec<(usize, f64)>> = callees
        .iter()
        .map(|cs| {
            cs.iter()
                .map(|&c| (c, rng.random_range(cfg.invocation_prob.0..=cfg.invocation_prob.1)))
                .collect()
        })
        .collect();

    let mut latency = Vec::with_capacity(n);
    let mut exl_moments = Vec::with_capacity(n);
    for _ in 0..n {
        let median = rng.random_range(cfg.median_ms.0..=cfg.median_ms.1);
        let s = rng.random_range(cfg.sigma_log.0..=cfg.sigma_log.1);
        let mu = median.ln();
        latency.push(LogNormal::new(mu, s).map_err(|e| SimError::Config(e.to_string()))?);
        let mean = (mu + s * s / 2.0).exp();
        let var = (s * s).exp_m1() * (2.0 * mu + s * s).exp();
        exl_moments.push((mean, var));
    }
    // Calls are independent, so for a callee c invoked with probability p,
    // Var(B·X_c) = p(Var X_c + E[X_c]²) − p²E[X_c]². Callees have larger
    // indices, so a reverse pass sees them first.
    let mut inl_mean_ms = vec![0.0; n];
    let mut inl_var = vec![0.0; n];
    for i in (0..n).rev() {
        let (mut m, mut v) = exl_moments[i];
        for &(c, p) in &calls[i] {
            let (mc, vc) = (inl_mean_ms[c], inl_var[c]);
            m += p * mc;
            v += p * (vc + mc * mc) - p * p * mc * mc;
        }
        inl_mean_ms[i] = m;
        inl_var[i] = v;
    }
    let sigma_ms: Vec<f64> = inl_var.iter().map(|v| v.sqrt()).collect();

    // Indices are a topological order, so one forward pass suffices.
    let mut miss = vec![1.0; n];
    miss[0] = 0.0;
    for i in 0..n {
        let r = 1.0 - miss[i];
        for &(c, p) in &calls[i] {
            miss[c] *= 1.0 - r * p;
        }
    }
    let reach: Vec<f64> = miss.iter().map(|m| 1.0 - m).collect();

    let root_causes = if cfg.root_causes.is_empty() {
        let mut candidates: Vec<usize> = (1..n).filter(|&i| reach[i] >= cfg.min_cause_reach).collect();
        let k = rng.random_range(cfg.n_root_causes.0..=cfg.n_root_causes.1);
        if candidates.len() < k {
            candidates = (1..n).collect();
            candidates.sort_by(|a, b| reach[*b].total_cmp(&reach[*a]).then(a.cmp(b)));
            candidates.truncate(k);
        }
        let mut chosen: Vec<usize> = candidates.choose_multiple(rng, k).copied().collect();
        chosen.sort_unstable();
        chosen
    } else {
        let mut out = Vec::new();
        for id in &cfg.root_causes {
            let i = names
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| SimError::Config(format!("unknown root cause {id}")))?;
            out.push(i);
        }
        out.sort_unstable();
        out.dedup();
        out
    };

    Ok(SyntheticSystem { names, calls, latency, inl_mean_ms, sigma_ms, reach, root_causes })
}

struct TraceBuilder<'a> {
    sys: &'a SyntheticSystem,
    surge: &'a [f64],
    trace_id: String,
    spans: Vec<SpanRecord>,
}

impl TraceBuilder<'_> {
    /// Emits the span of `node` entered at `start` and returns its exit time.
    /// Half the exclusive time runs before the callees, half after.
    fn visit(&mut self, node: usize, parent: Option<usize>, start: i64, alert: bool, rng: &mut ChaCha8Rng) -> i64 {
        let mut exl = self.sys.latency[node].sample(rng);
        if alert {
            exl += self.surge[node];
        }
        let exl = exl.round().max(0.0) as i64;
        let pre = exl / 2;
        let slot = self.spans.len();
        self.spans.push(SpanRecord::new(
            self.trace_id.clone(),
            self.sys.names[node].as_str(),
            parent.map(|p| self.sys.names[p].as_str()),
            start,
            start,
        ));
        let mut cursor = start + pre;
        for &(c, p) in &self.sys.calls[node] {
            if rng.random::<f64>() < p {
                cursor = self.visit(c, Some(node), cursor, alert, rng);
            }
        }
        let end = cursor + (exl - pre);
        self.spans[slot].exit_time = end;
        end
    }
}

/// Generates a case, passing every trace to `sink` as it is produced.
pub fn generate_case_with<F>(cfg: &GenConfig, mut sink: F) -> Result<IncidentCase, SimError>
where
    F: FnMut(&Trace) -> Result<(), SimError>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sys = build_system(cfg, &mut rng)?;
    let mut surge = vec![0.0; sys.names.len()];
    for &c in &sys.root_causes {
        surge[c] = cfg.surge_magnitude * sys.sigma_ms[c];
    }

    let windows = cfg.windows();
    let mut agg = Aggregator::new(windows, cfg.bucket_ms)?;
    let total_buckets = cfg.base_buckets + cfg.alert_buckets;
    let mut counter = 0u64;
    for b in 0..total_buckets {
        let alert = b >= cfg.base_buckets;
        let bucket_start = b as i64 * cfg.bucket_ms;
        let mut starts: Vec<i64> = (0..cfg.traces_per_bucket)
            .map(|_| bucket_start + rng.random_range(0..cfg.bucket_ms))
            .collect();
        starts.sort_unstable();
        for start in starts {
            counter += 1;
            let mut tb = TraceBuilder {
                sys: &sys,
                surge: &surge,
                trace_id: format!("{:016x}-{counter:07}", cfg.seed),
                spans: Vec::new(),
            };
            tb.visit(0, None, start, alert, &mut rng);
            let trace = Trace { trace_id: tb.trace_id, spans: tb.spans };
            agg.add(&trace.spans).expect("generated traces are well formed");
            sink(&trace)?;
        }
    }
    let graph = agg.finish()?;
    let truth: BTreeSet<ComponentId> = sys.root_causes.iter().map(|&i| sys.names[i].clone()).collect();
    // A cause that no trace reached cannot be labelled.
    let truth = truth.into_iter().filter(|id| graph.contains(id)).collect();
    Ok(IncidentCase::new(format!("case-{:016x}", cfg.seed), graph, truth)?)
}

pub fn generate_case(cfg: &GenConfig) -> Result<IncidentCase, SimError> {
    generate_case_with(cfg, |_| Ok(()))
}

/// Generates a case and writes its traces as span jsonl to `out`.
pub fn generate_case_jsonl<W: std::io::Write>(cfg: &GenConfig, out: &mut W) -> Result<IncidentCase, SimError> {
    generate_case_with(cfg, |t| {
        for s in &t.spans {
            serde_json::to_writer(&mut *out, s).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// The sampled system behind a config, without generating traces.
pub fn sample_system(cfg: &GenConfig) -> Result<SyntheticSystem, SimError> {
    cfg.validate()?;
    build_system(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// `n` configs that differ only in seed, derived from `cfg.seed`.
pub fn case_seeds(cfg: &GenConfig, n: usize) -> Vec<GenConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    seeds.shuffle(&mut rng);
    seeds.into_iter().map(|seed| GenConfig { seed, ..cfg.clone() }).collect()
}
