//! Per-component anomaly indicators and the percentile ranks that percentile
//! pruning thresholds compare against.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::IndicatorError;
use crate::trace::{ComponentId, ComponentStats, DependencyGraph};

/// Floor on the base-window standard deviation (ms).
pub const SIGMA_FLOOR_MS: f64 = 1e-6;
pub const DEFAULT_K_SIGMA: f64 = 3.0;

/// Metrics a pruning action can threshold on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AvgExl,
    MaxExl,
    AvgInl,
    NormalizeCount,
    Overhead,
    AnomalyRankScore,
    RootTargetCorr,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::AvgExl,
        Metric::MaxExl,
        Metric::AvgInl,
        Metric::NormalizeCount,
        Metric::Overhead,
        Metric::AnomalyRankScore,
        Metric::RootTargetCorr,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorVector {
    pub component_id: ComponentId,
    pub avg_exl: Option<f64>,
    pub max_exl: Option<f64>,
    pub avg_inl: Option<f64>,
    pub normalize_count: Option<f64>,
    pub overhead: Option<f64>,
    pub anomaly_rank_score: Option<f64>,
    pub root_target_corr: Option<f64>,
    /// Fraction of components with a strictly smaller value, per metric.
    /// Absent when the metric itself is missing.
    pub percentile_rank: BTreeMap<Metric, f64>,
}

impl IndicatorVector {
    pub fn value(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::AvgExl => self.avg_exl,
            Metric::MaxExl => self.max_exl,
            Metric::AvgInl => self.avg_inl,
            Metric::NormalizeCount => self.normalize_count,
            Metric::Overhead => self.overhead,
            Metric::AnomalyRankScore => self.anomaly_rank_score,
            Metric::RootTargetCorr => self.root_target_corr,
        }
    }
}

pub type Indicators = BTreeMap<ComponentId, IndicatorVector>;

/// Alert-window occurrences over total alert traces, clipped to `[0, 1]`.
pub fn normalize_count(stats: &ComponentStats, total_traces_alert: u64) -> Result<f64, IndicatorError> {
    if total_traces_alert == 0 {
        return Err(IndicatorError::ZeroTotal);
    }
    Ok((stats.alert.trace_occurrences as f64 / total_traces_alert as f64).clamp(0.0, 1.0))
}

/// Alert-window InL total minus the base-window total, the latter rescaled to
/// the alert window's number of observed buckets.
pub fn overhead(stats: &ComponentStats) -> Result<f64, IndicatorError> {
    let nb = stats.base.inl.present_count();
    let na = stats.alert.inl.present_count();
    if nb == 0 || na == 0 {
        return Err(IndicatorError::InsufficientData {
            component: stats.component_id.clone(),
            reason: "a window has no observed InL bucket",
        });
    }
    let base: f64 = stats.base.inl.present().sum();
    let alert: f64 = stats.alert.inl.present().sum();
    Ok(alert - base * (na as f64 / nb as f64))
}

/// k-sigma persistence times magnitude.
///
/// With `μ`, `σ` the base-window InL mean and sample standard deviation and
/// `z_t = (x_t − μ) / max(σ, ε)` over alert buckets, the score is
/// `frac(z_t > k) · max(max_t z_t, 0)`.
pub fn anomaly_rank_score(stats: &ComponentStats, k: f64) -> Result<f64, IndicatorError> {
    let base: Vec<f64> = stats.base.inl.present().collect();
    if base.len() < 2 {
        return Err(IndicatorError::InsufficientData {
            component: stats.component_id.clone(),
            reason: "fewer than two base-window buckets",
        });
    }
    let alert: Vec<f64> = stats.alert.inl.present().collect();
    if alert.is_empty() {
        return Err(IndicatorError::InsufficientData {
            component: stats.component_id.clone(),
            reason: "no alert-window bucket",
        });
    }
    let (mu, sigma) = mean_std(&base);
    let sigma = sigma.max(SIGMA_FLOOR_MS);
    let z: Vec<f64> = alert.iter().map(|x| (x - mu) / sigma).collect();
    let frac = z.iter().filter(|&&v| v > k).count() as f64 / z.len() as f64;
    let peak = z.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    Ok(frac * peak)
}

/// Mean and sample (n − 1) standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0);
    (mu, var.sqrt())
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson r between a component's InL and the frontend's InL over the
/// concatenated base and alert buckets where both are observed.
pub fn root_target_correlation(graph: &DependencyGraph, id: &ComponentId) -> Result<Option<f64>, IndicatorError> {
    let stats = graph
        .component(id)
        .ok_or_else(|| IndicatorError::NotFound(id.clone()))?;
    let fe = graph
        .component(graph.frontend())
        .expect("graph invariant: frontend is a component");
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (a, b) in [(&stats.base.inl, &fe.base.inl), (&stats.alert.inl, &fe.alert.inl)] {
        for (x, y) in a.values.iter().zip(&b.values) {
            if let (Some(x), Some(y)) = (x, y) {
                xs.push(*x);
                ys.push(*y);
            }
        }
    }
    if xs.len() < 3 {
        return Ok(None);
    }
    Ok(pearson(&xs, &ys))
}

/// Fraction of the population strictly below each value; ties share the
/// lower rank. `None` entries are excluded from the population.
pub fn percentile_ranks(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    present.sort_by(f64::total_cmp);
    let n = present.len() as f64;
    values
        .iter()
        .map(|v| {
            v.map(|x| {
                let below = present.partition_point(|p| p.total_cmp(&x).is_lt());
                below as f64 / n
            })
        })
        .collect()
}

fn component_vector(
    graph: &DependencyGraph,
    stats: &ComponentStats,
    k: f64,
) -> IndicatorVector {
    let id = &stats.component_id;
    let keep = |r: Result<f64, IndicatorError>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::debug!("{e}");
            None
        }
    };
    IndicatorVector {
        component_id: id.clone(),
        avg_exl: stats.alert.exl.mean(),
        max_exl: stats.alert.exl.max(),
        avg_inl: stats.alert.inl.mean(),
        normalize_count: keep(normalize_count(stats, graph.total_traces().alert)),
        overhead: keep(overhead(stats)),
        anomaly_rank_score: keep(anomaly_rank_score(stats, k)),
        root_target_corr: root_target_correlation(graph, id).ok().flatten(),
        percentile_rank: BTreeMap::new(),
    }
}

/// All indicators for every component, plus cross-component percentile ranks.
pub fn compute_indicators(graph: &DependencyGraph) -> Indicators {
    compute_indicators_with(graph, DEFAULT_K_SIGMA)
}

pub fn compute_indicators_with(graph: &DependencyGraph, k: f64) -> Indicators {
    let mut vectors: Vec<IndicatorVector> = graph
        .components()
        .values()
        .map(|s| component_vector(graph, s, k))
        .collect();
    for m in Metric::ALL {
        let values: Vec<Option<f64>> = vectors.iter().map(|v| v.value(m)).collect();
        for (v, r) in vectors.iter_mut().zip(percentile_ranks(&values)) {
            if let Some(r) = r {
                v.percentile_rank.insert(m, r);
            }
        }
    }
    vectors
        .into_iter()
        .map(|v| (v.component_id.clone(), v))
        .collect()
}
