//! RCA scoring: PR@k, PR@Avg, RankScore and HitRootCause.
//!
//! Ranks are 0-based: the top prediction has rank 0.

use std::collections::BTreeSet;

use crate::error::MetricsError;
use crate::trace::ComponentId;

/// Correct root causes among the top `k`, over `min(|truth|, k)`.
pub fn pr_at_k(pred: &[ComponentId], truth: &BTreeSet<ComponentId>, k: usize) -> Result<f64, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let hits = pred.iter().take(k).filter(|p| truth.contains(*p)).count();
    Ok(hits as f64 / truth.len().min(k) as f64)
}

/// Mean of PR@1..=PR@5.
pub fn pr_avg(pred: &[ComponentId], truth: &BTreeSet<ComponentId>) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    for k in 1..=5 {
        sum += pr_at_k(pred, truth, k)?;
    }
    Ok(sum / 5.0)
}

/// `(1/|truth|) Σ_v (1 − s(v))` with `s(v) = rank(v)/|pred|` when
/// `rank(v) < |truth|`, else 1. Truths absent from `pred` score 0.
pub fn rca_rank_score(pred: &[ComponentId], truth: &BTreeSet<ComponentId>) -> Result<f64, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    let n = pred.len() as f64;
    let total: f64 = truth
        .iter()
        .map(|v| match pred.iter().position(|p| p == v) {
            Some(rank) if rank < truth.len() => 1.0 - rank as f64 / n,
            _ => 0.0,
        })
        .sum();
    Ok(total / truth.len() as f64)
}

/// Fraction of true root causes that survived pruning.
pub fn hit_root_cause(kept: &BTreeSet<ComponentId>, truth: &BTreeSet<ComponentId>) -> Result<f64, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    Ok(truth.intersection(kept).count() as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[&str]) -> Vec<ComponentId> {
        xs.iter().map(|x| ComponentId::from(*x)).collect()
    }

    fn s(xs: &[&str]) -> BTreeSet<ComponentId> {
        xs.iter().map(|x| ComponentId::from(*x)).collect()
    }

    #[test]
    fn pr_at_k_examples() {
        assert_eq!(pr_at_k(&v(&["A", "B", "C"]), &s(&["A"]), 1).unwrap(), 1.0);
        assert_eq!(pr_at_k(&v(&["A", "X", "B"]), &s(&["A", "B", "C"]), 3).unwrap(), 2.0 / 3.0);
        assert_eq!(pr_at_k(&v(&["X"]), &s(&["A", "B"]), 5).unwrap(), 0.0);
        assert_eq!(pr_at_k(&v(&["X"]), &s(&[]), 1), Err(MetricsError::EmptyTruth));
        assert_eq!(pr_at_k(&v(&["X"]), &s(&["X"]), 0), Err(MetricsError::ZeroK));
    }

    #[test]
    fn pr_avg_examples() {
        assert_eq!(pr_avg(&v(&["A"]), &s(&["A"])).unwrap(), 1.0);
        assert!((pr_avg(&v(&["B", "A"]), &s(&["A"])).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(pr_avg(&v(&["B", "C"]), &s(&["A"])).unwrap(), 0.0);
    }

    #[test]
    fn rank_score_examples() {
        assert_eq!(rca_rank_score(&v(&["A", "B", "C"]), &s(&["A"])).unwrap(), 1.0);
        assert_eq!(rca_rank_score(&v(&["B", "C", "A"]), &s(&["A"])).unwrap(), 0.0);
        assert_eq!(rca_rank_score(&v(&["B", "C"]), &s(&["A"])).unwrap(), 0.0);
        assert_eq!(rca_rank_score(&[], &s(&["A"])).unwrap(), 0.0);
        // Two truths at ranks 0 and 1 of four: (1 + 0.75) / 2.
        assert_eq!(rca_rank_score(&v(&["A", "B", "X", "Y"]), &s(&["A", "B"])).unwrap(), 0.875);
    }

    #[test]
    fn hit_root_cause_examples() {
        let truth = s(&["A", "B", "C", "D", "E"]);
        assert_eq!(hit_root_cause(&truth, &truth).unwrap(), 1.0);
        assert_eq!(hit_root_cause(&s(&["A", "B", "C", "Z"]), &truth).unwrap(), 0.6);
        assert_eq!(hit_root_cause(&s(&["Z"]), &s(&["A"])).unwrap(), 0.0);
    }
}
