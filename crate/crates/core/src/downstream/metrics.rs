use super::{DownstreamError, Result};

/// `1 +` the number of negatives scoring at least as high as the positive,
/// so ties rank the positive last.
pub fn pessimistic_rank(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

/// Mean reciprocal rank with ranks beyond 10 contributing 0.
pub fn mrr_at_10(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(DownstreamError::EmptyMetricInput("mrr_at_10"));
    }
    if ranks.contains(&0) {
        return Err(DownstreamError::InvalidMetricInput("ranks start at 1".into()));
    }
    let total: f64 = ranks.iter().map(|&r| if r <= 10 { 1.0 / r as f64 } else { 0.0 }).sum();
    Ok(total / ranks.len() as f64)
}

/// Expected MRR@10 when the positive's rank is uniform over `1..=K+1`.
pub fn random_mrr_at_10(negatives_per_positive: usize) -> f64 {
    let n = negatives_per_positive + 1;
    (1..=n.min(10)).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting
/// one half. Sort-based, `O((P + N) log(P + N))`.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(DownstreamError::EmptyMetricInput("auc"));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(DownstreamError::InvalidMetricInput("NaN score".into()));
    }
    let mut sorted_neg = neg.to_vec();
    sorted_neg.sort_by(f64::total_cmp);
    let mut credit = 0f64;
    for &p in pos {
        let below = sorted_neg.partition_point(|&n| n < p);
        let not_above = sorted_neg.partition_point(|&n| n <= p);
        credit += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(credit / (pos.len() as f64 * neg.len() as f64))
}
