//! Pinball loss, the empirical partition objective, and its exact
//! minimizer in the thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, Error, Result};
use crate::partition::PartitionModel;
use crate::rule::QuantileVector;
use crate::score::ScoredSample;

/// Slack used when comparing cumulative weights against the target mass.
pub const CUMULATIVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedScore {
    pub s: f64,
    pub w: f64,
}

/// `alpha (q - s)` when `q >= s`, `(1 - alpha)(s - q)` otherwise.
#[inline]
pub fn pinball(q: f64, s: f64, alpha: f64) -> f64 {
    if q >= s {
        alpha * (q - s)
    } else {
        (1.0 - alpha) * (s - q)
    }
}

/// Checked form of [`pinball`].
pub fn pinball_loss(q: f64, s: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(pinball(q, s, alpha))
}

/// `(1/n) sum_j sum_i h^i(x_j) loss(q_i, s_j)`.
pub fn empirical_objective(
    model: &PartitionModel,
    q: &QuantileVector,
    data: &[ScoredSample],
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    if data.is_empty() {
        return Err(Error::Empty("calibration data"));
    }
    if model.m() != q.m() {
        return Err(Error::DimensionMismatch {
            expected: model.m(),
            got: q.m(),
        });
    }
    let mut total = 0.0;
    for smp in data {
        let h = model.forward(&smp.x)?;
        total += group_costs(q, smp.s, alpha)
            .zip(&h)
            .map(|(c, p)| p * c)
            .sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// Same objective from precomputed assignment rows.
pub(crate) fn objective_from_assignments(
    assignments: &[Vec<f64>],
    q: &QuantileVector,
    scores: &[f64],
    alpha: f64,
) -> f64 {
    let total: f64 = assignments
        .iter()
        .zip(scores)
        .map(|(h, &s)| group_costs(q, s, alpha).zip(h).map(|(c, p)| p * c).sum::<f64>())
        .sum();
    total / scores.len() as f64
}

/// Pinball loss of score `s` against every group threshold.
pub(crate) fn group_costs(q: &QuantileVector, s: f64, alpha: f64) -> impl Iterator<Item = f64> + '_ {
    q.values().iter().map(move |&qi| pinball(qi, s, alpha))
}

/// Smallest score whose cumulative weight reaches `(1 - alpha)` of the
/// total. Minimizes `sum_j w_j loss(q, s_j)` over `q`.
pub fn weighted_quantile(items: &[WeightedScore], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if items.iter().any(|it| !(it.w >= 0.0) || !it.s.is_finite()) {
        return Err(Error::Numeric("weights must be nonnegative and scores finite".into()));
    }
    let mut sorted: Vec<WeightedScore> = items.to_vec();
    sorted.sort_by(|a, b| a.s.total_cmp(&b.s));
    let scores: Vec<f64> = sorted.iter().map(|it| it.s).collect();
    let weights: Vec<f64> = sorted.iter().map(|it| it.w).collect();
    sorted_weighted_quantile(&scores, &weights, alpha).ok_or(Error::ZeroWeight)
}

/// Weighted quantile over scores already in ascending order. `None` when
/// the weights sum to zero.
pub(crate) fn sorted_weighted_quantile(scores: &[f64], weights: &[f64], alpha: f64) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = (1.0 - alpha) * total - CUMULATIVE_TOL;
    let mut acc = 0.0;
    let mut i = 0;
    while i < scores.len() {
        // merge runs of equal scores so the answer ignores input order
        let s = scores[i];
        while i < scores.len() && scores[i] == s {
            acc += weights[i];
            i += 1;
        }
        if acc >= target {
            return Some(s);
        }
    }
    scores.last().copied()
}

/// Scores sorted once so repeated weighted quantiles over the same sample
/// cost a linear scan.
#[derive(Debug, Clone)]
pub(crate) struct SortedScores {
    order: Vec<usize>,
    sorted: Vec<f64>,
}

impl SortedScores {
    pub fn new(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let sorted = order.iter().map(|&i| scores[i]).collect();
        Self { order, sorted }
    }

    /// Weighted quantile with weights `weight(j)` indexed by original position.
    /// Returns the quantile and the total weight.
    pub fn quantile(&self, alpha: f64, weight: impl Fn(usize) -> f64) -> (Option<f64>, f64) {
        let weights: Vec<f64> = self.order.iter().map(|&j| weight(j)).collect();
        let total = weights.iter().sum();
        (sorted_weighted_quantile(&self.sorted, &weights, alpha), total)
    }
}
