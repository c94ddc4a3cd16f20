//! Split conformal calibration and calibration over known groups.

use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, Error, Result};
use crate::rule::{SplitConformalRule, ThresholdRule};
use crate::score::{ScoreSpec, ScoredSample};

/// `k`-th smallest of `{s_1..s_n, +inf}` with `k = ceil((1 - alpha)(n + 1))`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    let n = scores.len();
    let k = conformal_rank(n, alpha);
    if k > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// `ceil((1 - alpha)(n + 1))`, guarded against rounding just above an integer.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let raw = (1.0 - alpha) * (n as f64 + 1.0);
    let k = (raw - 1e-9).ceil().max(1.0) as usize;
    k.min(n + 1)
}

pub fn split_conformal(scores: &[f64], alpha: f64, score: ScoreSpec) -> Result<SplitConformalRule> {
    Ok(SplitConformalRule {
        threshold: conformal_quantile(scores, alpha)?,
        score,
    })
}

/// A partition of covariate space into `G` known groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GroupSpec {
    /// Everything in group 0.
    All,
    /// Group 0 when `x[coord] < cut`, group 1 otherwise.
    Threshold { coord: usize, cut: f64 },
    /// Group id is the binary number whose bit `b` is `x[coords[b]] != 0`.
    Bits { coords: Vec<usize> },
}

impl GroupSpec {
    pub fn count(&self) -> usize {
        match self {
            GroupSpec::All => 1,
            GroupSpec::Threshold { .. } => 2,
            GroupSpec::Bits { coords } => 1 << coords.len(),
        }
    }

    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        let get = |c: usize| {
            x.get(c).copied().ok_or(Error::DimensionMismatch {
                expected: c + 1,
                got: x.len(),
            })
        };
        Ok(match self {
            GroupSpec::All => 0,
            GroupSpec::Threshold { coord, cut } => usize::from(get(*coord)? >= *cut),
            GroupSpec::Bits { coords } => {
                let mut id = 0;
                for (b, &c) in coords.iter().enumerate() {
                    if get(c)? != 0.0 {
                        id |= 1 << b;
                    }
                }
                id
            }
        })
    }
}

/// Split conformal thresholds computed separately within each known group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConditionalRule {
    pub groups: GroupSpec,
    pub thresholds: Vec<f64>,
    pub score: ScoreSpec,
}

impl ThresholdRule for GroupConditionalRule {
    fn score_spec(&self) -> &ScoreSpec {
        &self.score
    }

    fn threshold(&self, x: &[f64], _draw: u64) -> Result<f64> {
        Ok(self.thresholds[self.groups.assign(x)?])
    }
}

pub fn group_conditional(
    data: &[ScoredSample],
    groups: &GroupSpec,
    alpha: f64,
    score: ScoreSpec,
) -> Result<GroupConditionalRule> {
    check_alpha(alpha)?;
    let mut per_group: Vec<Vec<f64>> = vec![Vec::new(); groups.count()];
    for smp in data {
        per_group[groups.assign(&smp.x)?].push(smp.s);
    }
    let thresholds = per_group
        .iter()
        .enumerate()
        .map(|(g, scores)| {
            if scores.is_empty() {
                log::warn!("group {g} has no calibration samples; using an infinite threshold");
                Ok(f64::INFINITY)
            } else {
                conformal_quantile(scores, alpha)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupConditionalRule {
        groups: groups.clone(),
        thresholds,
        score,
    })
}

/// A named, possibly overlapping, subset of covariate space used to report
/// group-wise metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPredicate {
    pub name: String,
    pub test: Membership,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Membership {
    All,
    Below { coord: usize, cut: f64 },
    AtLeast { coord: usize, cut: f64 },
    Equals { coord: usize, value: f64 },
}

impl GroupPredicate {
    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.test {
            Membership::All => true,
            Membership::Below { coord, cut } => x.get(*coord).is_some_and(|v| v < cut),
            Membership::AtLeast { coord, cut } => x.get(*coord).is_some_and(|v| v >= cut),
            Membership::Equals { coord, value } => x.get(*coord).is_some_and(|v| v == value),
        }
    }
}

/// `x[c] < cut` and `x[c] >= cut`.
pub fn halves(coord: usize, cut: f64) -> Vec<GroupPredicate> {
    vec![
        GroupPredicate {
            name: format!("x{coord}<{cut}"),
            test: Membership::Below { coord, cut },
        },
        GroupPredicate {
            name: format!("x{coord}>={cut}"),
            test: Membership::AtLeast { coord, cut },
        },
    ]
}

/// For each of the first `bits` binary coordinates, group `2i-1` is
/// `x_i = 0` and group `2i` is `x_i = 1` (1-based names).
pub fn binary_coordinate_groups(bits: usize) -> Vec<GroupPredicate> {
    (0..bits)
        .flat_map(|i| {
            [0.0, 1.0].into_iter().enumerate().map(move |(k, v)| GroupPredicate {
                name: format!("{}", 2 * i + k + 1),
                test: Membership::Equals { coord: i, value: v },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ScoreKind;
    use proptest::prelude::*;

    fn spec() -> ScoreSpec {
        ScoreSpec::new(ScoreKind::Precomputed)
    }

    #[test]
    fn order_statistic_examples() {
        let scores: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), 0.9);
        assert_eq!(conformal_rank(5, 0.1), 6);
        assert_eq!(conformal_quantile(&scores[..5], 0.1).unwrap(), f64::INFINITY);
        assert_eq!(conformal_rank(100, 0.1), 91);
    }

    #[test]
    fn single_group_equals_split() {
        let data: Vec<_> = (0..37)
            .map(|k| ScoredSample { x: vec![k as f64], s: ((k * 17) % 37) as f64 })
            .collect();
        let scores: Vec<f64> = data.iter().map(|d| d.s).collect();
        let split = split_conformal(&scores, 0.1, spec()).unwrap();
        let grouped = group_conditional(&data, &GroupSpec::All, 0.1, spec()).unwrap();
        assert_eq!(grouped.thresholds, vec![split.threshold]);
    }

    #[test]
    fn disjoint_groups_bracket_pooled() {
        let low: Vec<f64> = (1..=5).map(|k| k as f64 / 10.0).collect();
        let high: Vec<f64> = (5..=9).map(|k| k as f64 / 10.0).collect();
        let mut data = Vec::new();
        for (g, set) in [&low, &high].into_iter().enumerate() {
            for _ in 0..4 {
                for &s in set.iter() {
                    data.push(ScoredSample { x: vec![g as f64], s });
                }
            }
        }
        let pooled: Vec<f64> = data.iter().map(|d| d.s).collect();
        let pooled_t = conformal_quantile(&pooled, 0.1).unwrap();
        let rule = group_conditional(&data, &GroupSpec::Threshold { coord: 0, cut: 0.5 }, 0.1, spec()).unwrap();
        // 20 scores per group: rank 19 → 0.5 and 0.9; pooled rank 37 of 40 → 0.9
        assert_eq!(rule.thresholds, vec![0.5, 0.9]);
        assert!(rule.thresholds[0] <= pooled_t && pooled_t <= rule.thresholds[1]);
    }

    #[test]
    fn empty_group_gets_infinite_threshold() {
        let data = vec![ScoredSample { x: vec![-1.0], s: 0.3 }];
        let rule = group_conditional(&data, &GroupSpec::Threshold { coord: 0, cut: 0.0 }, 0.1, spec()).unwrap();
        assert_eq!(rule.thresholds[1], f64::INFINITY);
    }

    #[test]
    fn bit_groups() {
        let g = GroupSpec::Bits { coords: vec![0, 2] };
        assert_eq!(g.count(), 4);
        assert_eq!(g.assign(&[1.0, 5.0, 0.0]).unwrap(), 1);
        assert_eq!(g.assign(&[0.0, 5.0, 1.0]).unwrap(), 2);
        let names: Vec<_> = binary_coordinate_groups(2).into_iter().map(|g| g.name).collect();
        assert_eq!(names, ["1", "2", "3", "4"]);
    }

    proptest! {
        #[test]
        fn threshold_monotone_in_level(scores in prop::collection::vec(0.0f64..10.0, 1..60), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            // smaller alpha means higher coverage level
            prop_assert!(conformal_quantile(&scores, hi).unwrap() <= conformal_quantile(&scores, lo).unwrap());
        }

        #[test]
        fn adding_large_scores_never_lowers_threshold(scores in prop::collection::vec(0.0f64..10.0, 1..60), extra in 1usize..10) {
            let t = conformal_quantile(&scores, 0.1).unwrap();
            prop_assume!(t.is_finite());
            let mut more = scores.clone();
            let big = t + 1.0;
            more.extend(std::iter::repeat_n(big, extra));
            prop_assert!(conformal_quantile(&more, 0.1).unwrap() >= t);
        }
    }
}
