//! Coverage, set size, oracle MSCE, fallback bounds and the length/coverage
//! dependence diagnostics.

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::GroupPredicate;
use crate::error::{check_alpha, Error, Result};
use crate::pinball::pinball;
use crate::rng;
use crate::rule::{set_size, SetDomain, ThresholdRule};
use crate::score::LabeledSample;
use crate::synth::OracleSpec;

/// Per-point outcome of applying a rule to a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOutcomes {
    pub covered: Vec<bool>,
    /// Empty when no set domain was given.
    pub lengths: Vec<f64>,
}

/// Coverage and, given a domain, set size for every test point. Point `j`
/// uses draw index `j`.
pub fn outcomes(rule: &dyn ThresholdRule, test: &[LabeledSample], domain: Option<&SetDomain>) -> Result<PointOutcomes> {
    let spec = rule.score_spec();
    let rows = test
        .par_iter()
        .enumerate()
        .map(|(j, smp)| {
            let s = spec.compute(smp)?;
            let t = rule.threshold(&smp.x, j as u64)?;
            let len = domain.map(|d| set_size(rule, smp, d, j as u64)).transpose()?;
            Ok((s <= t, len))
        })
        .collect::<Result<Vec<_>>>()?;
    let (covered, lengths): (Vec<bool>, Vec<Option<f64>>) = rows.into_iter().unzip();
    let lengths = lengths.into_iter().flatten().collect();
    Ok(PointOutcomes { covered, lengths })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub count: usize,
    /// `None` when the group is empty.
    pub coverage: Option<f64>,
    pub mean_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub marginal_coverage: f64,
    pub mean_length: f64,
    pub per_group: Vec<GroupReport>,
    pub msce: Option<f64>,
    pub pearson_r: f64,
    pub hsic: f64,
}

impl EvalReport {
    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.per_group.iter().find(|g| g.name == name)
    }

    /// Largest `|coverage - target|` over nonempty groups.
    pub fn worst_group_deviation(&self, target: f64) -> f64 {
        self.per_group
            .iter()
            .filter_map(|g| g.coverage)
            .map(|c| (c - target).abs())
            .fold(0.0, f64::max)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn group_reports(test: &[LabeledSample], out: &PointOutcomes, groups: &[GroupPredicate]) -> Vec<GroupReport> {
    groups
        .iter()
        .map(|g| {
            let members: Vec<usize> = (0..test.len()).filter(|&j| g.contains(&test[j].x)).collect();
            GroupReport {
                name: g.name.clone(),
                count: members.len(),
                coverage: mean(members.iter().map(|&j| f64::from(u8::from(out.covered[j])))),
                mean_length: if out.lengths.is_empty() {
                    None
                } else {
                    mean(members.iter().map(|&j| out.lengths[j]))
                },
            }
        })
        .collect()
}

/// Marginal coverage and coverage within each group.
pub fn coverage(
    rule: &dyn ThresholdRule,
    test: &[LabeledSample],
    groups: &[GroupPredicate],
) -> Result<(f64, Vec<GroupReport>)> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let out = outcomes(rule, test, None)?;
    let marginal = mean(out.covered.iter().map(|&c| f64::from(u8::from(c)))).unwrap_or(f64::NAN);
    Ok((marginal, group_reports(test, &out, groups)))
}

/// Full report for one rule on one test set.
pub fn evaluate(
    rule: &dyn ThresholdRule,
    test: &[LabeledSample],
    domain: &SetDomain,
    groups: &[GroupPredicate],
    oracle: Option<&OracleSpec>,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let out = outcomes(rule, test, Some(domain))?;
    let cov: Vec<f64> = out.covered.iter().map(|&c| f64::from(u8::from(c))).collect();
    let xs: Vec<&[f64]> = test.iter().map(|s| s.x.as_slice()).collect();
    let msce = oracle.map(|o| msce_oracle(rule, o, &xs)).transpose()?;
    Ok(EvalReport {
        n: test.len(),
        marginal_coverage: mean(cov.iter().copied()).unwrap_or(f64::NAN),
        mean_length: mean(out.lengths.iter().copied()).unwrap_or(f64::NAN),
        per_group: group_reports(test, &out, groups),
        msce,
        pearson_r: pearson(&out.lengths, &cov),
        hsic: hsic(&out.lengths, &cov),
    })
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

impl McEstimate {
    fn from_terms(terms: &[f64]) -> Self {
        let n = terms.len() as f64;
        let mean = terms.iter().sum::<f64>() / n;
        let var = if terms.len() > 1 {
            terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, se: (var / n).sqrt() }
    }
}

fn oracle_level_check(oracle: &OracleSpec) -> Result<f64> {
    check_alpha(1.0 - oracle.level)?;
    Ok(oracle.level)
}

/// `(1/N) sum (F(t(x) | x) - (1 - alpha))^2` over `xs`.
pub fn msce_oracle(rule: &dyn ThresholdRule, oracle: &OracleSpec, xs: &[&[f64]]) -> Result<f64> {
    Ok(msce_oracle_mc(rule, oracle, xs)?.mean)
}

pub fn msce_oracle_mc(rule: &dyn ThresholdRule, oracle: &OracleSpec, xs: &[&[f64]]) -> Result<McEstimate> {
    if xs.is_empty() {
        return Err(Error::Empty("x sample"));
    }
    let level = oracle_level_check(oracle)?;
    let terms = xs
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            let t = rule.threshold(x, j as u64)?;
            Ok((oracle.cond_cdf(x, t) - level).powi(2))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(McEstimate::from_terms(&terms))
}

/// Expected pinball excess of the rule's thresholds over the oracle
/// quantile. Point `j` draws its score from substream `j` of `seed`.
pub fn pinball_gap(rule: &dyn ThresholdRule, oracle: &OracleSpec, xs: &[&[f64]], seed: u64) -> Result<McEstimate> {
    if xs.is_empty() {
        return Err(Error::Empty("x sample"));
    }
    let level = oracle_level_check(oracle)?;
    let alpha = 1.0 - level;
    let terms = xs
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            let mut r = rng::substream(seed, j as u64);
            let s = oracle.sample_score(x, &mut r);
            let t = rule.threshold(x, j as u64)?;
            let best = oracle.cond_quantile(x, level);
            Ok(pinball(t, s, alpha) - pinball(best, s, alpha))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(McEstimate::from_terms(&terms))
}

/// Coverage interval implied by an MSCE bound `p`: marginal when `gamma` is
/// `None`, otherwise for any group of mass at least `gamma`.
pub fn fallback_bounds(p: f64, gamma: Option<f64>, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    if !(p >= 0.0) {
        return Err(Error::Numeric(format!("MSCE bound must be nonnegative, got {p}")));
    }
    let radius = match gamma {
        None => p.sqrt(),
        Some(g) if g > 0.0 && g <= 1.0 => (p / g).sqrt(),
        Some(g) => return Err(Error::Numeric(format!("group mass must be in (0, 1], got {g}"))),
    };
    let target = 1.0 - alpha;
    Ok(((target - radius).max(0.0), (target + radius).min(1.0)))
}

/// Sample Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs paired sequences");
    let n = a.len() as f64;
    if a.len() < 2 || is_constant(a) || is_constant(b) {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Gaussian kernel value, exact at zero distance.
fn gauss(gamma: f64, x: f64, y: f64) -> f64 {
    if x == y {
        1.0
    } else {
        (-gamma * (x - y) * (x - y)).exp()
    }
}

/// Bandwidth used when the median pairwise distance is zero.
pub const FALLBACK_BANDWIDTH: f64 = 1.0;

/// Lower median of `|v_i - v_j|` over pairs `i < j`.
pub fn median_pairwise_distance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pairs = n * (n - 1) / 2;
    let k = pairs.div_ceil(2);
    // pairs with difference <= d, by two pointers
    let count_le = |d: f64| {
        let mut c = 0usize;
        let mut i = 0;
        for j in 0..n {
            while s[j] - s[i] > d {
                i += 1;
            }
            c += j - i;
        }
        c
    };
    let (mut lo, mut hi) = (0.0, s[n - 1] - s[0]);
    if count_le(lo) >= k {
        return 0.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_le(mid) >= k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // snap to the largest realized difference not above `hi`
    let mut best: f64 = 0.0;
    let mut i = 0;
    for j in 0..n {
        while s[j] - s[i] > hi {
            i += 1;
        }
        best = best.max(s[j] - s[i]);
    }
    best
}

fn bandwidth(v: &[f64]) -> f64 {
    let m = median_pairwise_distance(v);
    if m > 0.0 {
        m
    } else {
        FALLBACK_BANDWIDTH
    }
}

/// Biased HSIC `(1/n^2) tr(KHLH)` with Gaussian kernels whose bandwidths
/// follow the median heuristic.
pub fn hsic(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "hsic needs paired sequences");
    let n = a.len();
    if n == 0 || is_constant(a) || is_constant(b) {
        return 0.0;
    }
    let ga = 1.0 / (2.0 * bandwidth(a).powi(2));
    let gb = 1.0 / (2.0 * bandwidth(b).powi(2));
    let rows: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut rk, mut rl, mut kl) = (0.0, 0.0, 0.0);
            for j in 0..n {
                let k = gauss(ga, a[i], a[j]);
                let l = gauss(gb, b[i], b[j]);
                rk += k;
                rl += l;
                kl += k * l;
            }
            (rk, rl, kl)
        })
        .collect();
    let nf = n as f64;
    let (mut sk, mut sl, mut skl, mut cross) = (0.0, 0.0, 0.0, 0.0);
    for &(rk, rl, kl) in &rows {
        sk += rk;
        sl += rl;
        skl += kl;
        cross += rk * rl;
    }
    let v = (skl - 2.0 * cross / nf + sk * sl / (nf * nf)) / (nf * nf);
    v.max(0.0)
}
