//! Threshold rules and the prediction sets they define.
//!
//! Every rule produces a threshold `t(x)`; the prediction set at `x` is
//! `{y : S(x, y) <= t(x)}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::PartitionModel;
use crate::rng;
use crate::score::{Label, LabeledSample, ScoreKind, ScoreSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileVector {
    #[serde(with = "thresholds")]
    q: Vec<f64>,
}

impl QuantileVector {
    /// Thresholds must be finite or `+inf`.
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::Empty("quantile vector"));
        }
        if q.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::Numeric("thresholds must be finite or +inf".into()));
        }
        Ok(Self { q })
    }

    pub fn m(&self) -> usize {
        self.q.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Threshold of the most probable group, lowest index on ties.
    #[default]
    Argmax,
    /// Threshold of a group drawn from `h(x)`.
    Randomized { seed: u64 },
}

/// Anything that assigns a score threshold to a covariate vector.
pub trait ThresholdRule: Sync {
    fn score_spec(&self) -> &ScoreSpec;

    /// Threshold at `x`. `draw` names the independent random stream used by
    /// randomized rules (typically the test-sample index); deterministic
    /// rules ignore it.
    fn threshold(&self, x: &[f64], draw: u64) -> Result<f64>;

    fn covers(&self, sample: &LabeledSample, draw: u64) -> Result<bool> {
        Ok(self.score_spec().compute(sample)? <= self.threshold(&sample.x, draw)?)
    }
}

/// The learned partition together with its group thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlcpRule {
    pub model: PartitionModel,
    pub q: QuantileVector,
    pub score: ScoreSpec,
    #[serde(default)]
    pub assignment_mode: AssignmentMode,
}

impl PlcpRule {
    pub fn new(model: PartitionModel, q: QuantileVector, score: ScoreSpec) -> Result<Self> {
        if model.m() != q.m() {
            return Err(Error::DimensionMismatch {
                expected: model.m(),
                got: q.m(),
            });
        }
        Ok(Self {
            model,
            q,
            score,
            assignment_mode: AssignmentMode::Argmax,
        })
    }

    pub fn with_mode(mut self, mode: AssignmentMode) -> Self {
        self.assignment_mode = mode;
        self
    }

    /// Index of the most probable group, lowest index on ties.
    pub fn argmax_group(&self, x: &[f64]) -> Result<usize> {
        let h = self.model.forward(x)?;
        Ok(argmax(&h))
    }

    /// Threshold drawn with an explicit generator (randomized assignment).
    pub fn threshold_with_rng(&self, x: &[f64], rng: &mut impl rand::Rng) -> Result<f64> {
        let h = self.model.forward(x)?;
        Ok(self.q.values()[sample_index(&h, rng.random::<f64>())])
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let rule: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if rule.model.params.len() != rule.model.arch.param_count() || rule.model.m() != rule.q.m() {
            return Err(Error::Data(format!("inconsistent checkpoint {}", path.display())));
        }
        Ok(rule)
    }
}

impl ThresholdRule for PlcpRule {
    fn score_spec(&self) -> &ScoreSpec {
        &self.score
    }

    fn threshold(&self, x: &[f64], draw: u64) -> Result<f64> {
        match self.assignment_mode {
            AssignmentMode::Argmax => Ok(self.q.values()[self.argmax_group(x)?]),
            AssignmentMode::Randomized { seed } => {
                let mut r = rng::substream(seed, draw);
                self.threshold_with_rng(x, &mut r)
            }
        }
    }
}

pub(crate) fn argmax(h: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in h.iter().enumerate() {
        if p > h[best] {
            best = i;
        }
    }
    best
}

fn sample_index(h: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in h.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    h.iter().rposition(|&p| p > 0.0).unwrap_or(h.len() - 1)
}

/// One threshold for every covariate vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConformalRule {
    #[serde(with = "threshold")]
    pub threshold: f64,
    pub score: ScoreSpec,
}

impl ThresholdRule for SplitConformalRule {
    fn score_spec(&self) -> &ScoreSpec {
        &self.score
    }

    fn threshold(&self, _x: &[f64], _draw: u64) -> Result<f64> {
        Ok(self.threshold)
    }
}

/// Label space over which set sizes are measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetDomain {
    /// Real labels with an absolute-residual score: the set is an interval.
    Interval,
    /// Class labels `0..K`.
    Classes(usize),
    /// Candidate real labels; the size is the number covered.
    Grid(Vec<f64>),
}

/// Size of the prediction set at `sample` (its covariates and prediction).
pub fn set_size(rule: &dyn ThresholdRule, sample: &LabeledSample, domain: &SetDomain, draw: u64) -> Result<f64> {
    let t = rule.threshold(&sample.x, draw)?;
    let spec = rule.score_spec();
    match domain {
        SetDomain::Interval => {
            if spec.kind != ScoreKind::AbsoluteResidual {
                return Err(Error::Config(format!(
                    "interval length needs an absolute-residual score, not {}; use a label grid",
                    spec.kind.name()
                )));
            }
            let raw = match &spec.normalization {
                // clamped scores cover everything once t reaches 1
                Some(_) if t >= 1.0 => f64::INFINITY,
                Some(n) => n.invert(t),
                None => t,
            };
            Ok(2.0 * raw.max(0.0))
        }
        SetDomain::Classes(k) => {
            let mut count = 0usize;
            for y in 0..*k {
                if spec.score_label(sample, Label::Class(y))? <= t {
                    count += 1;
                }
            }
            Ok(count as f64)
        }
        SetDomain::Grid(grid) => {
            let mut count = 0usize;
            for &y in grid {
                if spec.score_label(sample, Label::Real(y))? <= t {
                    count += 1;
                }
            }
            Ok(count as f64)
        }
    }
}

/// JSON has no infinity; `+inf` thresholds are written as the string `"inf"`.
mod threshold {
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(super) fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else {
            Repr::Text("inf".into())
        }
    }

    pub(super) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(E::custom(format!("bad threshold {t:?}"))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d).map_err(D::Error::custom)?)
    }
}

mod thresholds {
    use super::threshold::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
    }
}
