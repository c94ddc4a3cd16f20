//! Samples and conformity scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Real(f64),
    Class(usize),
}

/// Per-sample output of an external model, carried alongside the sample
/// when the predictor is not a function the toolkit can evaluate itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Point(f64),
    Probs(Vec<f64>),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred: Option<Prediction>,
}

impl LabeledSample {
    pub fn regression(x: Vec<f64>, y: f64) -> Self {
        Self {
            x,
            y: Label::Real(y),
            pred: None,
        }
    }

    pub fn classification(x: Vec<f64>, y: usize, probs: Vec<f64>) -> Self {
        Self {
            x,
            y: Label::Class(y),
            pred: Some(Prediction::Probs(probs)),
        }
    }

    pub fn with_prediction(mut self, pred: Prediction) -> Self {
        self.pred = Some(pred);
        self
    }
}

/// A covariate vector paired with its conformity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub x: Vec<f64>,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `|y - f(x)|`
    AbsoluteResidual,
    /// `1 - pi_y(x)`
    SoftmaxComplement,
    /// Total probability of the classes strictly more likely than `y`.
    CumulativeSoftmax,
    /// The score is stored on the sample.
    Precomputed,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::AbsoluteResidual => "absolute_residual",
            ScoreKind::SoftmaxComplement => "softmax_complement",
            ScoreKind::CumulativeSoftmax => "cumulative_softmax",
            ScoreKind::Precomputed => "precomputed",
        }
    }
}

/// A point predictor the toolkit can evaluate directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predictor {
    /// `f(x) = <coef, x> + intercept`
    Linear { coef: Vec<f64>, intercept: f64 },
}

impl Predictor {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        match self {
            Predictor::Linear { coef, intercept } => {
                if coef.len() != x.len() {
                    return Err(Error::DimensionMismatch {
                        expected: coef.len(),
                        got: x.len(),
                    });
                }
                Ok(coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + intercept)
            }
        }
    }
}

/// Min-max rescaling of raw scores onto `[0, 1]`, fitted on calibration
/// scores. Scores outside the fitted range are clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub lo: f64,
    pub hi: f64,
}

impl Normalization {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("normalization scores"));
        }
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, s: f64) -> f64 {
        let span = self.hi - self.lo;
        if span <= 0.0 {
            return if s > self.lo { 1.0 } else { 0.0 };
        }
        ((s - self.lo) / span).clamp(0.0, 1.0)
    }

    /// Maps a normalized threshold back to raw score units.
    pub fn invert(&self, t: f64) -> f64 {
        if t.is_infinite() {
            return t;
        }
        self.lo + t * (self.hi - self.lo)
    }
}

/// How scores are computed from labelled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    /// When absent, per-sample predictions carried on the samples are used.
    #[serde(default)]
    pub predictor: Option<Predictor>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

impl ScoreSpec {
    pub fn new(kind: ScoreKind) -> Self {
        Self {
            kind,
            predictor: None,
            normalization: None,
        }
    }

    pub fn absolute_residual(predictor: Predictor) -> Self {
        Self {
            kind: ScoreKind::AbsoluteResidual,
            predictor: Some(predictor),
            normalization: None,
        }
    }

    /// Fits min-max normalization on the raw scores of `calibration`.
    pub fn with_normalization_from(mut self, calibration: &[LabeledSample]) -> Result<Self> {
        self.normalization = None;
        let raw = calibration
            .iter()
            .map(|s| self.compute(s))
            .collect::<Result<Vec<_>>>()?;
        self.normalization = Some(Normalization::fit(&raw)?);
        Ok(self)
    }

    /// Conformity score of `sample`.
    pub fn compute(&self, sample: &LabeledSample) -> Result<f64> {
        let raw = self.raw_score(&sample.x, sample.y, sample.pred.as_ref())?;
        Ok(match &self.normalization {
            Some(n) => n.apply(raw),
            None => raw,
        })
    }

    /// Score a candidate label `y` at a sample's covariates and prediction.
    pub fn score_label(&self, sample: &LabeledSample, y: Label) -> Result<f64> {
        let raw = self.raw_score(&sample.x, y, sample.pred.as_ref())?;
        Ok(match &self.normalization {
            Some(n) => n.apply(raw),
            None => raw,
        })
    }

    fn raw_score(&self, x: &[f64], y: Label, pred: Option<&Prediction>) -> Result<f64> {
        match self.kind {
            ScoreKind::AbsoluteResidual => {
                let Label::Real(y) = y else {
                    return Err(Error::LabelKind(self.kind.name()));
                };
                let fx = match (&self.predictor, pred) {
                    (Some(p), _) => p.predict(x)?,
                    (None, Some(Prediction::Point(v))) => *v,
                    _ => return Err(Error::MissingPredictor(self.kind.name())),
                };
                Ok((y - fx).abs())
            }
            ScoreKind::SoftmaxComplement | ScoreKind::CumulativeSoftmax => {
                let Label::Class(y) = y else {
                    return Err(Error::LabelKind(self.kind.name()));
                };
                let Some(Prediction::Probs(probs)) = pred else {
                    return Err(Error::MissingPredictor(self.kind.name()));
                };
                check_probs(probs)?;
                if y >= probs.len() {
                    return Err(Error::ClassOutOfRange {
                        index: y,
                        classes: probs.len(),
                    });
                }
                let py = probs[y];
                Ok(if self.kind == ScoreKind::SoftmaxComplement {
                    1.0 - py
                } else {
                    probs.iter().filter(|&&p| p > py).sum()
                })
            }
            ScoreKind::Precomputed => match pred {
                Some(Prediction::Score(s)) => Ok(*s),
                _ => Err(Error::MissingPredictor(self.kind.name())),
            },
        }
    }

    /// Scores every sample, failing on the first non-finite score.
    pub fn score_all(&self, samples: &[LabeledSample]) -> Result<Vec<ScoredSample>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, smp)| {
                let s = self.compute(smp)?;
                if !s.is_finite() {
                    return Err(Error::Numeric(format!("non-finite score at sample {i}")));
                }
                Ok(ScoredSample { x: smp.x.clone(), s })
            })
            .collect()
    }
}

pub(crate) fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidProbabilities("empty".into()));
    }
    if probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::InvalidProbabilities("negative or NaN entry".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidProbabilities(format!("sums to {total}")));
    }
    Ok(())
}

/// `compute_score` as a free function.
pub fn compute_score(spec: &ScoreSpec, sample: &LabeledSample) -> Result<f64> {
    spec.compute(sample)
}
