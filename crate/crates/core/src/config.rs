//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{binary_coordinate_groups, halves, GroupPredicate, GroupSpec};
use crate::error::{check_alpha, Error, Result};
use crate::io::{check_fractions, CsvSchema};
use crate::rule::SetDomain;
use crate::score::ScoreKind;
use crate::synth::SynthFamily;
use crate::trainer::{ArchSpec, Optimizer, SelectConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Fresh draws: the first `n_train` rows fit the predictor, the next
    /// `n_cal` calibrate and the last `n_test` evaluate.
    Synthetic {
        family: SynthFamily,
        #[serde(default)]
        n_train: usize,
        n_cal: usize,
        n_test: usize,
    },
    /// A CSV file, shuffled and split by fractions.
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
        #[serde(default = "default_split")]
        split: [f64; 3],
    },
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorSource {
    /// The synthetic family's regression function.
    True,
    /// Least squares on the training split.
    Ols,
    /// Predictions carried on the samples.
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub kind: ScoreKind,
    pub predictor: PredictorSource,
    /// Min-max normalize scores using the calibration split.
    pub normalize: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kind: ScoreKind::AbsoluteResidual,
            predictor: PredictorSource::Ols,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlcpMethod {
    #[serde(default)]
    pub name: Option<String>,
    pub m: usize,
    #[serde(default = "linear")]
    pub arch: ArchSpec,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Defaults by optimizer and architecture.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default = "default_steps")]
    pub steps_per_epoch: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn linear() -> ArchSpec {
    ArchSpec::Linear
}
fn default_epochs() -> usize {
    200
}
fn default_steps() -> usize {
    1
}
fn default_tol() -> f64 {
    1e-6
}
fn default_patience() -> usize {
    5
}
fn default_temperature() -> f64 {
    1.0
}

impl PlcpMethod {
    pub fn new(m: usize) -> Self {
        Self {
            name: None,
            m,
            arch: ArchSpec::Linear,
            optimizer: Optimizer::default(),
            lr: None,
            epochs: default_epochs(),
            batch: None,
            steps_per_epoch: 1,
            tol: default_tol(),
            patience: default_patience(),
            temperature: 1.0,
            weight_decay: 0.0,
        }
    }

    pub fn train_config(&self, alpha: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha,
            m: self.m,
            lr: self.lr.unwrap_or_else(|| self.arch.default_lr(self.optimizer)),
            arch: self.arch.clone(),
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch: self.batch,
            steps_per_epoch: self.steps_per_epoch,
            tol: self.tol,
            patience: self.patience,
            seed,
            temperature: self.temperature,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodConfig {
    Split,
    Group { groups: GroupSpec },
    Plcp(PlcpMethod),
}

impl MethodConfig {
    pub fn name(&self) -> String {
        match self {
            MethodConfig::Split => "split".into(),
            MethodConfig::Group { .. } => "group".into(),
            MethodConfig::Plcp(p) => p.name.clone().unwrap_or_else(|| format!("plcp_m{}", p.m)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub score: ScoreConfig,
    pub methods: Vec<MethodConfig>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Reporting groups; defaults follow the synthetic family.
    #[serde(default)]
    pub groups: Option<Vec<GroupPredicate>>,
    #[serde(default)]
    pub domain: Option<SetDomain>,
    #[serde(default)]
    pub randomized_assignment: bool,
    #[serde(default)]
    pub select: Option<SelectConfig>,
}

fn default_alpha() -> f64 {
    0.1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        match &self.data {
            DataSource::Synthetic { family, n_train, n_cal, n_test } => {
                family.validate()?;
                if *n_cal == 0 || *n_test == 0 {
                    return Err(Error::Config("n_cal and n_test must be positive".into()));
                }
                if self.score.predictor == PredictorSource::Ols && *n_train == 0 {
                    return Err(Error::Config("an OLS predictor needs n_train > 0".into()));
                }
                if self.score.predictor == PredictorSource::Data {
                    return Err(Error::Config("synthetic data carries no predictions".into()));
                }
            }
            DataSource::Csv { split, .. } => {
                check_fractions(*split)?;
                if self.score.predictor == PredictorSource::True {
                    return Err(Error::Config("the true predictor exists only for synthetic data".into()));
                }
            }
        }
        for m in &self.methods {
            if let MethodConfig::Plcp(p) = m {
                p.train_config(self.alpha, self.seed).validate()?;
            }
        }
        let mut names: Vec<String> = self.methods.iter().map(MethodConfig::name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.methods.len() {
            return Err(Error::Config("method names must be unique".into()));
        }
        Ok(())
    }

    /// Reporting groups after defaults are applied.
    pub fn resolved_groups(&self) -> Vec<GroupPredicate> {
        if let Some(g) = &self.groups {
            return g.clone();
        }
        match &self.data {
            DataSource::Synthetic { family, .. } => match family {
                SynthFamily::Intro { .. } => halves(0, 0.0),
                SynthFamily::LinearScale { .. } => halves(0, 0.5),
                SynthFamily::HighDim { .. } => binary_coordinate_groups(10),
            },
            DataSource::Csv { .. } => Vec::new(),
        }
    }

    pub fn resolved_domain(&self) -> SetDomain {
        self.domain.clone().unwrap_or(SetDomain::Interval)
    }

    /// The configuration with every default written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.groups = Some(self.resolved_groups());
        c.domain = Some(self.resolved_domain());
        for m in &mut c.methods {
            if let MethodConfig::Plcp(p) = m {
                p.lr = Some(p.lr.unwrap_or_else(|| p.arch.default_lr(p.optimizer)));
                p.name = Some(MethodConfig::Plcp(p.clone()).name());
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const INTRO: &str = r#"{
        "data": {"type": "synthetic", "family": {"type": "intro"}, "n_cal": 100, "n_test": 100},
        "score": {"predictor": "true"},
        "methods": [{"method": "split"}, {"method": "plcp", "m": 2}],
        "seed": 7
    }"#;

    #[test]
    fn parses_and_defaults() {
        let cfg = ExperimentConfig::from_json(INTRO).unwrap();
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.resolved_groups().len(), 2);
        let r = cfg.resolved();
        let MethodConfig::Plcp(p) = &r.methods[1] else { panic!() };
        assert_eq!(p.lr, Some(0.1));
        assert_eq!(p.name.as_deref(), Some("plcp_m2"));
        let echo = serde_json::to_string(&r).unwrap();
        assert_eq!(ExperimentConfig::from_json(&echo).unwrap(), r);
    }

    #[test]
    fn unknown_keys_rejected() {
        let typo = INTRO.replace("\"seed\"", "\"sede\"");
        assert!(matches!(ExperimentConfig::from_json(&typo), Err(Error::Config(_))));
        let nested = INTRO.replace("\"m\": 2", "\"m\": 2, \"epoch\": 3");
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let data = INTRO.replace("\"n_cal\"", "\"ncal\": 1, \"n_cal\"");
        assert!(ExperimentConfig::from_json(&data).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_json(&INTRO.replace("\"seed\": 7", "\"alpha\": 1.5")).is_err());
        assert!(ExperimentConfig::from_json(&INTRO.replace("\"m\": 2", "\"m\": 0")).is_err());
        assert!(ExperimentConfig::from_json(&INTRO.replace("\"true\"", "\"ols\"")).is_err());
        let dup = INTRO.replace("{\"method\": \"split\"}", "{\"method\": \"plcp\", \"m\": 2}");
        assert!(ExperimentConfig::from_json(&dup).is_err());
    }
}
