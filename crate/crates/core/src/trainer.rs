//! Alternating minimization of the partition objective.
//!
//! Each epoch takes gradient steps on the partition model with the group
//! thresholds held fixed (the h-step), then sets every threshold to the
//! exact weighted quantile of the calibration scores under the current
//! soft assignment (the q-step). The q-step is an exact coordinate
//! minimizer, so the objective recorded after it never exceeds the value
//! just before it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, Error, Result};
use crate::partition::{Arch, PartitionModel, Workspace};
use crate::pinball::{objective_from_assignments, pinball, SortedScores};
use crate::rng;
use crate::rule::{PlcpRule, QuantileVector, ThresholdRule};
use crate::score::{ScoreSpec, ScoredSample};

/// Groups whose total soft weight falls below this keep their old threshold.
pub const DEGENERATE_WEIGHT: f64 = 1e-8;

/// Shape of the partition model; input and output widths come from the
/// data and the group count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ArchSpec {
    Linear,
    Mlp { hidden: Vec<usize> },
}

impl ArchSpec {
    pub fn build(&self, d: usize, m: usize) -> Arch {
        match self {
            ArchSpec::Linear => Arch::SoftmaxLinear { d, m },
            ArchSpec::Mlp { hidden } => {
                let mut widths = vec![d];
                widths.extend(hidden);
                widths.push(m);
                Arch::SoftmaxMlp { widths }
            }
        }
    }

    pub fn default_lr(&self, optimizer: Optimizer) -> f64 {
        match (optimizer, self) {
            (Optimizer::Adam, _) => 0.05,
            (Optimizer::Gd, ArchSpec::Linear) => 0.1,
            (Optimizer::Gd, ArchSpec::Mlp { .. }) => 0.01,
        }
    }
}

/// Update rule for the h-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent.
    #[default]
    Gd,
    /// Adam with the usual moment decays (0.9, 0.999).
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub m: usize,
    pub arch: ArchSpec,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    /// Mini-batch size; `None` is full batch.
    #[serde(default)]
    pub batch: Option<usize>,
    /// Gradient steps per h-step (per mini-batch pass when batched).
    #[serde(default = "one")]
    pub steps_per_epoch: usize,
    pub tol: f64,
    pub patience: usize,
    pub seed: u64,
    /// Softmax temperature of the partition model.
    #[serde(default = "unit")]
    pub temperature: f64,
    /// L2 penalty on weights (not biases) added to the h-step gradient.
    #[serde(default)]
    pub weight_decay: f64,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(alpha: f64, m: usize, arch: ArchSpec) -> Self {
        let optimizer = Optimizer::default();
        Self {
            alpha,
            m,
            lr: arch.default_lr(optimizer),
            arch,
            optimizer,
            epochs: 200,
            batch: None,
            steps_per_epoch: 1,
            tol: 1e-6,
            patience: 5,
            seed: 0,
            temperature: 1.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch == Some(0) || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch size and steps per epoch must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Objective history of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Objective after each q-step; entry 0 follows the initial q-step.
    pub objectives: Vec<f64>,
    /// Objective just before each epoch's q-step (after its h-step).
    pub pre_q_objectives: Vec<f64>,
    pub epochs_run: usize,
}

impl TrainTrace {
    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().expect("trace records the initial q-step")
    }

    /// Largest increase of the objective across any q-step.
    pub fn max_q_step_increase(&self) -> f64 {
        self.pre_q_objectives
            .iter()
            .zip(&self.objectives[1..])
            .map(|(before, after)| after - before)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,objective\n");
        for (e, v) in self.objectives.iter().enumerate() {
            out.push_str(&format!("{e},{}\n", crate::io::fmt_f64(*v)));
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn assignments(model: &PartitionModel, data: &[ScoredSample]) -> Result<Vec<Vec<f64>>> {
    model.forward_many(data.iter().map(|s| s.x.as_slice()))
}

/// Exact q-step. Groups with negligible weight keep `previous`.
fn q_step(sorted: &SortedScores, h: &[Vec<f64>], alpha: f64, previous: &[f64]) -> Vec<f64> {
    (0..previous.len())
        .map(|i| {
            let (q, total) = sorted.quantile(alpha, |j| h[j][i]);
            match q {
                Some(q) if total >= DEGENERATE_WEIGHT => q,
                _ => previous[i],
            }
        })
        .collect()
}

/// Learns a partition model and group thresholds on calibration scores.
pub fn fit_plcp(data: &[ScoredSample], cfg: &TrainConfig, score: ScoreSpec) -> Result<(PlcpRule, TrainTrace)> {
    cfg.validate()?;
    let d = data.first().ok_or(Error::Empty("calibration data"))?.x.len();
    if let Some(bad) = data.iter().find(|s| s.x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.x.len(),
        });
    }
    let scores: Vec<f64> = data.iter().map(|s| s.s).collect();
    let sorted = SortedScores::new(&scores);
    let alpha = cfg.alpha;

    let mut model = PartitionModel::init(cfg.arch.build(d, cfg.m), cfg.seed)?;
    model.temperature = cfg.temperature;

    // initial q-step; a group with no weight starts at the pooled quantile
    let pooled = sorted.quantile(alpha, |_| 1.0).0.expect("nonempty data");
    let mut h = assignments(&model, data)?;
    let mut q = QuantileVector::new(q_step(&sorted, &h, alpha, &vec![pooled; cfg.m]))?;
    let mut trace = TrainTrace {
        objectives: vec![objective_from_assignments(&h, &q, &scores, alpha)],
        pre_q_objectives: Vec::new(),
        epochs_run: 0,
    };

    let mut adam = Adam::new(model.params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng::substream(cfg.seed, 1);
    let mut costs = vec![0.0; cfg.m];
    let mut ws = Workspace::new(&model);
    let weight_mask = model.weight_mask();
    let mut stalled = 0;

    for _ in 0..cfg.epochs {
        // h-step
        let batch = cfg.batch.unwrap_or(data.len()).min(data.len());
        if batch < data.len() {
            order.shuffle(&mut shuffle_rng);
        }
        for _ in 0..cfg.steps_per_epoch {
            for chunk in order.chunks(batch) {
                let mut grad = vec![0.0; model.params.len()];
                let scale = 1.0 / chunk.len() as f64;
                for &j in chunk {
                    for (c, &qi) in costs.iter_mut().zip(q.values()) {
                        *c = pinball(qi, scores[j], alpha);
                    }
                    model.accumulate_gradient(&data[j].x, &costs, scale, &mut grad, &mut ws);
                }
                if cfg.weight_decay > 0.0 {
                    for (g, (p, is_weight)) in grad.iter_mut().zip(model.params.iter().zip(&weight_mask)) {
                        if *is_weight {
                            *g += cfg.weight_decay * p;
                        }
                    }
                }
                match cfg.optimizer {
                    Optimizer::Gd => {
                        for (p, g) in model.params.iter_mut().zip(&grad) {
                            *p -= cfg.lr * g;
                        }
                    }
                    Optimizer::Adam => adam.step(&mut model.params, &grad, cfg.lr),
                }
            }
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("partition parameters diverged".into()));
        }

        // q-step
        h = assignments(&model, data)?;
        trace.pre_q_objectives.push(objective_from_assignments(&h, &q, &scores, alpha));
        q = QuantileVector::new(q_step(&sorted, &h, alpha, q.values()))?;
        let obj = objective_from_assignments(&h, &q, &scores, alpha);
        let prev = trace.final_objective();
        trace.objectives.push(obj);
        trace.epochs_run += 1;

        if prev - obj < cfg.tol * prev.abs() {
            stalled += 1;
            if stalled >= cfg.patience {
                break;
            }
        } else {
            stalled = 0;
        }
    }

    log::debug!(
        "fit m={} epochs={} objective={:.6}",
        cfg.m,
        trace.epochs_run,
        trace.final_objective()
    );
    Ok((PlcpRule::new(model, q, score)?, trace))
}

/// Mean pinball loss of a rule's thresholds on held-out scores.
pub fn validation_loss(rule: &dyn ThresholdRule, data: &[ScoredSample], alpha: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("validation data"));
    }
    let mut total = 0.0;
    for (j, smp) in data.iter().enumerate() {
        total += pinball(rule.threshold(&smp.x, j as u64)?, smp.s, alpha);
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub m_start: usize,
    /// Fraction of the calibration data held out for validation.
    pub holdout_frac: f64,
    /// Relative validation improvement below which a larger `m` counts as worse.
    pub noise_tol: f64,
    pub m_max: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            m_start: 1,
            holdout_frac: 0.2,
            noise_tol: 1e-3,
            m_max: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectReport {
    /// Every evaluated `(m, validation loss)` in evaluation order.
    pub evaluated: Vec<(usize, f64)>,
    /// Length of the doubling prefix of `evaluated`.
    pub doubling_len: usize,
    pub chosen: usize,
    /// Refit on the full calibration data at the chosen `m`.
    pub rule: PlcpRule,
    pub trace: TrainTrace,
}

impl SelectReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,m,validation_loss\n");
        for (k, (m, v)) in self.evaluated.iter().enumerate() {
            let phase = if k < self.doubling_len { "double" } else { "bisect" };
            out.push_str(&format!("{phase},{m},{}\n", crate::io::fmt_f64(*v)));
        }
        out.push_str(&format!("chosen,{},\n", self.chosen));
        out
    }
}

/// `m_start, 2 m_start, 4 m_start, ...` up to `m_max`.
pub fn doubling_schedule(m_start: usize, m_max: usize) -> Vec<usize> {
    std::iter::successors(Some(m_start.max(1)), |&m| m.checked_mul(2))
        .take_while(|&m| m <= m_max.max(m_start))
        .collect()
}

/// Chooses the group count by doubling then bisection on a holdout split.
pub fn select_m(data: &[ScoredSample], template: &TrainConfig, sel: &SelectConfig, score: ScoreSpec) -> Result<SelectReport> {
    if sel.m_start == 0 {
        return Err(Error::Config("m_start must be at least 1".into()));
    }
    if !(sel.holdout_frac > 0.0 && sel.holdout_frac < 1.0) {
        return Err(Error::Config("holdout_frac must lie in (0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::substream(template.seed, 2));
    let n_val = (sel.holdout_frac * data.len() as f64).floor() as usize;
    if n_val == 0 || n_val == data.len() {
        return Err(Error::Empty("validation split"));
    }
    let val: Vec<ScoredSample> = idx[..n_val].iter().map(|&i| data[i].clone()).collect();
    let fit: Vec<ScoredSample> = idx[n_val..].iter().map(|&i| data[i].clone()).collect();

    let mut evaluated = Vec::new();
    let eval = |m: usize, evaluated: &mut Vec<(usize, f64)>| -> Result<f64> {
        let cfg = TrainConfig { m, ..template.clone() };
        let (rule, _) = fit_plcp(&fit, &cfg, score.clone())?;
        let loss = validation_loss(&rule, &val, template.alpha)?;
        log::info!("select-m: m={m} validation loss {loss:.6}");
        evaluated.push((m, loss));
        Ok(loss)
    };
    let improves = |new: f64, best: f64| new < best - sel.noise_tol * best.abs();

    let schedule = doubling_schedule(sel.m_start, sel.m_max);
    let mut best_m = schedule[0];
    let mut best = eval(best_m, &mut evaluated)?;
    let mut worse_m = None;
    for &m in &schedule[1..] {
        let loss = eval(m, &mut evaluated)?;
        if improves(loss, best) {
            best_m = m;
            best = loss;
        } else {
            worse_m = Some(m);
            break;
        }
    }
    let doubling_len = evaluated.len();

    if let Some(mut hi) = worse_m {
        let mut lo = best_m;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            let loss = eval(mid, &mut evaluated)?;
            if improves(loss, best) {
                lo = mid;
                best = loss;
            } else {
                hi = mid;
            }
        }
        best_m = lo;
    }

    let cfg = TrainConfig {
        m: best_m,
        ..template.clone()
    };
    let (rule, trace) = fit_plcp(data, &cfg, score)?;
    Ok(SelectReport {
        evaluated,
        doubling_len,
        chosen: best_m,
        rule,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::conformal_quantile;
    use crate::pinball::weighted_quantile;
    use crate::pinball::WeightedScore;
    use crate::score::ScoreKind;
    use crate::synth::SynthFamily;

    fn spec() -> ScoreSpec {
        ScoreSpec::new(ScoreKind::Precomputed)
    }

    fn intro_scores(n: usize, seed: u64) -> Vec<ScoredSample> {
        let fam = SynthFamily::intro();
        let spec = ScoreSpec::absolute_residual(fam.true_predictor());
        spec.score_all(&fam.generate(n, seed).unwrap()).unwrap()
    }

    #[test]
    fn single_group_learns_empirical_quantile() {
        let data = intro_scores(999, 4);
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::new(0.1, 1, ArchSpec::Linear)
        };
        let (rule, _) = fit_plcp(&data, &cfg, spec()).unwrap();
        let items: Vec<_> = data.iter().map(|d| WeightedScore { s: d.s, w: 1.0 }).collect();
        assert_eq!(rule.q.values()[0], weighted_quantile(&items, 0.1).unwrap());

        // differs from split conformal by at most one order statistic
        let scores: Vec<f64> = data.iter().map(|d| d.s).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let split = conformal_quantile(&scores, 0.1).unwrap();
        let a = sorted.iter().position(|&s| s == rule.q.values()[0]).unwrap();
        let b = sorted.iter().position(|&s| s == split).unwrap();
        assert!(a.abs_diff(b) <= 1);
    }

    #[test]
    fn one_epoch_q_is_weighted_quantile_under_stepped_model() {
        let data = intro_scores(500, 9);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::new(0.1, 3, ArchSpec::Linear)
        };
        let (rule, trace) = fit_plcp(&data, &cfg, spec()).unwrap();
        assert_eq!(trace.epochs_run, 1);
        for i in 0..3 {
            let items: Vec<_> = data
                .iter()
                .map(|d| WeightedScore {
                    s: d.s,
                    w: rule.model.forward(&d.x).unwrap()[i],
                })
                .collect();
            assert_eq!(rule.q.values()[i], weighted_quantile(&items, 0.1).unwrap());
        }
    }

    #[test]
    fn rejects_bad_config() {
        let data = intro_scores(10, 1);
        let mut cfg = TrainConfig::new(0.1, 2, ArchSpec::Linear);
        cfg.epochs = 0;
        assert!(fit_plcp(&data, &cfg, spec()).is_err());
        cfg.epochs = 1;
        cfg.alpha = 1.5;
        assert!(fit_plcp(&data, &cfg, spec()).is_err());
        assert!(fit_plcp(&[], &TrainConfig::new(0.1, 2, ArchSpec::Linear), spec()).is_err());
    }

    #[test]
    fn q_step_never_increases_objective_and_is_deterministic() {
        let data = intro_scores(2000, 11);
        let cfg = TrainConfig {
            epochs: 40,
            seed: 3,
            ..TrainConfig::new(0.1, 4, ArchSpec::Mlp { hidden: vec![8] })
        };
        let (rule_a, trace_a) = fit_plcp(&data, &cfg, spec()).unwrap();
        assert!(trace_a.max_q_step_increase() <= 1e-12);
        let (rule_b, trace_b) = fit_plcp(&data, &cfg, spec()).unwrap();
        assert_eq!(rule_a, rule_b);
        assert_eq!(trace_a, trace_b);
    }

    #[test]
    fn degenerate_group_keeps_threshold() {
        // a saturated model puts (numerically) no weight on group 1
        let sorted = SortedScores::new(&[0.1, 0.5, 0.9]);
        let h = vec![vec![1.0, 0.0]; 3];
        let q = q_step(&sorted, &h, 0.1, &[0.3, 7.0]);
        assert_eq!(q, vec![0.9, 7.0]);
    }

    #[test]
    fn schedule_doubles() {
        assert_eq!(doubling_schedule(2, 16), vec![2, 4, 8, 16]);
        assert_eq!(doubling_schedule(1, 5), vec![1, 2, 4]);
    }

    #[test]
    fn select_m_rejects_bad_holdout() {
        let data = intro_scores(20, 1);
        let cfg = TrainConfig::new(0.1, 1, ArchSpec::Linear);
        let sel = SelectConfig {
            holdout_frac: 0.01,
            ..Default::default()
        };
        assert!(matches!(select_m(&data, &cfg, &sel, spec()), Err(Error::Empty(_))));
    }
}
