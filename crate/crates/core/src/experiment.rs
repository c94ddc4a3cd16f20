//! Runs configured experiments and writes their result files.

use std::fs;
use std::path::Path;

use crate::baselines::{group_conditional, split_conformal};
use crate::config::{DataSource, ExperimentConfig, MethodConfig, PredictorSource};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, load_csv, save_csv, split_dataset, CsvSchema, TabularDataset};
use crate::metrics::{evaluate, EvalReport};
use crate::rule::{AssignmentMode, PlcpRule, ThresholdRule};
use crate::score::{LabeledSample, ScoreKind, ScoreSpec, ScoredSample};
use crate::synth::{ols_fit, OracleSpec};
use crate::trainer::{fit_plcp, select_m, SelectReport, TrainTrace};

pub const METRICS_HEADER: &str = "method,group,count,coverage,mean_length,msce,pearson,hsic";

/// Train, calibration and test samples.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<LabeledSample>,
    pub cal: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.data {
        DataSource::Synthetic { family, n_train, n_cal, n_test } => {
            let mut all = family.generate(n_train + n_cal + n_test, cfg.seed)?;
            let test = all.split_off(n_train + n_cal);
            let cal = all.split_off(*n_train);
            Ok(Splits { train: all, cal, test })
        }
        DataSource::Csv { path, schema, split } => {
            let samples = load_csv(path)?.samples(schema)?;
            let (train, cal, test) = split_dataset(&samples, *split, cfg.seed)?;
            Ok(Splits { train, cal, test })
        }
    }
}

/// Score specification with its predictor fitted and normalization set.
pub fn build_score(cfg: &ExperimentConfig, splits: &Splits) -> Result<ScoreSpec> {
    let mut spec = ScoreSpec::new(cfg.score.kind);
    if cfg.score.kind == ScoreKind::AbsoluteResidual {
        spec.predictor = match cfg.score.predictor {
            PredictorSource::True => match &cfg.data {
                DataSource::Synthetic { family, .. } => Some(family.true_predictor()),
                DataSource::Csv { .. } => return Err(Error::Config("no true predictor for CSV data".into())),
            },
            PredictorSource::Ols => Some(ols_fit(&splits.train)?),
            PredictorSource::Data => None,
        };
    }
    if cfg.score.normalize {
        spec = spec.with_normalization_from(&splits.cal)?;
    }
    Ok(spec)
}

/// Conditional score law, available when the score is the raw residual
/// against the true regression function.
pub fn oracle_for(cfg: &ExperimentConfig) -> Result<Option<OracleSpec>> {
    match &cfg.data {
        DataSource::Synthetic { family, .. }
            if cfg.score.kind == ScoreKind::AbsoluteResidual
                && cfg.score.predictor == PredictorSource::True
                && !cfg.score.normalize =>
        {
            Ok(Some(family.oracle(cfg.alpha)?))
        }
        _ => Ok(None),
    }
}

/// Everything produced by one experiment.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub reports: Vec<(String, EvalReport)>,
    pub plcp: Vec<(String, PlcpRule, TrainTrace)>,
    pub metrics_csv: String,
    pub trace_csv: String,
}

/// Fits every configured method on the calibration split and evaluates it
/// on the test split.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let splits = load_splits(&cfg)?;
    let spec = build_score(&cfg, &splits)?;
    let cal: Vec<ScoredSample> = spec.score_all(&splits.cal)?;
    let oracle = oracle_for(&cfg)?;
    let groups = cfg.resolved_groups();
    let domain = cfg.resolved_domain();

    let mut reports = Vec::new();
    let mut plcp = Vec::new();
    for method in &cfg.methods {
        let name = method.name();
        let report = match method {
            MethodConfig::Split => {
                let scores: Vec<f64> = cal.iter().map(|s| s.s).collect();
                let rule = split_conformal(&scores, cfg.alpha, spec.clone())?;
                log::info!("{name}: threshold {}", rule.threshold);
                evaluate(&rule, &splits.test, &domain, &groups, oracle.as_ref())?
            }
            MethodConfig::Group { groups: spec_groups } => {
                let rule = group_conditional(&cal, spec_groups, cfg.alpha, spec.clone())?;
                evaluate(&rule, &splits.test, &domain, &groups, oracle.as_ref())?
            }
            MethodConfig::Plcp(p) => {
                let tc = p.train_config(cfg.alpha, cfg.seed);
                let (mut rule, trace) = fit_plcp(&cal, &tc, spec.clone())?;
                if cfg.randomized_assignment {
                    rule = rule.with_mode(AssignmentMode::Randomized { seed: cfg.seed });
                }
                log::info!("{name}: {} epochs, objective {:.6}", trace.epochs_run, trace.final_objective());
                let report = evaluate(&rule, &splits.test, &domain, &groups, oracle.as_ref())?;
                plcp.push((name.clone(), rule, trace));
                report
            }
        };
        reports.push((name, report));
    }
    let metrics_csv = metrics_csv(&reports);
    let trace_csv = trace_csv(plcp.iter().map(|(n, _, t)| (n.as_str(), t)));
    Ok(ExperimentOutput {
        config: cfg,
        reports,
        plcp,
        metrics_csv,
        trace_csv,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// One summary row (`group = all`) per method followed by its group rows.
pub fn metrics_csv(reports: &[(String, EvalReport)]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (name, r) in reports {
        out.push_str(&format!(
            "{name},all,{},{},{},{},{},{}\n",
            r.n,
            fmt_f64(r.marginal_coverage),
            fmt_f64(r.mean_length),
            opt(r.msce),
            fmt_f64(r.pearson_r),
            fmt_f64(r.hsic)
        ));
        for g in &r.per_group {
            out.push_str(&format!(
                "{name},{},{},{},{},,,\n",
                g.name,
                g.count,
                g.coverage.map(fmt_f64).unwrap_or_else(|| "absent".into()),
                opt(g.mean_length),
            ));
        }
    }
    out
}

pub fn trace_csv<'a>(traces: impl Iterator<Item = (&'a str, &'a TrainTrace)>) -> String {
    let mut out = String::from("method,epoch,objective,pre_q_objective\n");
    for (name, t) in traces {
        for (e, v) in t.objectives.iter().enumerate() {
            let pre = if e == 0 { String::new() } else { fmt_f64(t.pre_q_objectives[e - 1]) };
            out.push_str(&format!("{name},{e},{},{pre}\n", fmt_f64(*v)));
        }
    }
    out
}

/// Runs the experiment and writes `metrics.csv`, `trace.csv`,
/// `config.echo` and one checkpoint per PLCP method (`rule.model` for the
/// first, `rule.<name>.model` for the rest).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let output = run(cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.csv"), &output.metrics_csv)?;
    fs::write(out_dir.join("trace.csv"), &output.trace_csv)?;
    fs::write(out_dir.join("config.echo"), serde_json::to_string_pretty(&output.config)? + "\n")?;
    for (k, (name, rule, _)) in output.plcp.iter().enumerate() {
        let file = if k == 0 { "rule.model".to_string() } else { format!("rule.{name}.model") };
        rule.save(&out_dir.join(file))?;
    }
    Ok(output)
}

/// Runs the group-count search for the first PLCP method in `cfg`.
pub fn select_m_cmd(cfg: &ExperimentConfig) -> Result<SelectReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let template = cfg
        .methods
        .iter()
        .find_map(|m| match m {
            MethodConfig::Plcp(p) => Some(p.train_config(cfg.alpha, cfg.seed)),
            _ => None,
        })
        .ok_or_else(|| Error::Config("select-m needs a plcp method as template".into()))?;
    let splits = load_splits(&cfg)?;
    let spec = build_score(&cfg, &splits)?;
    let cal = spec.score_all(&splits.cal)?;
    select_m(&cal, &template, &cfg.select.clone().unwrap_or_default(), spec)
}

/// Writes `train.csv`, `cal.csv` and `test.csv`.
pub fn generate_cmd(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Splits> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    fs::create_dir_all(out_dir)?;
    for (file, part) in [("train.csv", &splits.train), ("cal.csv", &splits.cal), ("test.csv", &splits.test)] {
        if !part.is_empty() {
            save_csv(&out_dir.join(file), &TabularDataset::from_samples(part)?)?;
        }
    }
    Ok(splits)
}

/// Scores a CSV with a saved rule and reports its coverage and set sizes.
pub fn evaluate_cmd(rule: &PlcpRule, data: &Path, schema: &CsvSchema) -> Result<EvalReport> {
    let samples = load_csv(data)?.samples(schema)?;
    let domain = crate::rule::SetDomain::Interval;
    let domain = if rule.score_spec().kind == ScoreKind::AbsoluteResidual {
        domain
    } else {
        match samples.first().and_then(|s| s.pred.as_ref()) {
            Some(crate::score::Prediction::Probs(p)) => crate::rule::SetDomain::Classes(p.len()),
            _ => return Err(Error::Data("cannot size prediction sets for this score".into())),
        }
    };
    evaluate(rule, &samples, &domain, &[], None)
}
