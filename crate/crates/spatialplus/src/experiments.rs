//! End-to-end simulation studies: fits the requested estimator set to every
//! replicate of a scenario, records effect estimates and fitted-value errors,
//! and evaluates the headline comparisons as pass/fail thresholds.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{fit_model, mse_fitted, ModelKind, ModelTag, RegressionProblem};
use crate::fields::{generate_replicate, SimScenario};
use crate::glm::{fit_glm_null, fit_glm_rsr, fit_glm_spatial, fit_glm_spatial_plus, Family};

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, penalized) = match s.strip_suffix("_fx") {
            Some(base) => (base, false),
            None => (s, true),
        };
        let kind = match name {
            "null" => ModelKind::Null,
            "spatial" => ModelKind::Spatial,
            "rsr" => ModelKind::Rsr,
            "gsem" => ModelKind::Gsem,
            "spatial_plus" | "spatial+" => ModelKind::SpatialPlus,
            "partial_residual" => ModelKind::PartialResidual,
            other => {
                return Err(Error::InvalidConfig(format!("unknown model `{other}`")));
            }
        };
        Ok(ModelTag { kind, penalized })
    }
}

/// A full study description: scenario, estimator set and whether the
/// headline thresholds should be evaluated.
#[derive(Clone)]
pub struct ExperimentConfig {
    pub scenario: SimScenario,
    pub models: Vec<ModelTag>,
    pub check_thresholds: bool,
}

impl ExperimentConfig {
    /// The Gaussian comparison set: the null model plus penalized and
    /// unpenalized variants of the four spatial-effect models.
    pub fn gaussian_default(scenario: SimScenario) -> Self {
        let models = [
            "null",
            "spatial",
            "spatial_fx",
            "rsr",
            "rsr_fx",
            "gsem",
            "gsem_fx",
            "spatial_plus",
            "spatial_plus_fx",
        ]
        .iter()
        .map(|s| s.parse().expect("static tags"))
        .collect();
        Self {
            scenario,
            models,
            check_thresholds: true,
        }
    }

    /// The exponential-family comparison set (gSEM does not generalize).
    pub fn glm_default(scenario: SimScenario) -> Self {
        let models = ["null", "spatial", "spatial_fx", "rsr", "spatial_plus", "spatial_plus_fx"]
            .iter()
            .map(|s| s.parse().expect("static tags"))
            .collect();
        Self {
            scenario,
            models,
            check_thresholds: true,
        }
    }

    pub fn default_for(scenario: SimScenario) -> Self {
        match scenario.family {
            Family::Gaussian => Self::gaussian_default(scenario),
            _ => Self::glm_default(scenario),
        }
    }

    /// Parses a plain `key = value` configuration (one pair per line, `#`
    /// comments allowed). Unknown keys are rejected.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut scenario = SimScenario::desk_scale();
        let mut models: Option<Vec<ModelTag>> = None;
        let mut check_thresholds = true;
        let mut binomial_size: u32 = 10;
        let mut family_name: Option<String> = None;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", line_no + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::InvalidConfig(format!("{key}: {what}: `{value}`"));
            match key {
                "scale" => match value {
                    "desk" => {
                        let (seed, fam) = (scenario.seed, scenario.family);
                        scenario = SimScenario::desk_scale().with_seed(seed).with_family(fam);
                    }
                    "paper" => {
                        let (seed, fam) = (scenario.seed, scenario.family);
                        scenario = SimScenario::paper_scale().with_seed(seed).with_family(fam);
                    }
                    _ => return Err(bad("expected desk or paper")),
                },
                "n" => scenario.n_sites = value.parse().map_err(|_| bad("not an integer"))?,
                "k" => scenario.basis_rank = value.parse().map_err(|_| bad("not an integer"))?,
                "grid" => scenario.grid_side = value.parse().map_err(|_| bad("not an integer"))?,
                "replicates" => {
                    scenario.replicates = value.parse().map_err(|_| bad("not an integer"))?
                }
                "seed" => scenario.seed = value.parse().map_err(|_| bad("not an integer"))?,
                "beta" => scenario.beta_true = value.parse().map_err(|_| bad("not a number"))?,
                "sigma_x" => scenario.sigma_x = value.parse().map_err(|_| bad("not a number"))?,
                "sigma_y" => scenario.sigma_y = value.parse().map_err(|_| bad("not a number"))?,
                "binomial_size" => {
                    binomial_size = value.parse().map_err(|_| bad("not an integer"))?
                }
                "family" => family_name = Some(value.to_string()),
                "models" => {
                    let parsed: Result<Vec<ModelTag>> =
                        value.split(',').map(|m| m.trim().parse()).collect();
                    models = Some(parsed?);
                }
                "thresholds" => {
                    check_thresholds = value.parse().map_err(|_| bad("expected true or false"))?
                }
                other => {
                    return Err(Error::InvalidConfig(format!("unknown key `{other}`")));
                }
            }
        }
        if let Some(name) = family_name {
            scenario.family = parse_family(&name, binomial_size)?;
        }
        let mut config = Self::default_for(scenario);
        if let Some(models) = models {
            config.models = models;
        }
        config.check_thresholds = check_thresholds;
        Ok(config)
    }
}

pub fn parse_family(name: &str, binomial_size: u32) -> Result<Family> {
    match name {
        "gaussian" => Ok(Family::Gaussian),
        "poisson" => Ok(Family::Poisson),
        "exponential" => Ok(Family::Exponential),
        "binomial" => Ok(Family::Binomial {
            size: binomial_size,
        }),
        other => Err(Error::InvalidConfig(format!("unknown family `{other}`"))),
    }
}

/// One (replicate, model) cell of a study.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub model: String,
    pub beta: Option<f64>,
    pub mse: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_x: Option<f64>,
    pub edf: Option<f64>,
    pub error: Option<String>,
}

/// Per-model aggregate over replicates.
#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub model: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_beta: f64,
    pub bias: f64,
    pub sd_beta: f64,
    pub mc_se: f64,
    pub median_mse: f64,
    pub mse_q25: f64,
    pub mse_q75: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdReport {
    pub passed: bool,
    pub checks: Vec<ThresholdCheck>,
}

#[derive(Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub family: String,
    pub scenario: SimScenario,
    pub models: Vec<String>,
    pub records: Vec<ReplicateRecord>,
    pub summaries: Vec<ModelSummary>,
    pub thresholds: Option<ThresholdReport>,
}

fn fit_one(
    problem: &RegressionProblem,
    tag: ModelTag,
    family: Family,
) -> Result<crate::estimators::FitResult> {
    let mut problem = problem.clone();
    problem.penalized = tag.penalized;
    match family {
        Family::Gaussian => fit_model(&problem, tag.kind),
        _ => match tag.kind {
            ModelKind::Null => Ok(fit_glm_null(&problem, family)?.fit),
            ModelKind::Spatial => Ok(fit_glm_spatial(&problem, family)?.fit),
            ModelKind::Rsr => Ok(fit_glm_rsr(&problem, family)?.fit),
            ModelKind::SpatialPlus => Ok(fit_glm_spatial_plus(&problem, family)?.fit),
            other => Err(Error::InvalidConfig(format!(
                "model `{}` is not defined for non-Gaussian responses",
                ModelTag {
                    kind: other,
                    penalized: tag.penalized
                }
            ))),
        },
    }
}

/// Runs the study: replicates in parallel, models within a replicate
/// sequential (they share the replicate's basis). Per-replicate failures are
/// recorded, not fatal, unless they exceed 5% of all cells.
pub fn run_study(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let scenario = &config.scenario;
    for tag in &config.models {
        if scenario.family != Family::Gaussian
            && matches!(tag.kind, ModelKind::Gsem | ModelKind::PartialResidual)
        {
            return Err(Error::InvalidConfig(format!(
                "model `{tag}` is not defined for non-Gaussian responses"
            )));
        }
    }

    let mut per_replicate: Vec<(usize, Vec<ReplicateRecord>)> = (0..scenario.replicates)
        .into_par_iter()
        .map(|rep_idx| {
            let records = match generate_replicate(scenario, rep_idx) {
                Err(e) => config
                    .models
                    .iter()
                    .map(|tag| ReplicateRecord {
                        replicate: rep_idx,
                        model: tag.label(),
                        beta: None,
                        mse: None,
                        lambda: None,
                        lambda_x: None,
                        edf: None,
                        error: Some(format!("replicate generation failed: {e}")),
                    })
                    .collect(),
                Ok(rep) => {
                    let covariates = rep.x.clone().insert_axis(ndarray::Axis(1));
                    let problem = RegressionProblem::new(
                        rep.y.clone(),
                        covariates,
                        std::sync::Arc::clone(&rep.basis),
                    )
                    .expect("replicate dimensions are consistent");
                    config
                        .models
                        .iter()
                        .map(|tag| match fit_one(&problem, *tag, scenario.family) {
                            Ok(fit) => ReplicateRecord {
                                replicate: rep_idx,
                                model: tag.label(),
                                beta: Some(fit.primary_beta(false)),
                                mse: Some(mse_fitted(&fit, &rep.truth_mean)),
                                lambda: fit.lambda,
                                lambda_x: fit.lambda_x.as_ref().and_then(|v| v.first().copied()),
                                edf: Some(fit.edf),
                                error: None,
                            },
                            Err(e) => ReplicateRecord {
                                replicate: rep_idx,
                                model: tag.label(),
                                beta: None,
                                mse: None,
                                lambda: None,
                                lambda_x: None,
                                edf: None,
                                error: Some(e.to_string()),
                            },
                        })
                        .collect()
                }
            };
            (rep_idx, records)
        })
        .collect();
    per_replicate.sort_by_key(|(idx, _)| *idx);
    let records: Vec<ReplicateRecord> = per_replicate
        .into_iter()
        .flat_map(|(_, recs)| recs)
        .collect();

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed * 20 > records.len() {
        return Err(Error::TooManyFailures {
            failed,
            total: records.len(),
        });
    }

    let summaries: Vec<ModelSummary> = config
        .models
        .iter()
        .map(|tag| summarize(tag, &records, scenario.beta_true))
        .collect();

    let thresholds = if config.check_thresholds {
        Some(evaluate_thresholds(scenario, &summaries))
    } else {
        None
    };

    Ok(ExperimentReport {
        schema_version: 1,
        family: scenario.family.name().to_string(),
        scenario: scenario.clone(),
        models: config.models.iter().map(|t| t.label()).collect(),
        records,
        summaries,
        thresholds,
    })
}

fn summarize(tag: &ModelTag, records: &[ReplicateRecord], beta_true: f64) -> ModelSummary {
    let label = tag.label();
    let cells: Vec<&ReplicateRecord> = records.iter().filter(|r| r.model == label).collect();
    let ok: Vec<&&ReplicateRecord> = cells.iter().filter(|r| r.error.is_none()).collect();
    let betas: Vec<f64> = ok.iter().filter_map(|r| r.beta).collect();
    let mut mses: Vec<f64> = ok.iter().filter_map(|r| r.mse).collect();
    mses.sort_by(|a, b| a.total_cmp(b));
    let n_ok = betas.len();
    let mean = if n_ok > 0 {
        betas.iter().sum::<f64>() / n_ok as f64
    } else {
        f64::NAN
    };
    let sd = if n_ok > 1 {
        (betas.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (n_ok - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    ModelSummary {
        model: label,
        n_ok,
        n_failed: cells.len() - n_ok,
        mean_beta: mean,
        bias: mean - beta_true,
        sd_beta: sd,
        mc_se: sd / (n_ok.max(1) as f64).sqrt(),
        median_mse: quantile(&mses, 0.5),
        mse_q25: quantile(&mses, 0.25),
        mse_q75: quantile(&mses, 0.75),
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn find<'a>(summaries: &'a [ModelSummary], label: &str) -> Option<&'a ModelSummary> {
    summaries.iter().find(|s| s.model == label)
}

/// Encodes the headline comparisons of the simulation studies as pass/fail
/// checks against the summaries.
pub fn evaluate_thresholds(
    scenario: &SimScenario,
    summaries: &[ModelSummary],
) -> ThresholdReport {
    let mut checks = Vec::new();
    let beta = scenario.beta_true;
    match scenario.family {
        Family::Gaussian => {
            let plus = find(summaries, "spatial_plus");
            let gsem = find(summaries, "gsem");
            let spatial = find(summaries, "spatial");
            let null = find(summaries, "null");
            let rsr = find(summaries, "rsr");
            if let (Some(plus), Some(null), Some(rsr)) = (plus, null, rsr) {
                let ratio_null = null.bias.abs() / plus.bias.abs().max(1e-12);
                let ratio_rsr = rsr.bias.abs() / plus.bias.abs().max(1e-12);
                checks.push(ThresholdCheck {
                    name: "null_and_rsr_bias_5x_spatial_plus".into(),
                    passed: ratio_null > 5.0 && ratio_rsr > 5.0,
                    detail: format!(
                        "|bias(null)|/|bias(spatial+)| = {ratio_null:.1}, |bias(rsr)|/|bias(spatial+)| = {ratio_rsr:.1}"
                    ),
                });
            }
            if let (Some(plus), Some(spatial)) = (plus, spatial) {
                let ratio = spatial.bias.abs() / plus.bias.abs().max(1e-12);
                checks.push(ThresholdCheck {
                    name: "spatial_bias_3x_spatial_plus".into(),
                    passed: ratio > 3.0,
                    detail: format!("|bias(spatial)|/|bias(spatial+)| = {ratio:.1}"),
                });
            }
            for (name, summary) in [("spatial_plus", plus), ("gsem", gsem)] {
                if let Some(s) = summary {
                    let z = s.bias.abs() / s.mc_se;
                    checks.push(ThresholdCheck {
                        name: format!("{name}_mean_within_2_mc_se_of_truth"),
                        passed: z <= 2.0,
                        detail: format!("|mean - {beta}| = {:.4} = {z:.2} mc se", s.bias.abs()),
                    });
                }
            }
            // penalization reduces fitted-value MSE
            for kind in ["spatial", "rsr", "gsem", "spatial_plus"] {
                let pen = find(summaries, kind);
                let fx = find(summaries, &format!("{kind}_fx"));
                if let (Some(pen), Some(fx), Some(null)) = (pen, fx, null) {
                    let passed =
                        pen.median_mse < fx.median_mse && pen.median_mse < null.median_mse;
                    checks.push(ThresholdCheck {
                        name: format!("{kind}_penalized_mse_below_fx_and_null"),
                        passed,
                        detail: format!(
                            "median mse: {:.1} (pen) vs {:.1} (fx) vs {:.1} (null)",
                            pen.median_mse, fx.median_mse, null.median_mse
                        ),
                    });
                }
            }
        }
        family => {
            if let Some(spatial) = find(summaries, "spatial") {
                let z = spatial.bias.abs() / spatial.mc_se;
                checks.push(ThresholdCheck {
                    name: "spatial_significantly_biased".into(),
                    passed: z > 3.0,
                    detail: format!("|mean - {beta}| = {:.4} = {z:.2} mc se", spatial.bias.abs()),
                });
            }
            if let Some(plus) = find(summaries, "spatial_plus") {
                let (passed, detail) = match family {
                    Family::Binomial { .. } => {
                        let rel = plus.bias.abs() / beta;
                        (
                            rel <= 0.05,
                            format!("|mean - {beta}|/{beta} = {rel:.4} (allow 5%)"),
                        )
                    }
                    _ => {
                        let z = plus.bias.abs() / plus.mc_se;
                        (
                            z <= 3.0,
                            format!("|mean - {beta}| = {:.4} = {z:.2} mc se", plus.bias.abs()),
                        )
                    }
                };
                checks.push(ThresholdCheck {
                    name: "spatial_plus_broadly_unbiased".into(),
                    passed,
                    detail,
                });
            }
            if let (Some(pen), Some(fx)) = (find(summaries, "spatial"), find(summaries, "spatial_fx"))
            {
                checks.push(ThresholdCheck {
                    name: "smoothing_reduces_mse".into(),
                    passed: pen.median_mse < fx.median_mse,
                    detail: format!(
                        "median mse {:.2} (pen) vs {:.2} (fx)",
                        pen.median_mse, fx.median_mse
                    ),
                });
            }
        }
    }
    ThresholdReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

/// Writes `replicates.csv`, `summary.csv` and `report.json` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("replicates.csv"))?;
    w.write_record([
        "replicate", "model", "beta_hat", "mse", "lambda", "lambda_x", "edf", "error",
    ])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.records {
        w.write_record(&[
            r.replicate.to_string(),
            r.model.clone(),
            fmt(r.beta),
            fmt(r.mse),
            fmt(r.lambda),
            fmt(r.lambda_x),
            fmt(r.edf),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "model",
        "n_ok",
        "n_failed",
        "mean_beta",
        "bias",
        "sd_beta",
        "mc_se",
        "median_mse",
        "mse_q25",
        "mse_q75",
    ])?;
    for s in &report.summaries {
        w.write_record(&[
            s.model.clone(),
            s.n_ok.to_string(),
            s.n_failed.to_string(),
            s.mean_beta.to_string(),
            s.bias.to_string(),
            s.sd_beta.to_string(),
            s.mc_se.to_string(),
            s.median_mse.to_string(),
            s.mse_q25.to_string(),
            s.mse_q75.to_string(),
        ])?;
    }
    w.flush()?;

    let mut f = std::fs::File::create(dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    Ok(())
}
