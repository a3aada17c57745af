use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_mae, format_float, ols_slope, pair_mae_final, ExperimentConfig, HarnessError, ModelKind};
use crate::gauss::{make_split, splitmix64, true_llr, true_log_posterior, FeatureSequence, GaussianSpec, Split};
use crate::nets::Integrator;
use crate::optim::{train, Estimator, MetricsRow};
use crate::sprt::{mean_sem, sat_points, SatPoint};
use crate::tandem::{tandem_llr, LlrTrajectory, PosteriorTrajectoryPair, WindowPlan};

/// Everything one (variant, model, seed) run produced.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub variant: String,
    pub model: ModelKind,
    pub seed: u64,
    pub mae_curve: Vec<(usize, f64)>,
    pub final_mae: f64,
    pub pair_mae: Vec<((usize, usize), f64)>,
    pub zero_pair_mae: Vec<((usize, usize), f64)>,
    pub zero_final_mae: f64,
    /// Mean least-squares slope of `lambda_{y,l}` over `[N+1, T]` on correctly decided test samples.
    pub slope: f64,
    pub best_epoch: usize,
    pub steps: usize,
    pub log: Vec<MetricsRow>,
    pub dumped: Vec<(usize, LlrTrajectory, LlrTrajectory)>,
    pub sat: Vec<SatPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    #[serde(deserialize_with = "null_as_nan")]
    pub mean: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub sem: f64,
}

/// JSON writes non-finite floats as `null`; read them back as NaN.
fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl MeanSem {
    fn of(xs: &[f64]) -> Self {
        let (mean, sem) = mean_sem(xs);
        Self { mean, sem }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSeed {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub variant: String,
    pub model: ModelKind,
    pub offset: f64,
    pub horizon: usize,
    pub order: usize,
    pub seeds: Vec<u64>,
    pub per_seed_mae_final_t: Vec<f64>,
    pub mae_final_t: MeanSem,
    /// Keyed `"k-l"`.
    pub pair_mae_final_t: BTreeMap<String, MeanSem>,
    pub zero_predictor_mae_final_t: MeanSem,
    pub zero_predictor_pair_mae_final_t: BTreeMap<String, MeanSem>,
    pub llr_slope: MeanSem,
    pub failed: Vec<FailedSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub preset: String,
    pub entries: Vec<SummaryEntry>,
    pub warnings: Vec<String>,
}

impl Summary {
    pub fn entry(&self, variant: &str, model: ModelKind) -> Option<&SummaryEntry> {
        self.entries.iter().find(|e| e.variant == variant && e.model == model)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub summary: Summary,
    pub results: Vec<SeedResult>,
}

fn data_spec(base: &GaussianSpec, seed: u64, per_class: usize) -> GaussianSpec {
    GaussianSpec {
        seed: splitmix64(base.seed ^ splitmix64(seed)),
        per_class,
        ..base.clone()
    }
}

struct SplitData {
    seqs: Vec<FeatureSequence>,
    truth: Vec<LlrTrajectory>,
}

fn split_data(spec: &GaussianSpec, split: Split) -> Result<SplitData, HarnessError> {
    let seqs = make_split(spec, split)?;
    let truth = seqs.iter().map(|s| true_llr(s, spec)).collect::<Result<_, _>>()?;
    Ok(SplitData { seqs, truth })
}

fn plan_for(config: &ExperimentConfig) -> Result<WindowPlan, HarnessError> {
    let plan = WindowPlan::new(config.gaussian.horizon, config.order)?;
    Ok(if config.prefix_windows { plan.with_prefix() } else { plan })
}

/// TANDEM trajectories from the exact Bayes posteriors of every window.
fn oracle_llrs(
    seqs: &[FeatureSequence],
    spec: &GaussianSpec,
    plan: &WindowPlan,
) -> Result<Vec<LlrTrajectory>, HarnessError> {
    let k = spec.num_classes;
    let priors = vec![1.0 / k as f64; k];
    let log_priors: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
    seqs.iter()
        .map(|s| {
            let post = |ranges: &[std::ops::Range<usize>]| -> Vec<Vec<f64>> {
                ranges
                    .iter()
                    .map(|r| true_log_posterior(s.window(r.clone()), spec, &priors))
                    .collect()
            };
            let pair = PosteriorTrajectoryPair::from_log_probabilities(
                plan,
                post(&plan.prefix),
                post(&plan.full),
                post(&plan.short),
                log_priors.clone(),
            )?;
            Ok(tandem_llr(&pair)?)
        })
        .collect()
}

fn correct_sample_slope(est: &[LlrTrajectory], labels: &[usize], order: usize) -> f64 {
    let mut slopes = Vec::new();
    for (e, &y) in est.iter().zip(labels) {
        let horizon = e.horizon();
        let from = e.start().max(order + 1);
        if horizon < from + 1 {
            return f64::NAN;
        }
        if e.min_margin(horizon, y) <= 0.0 {
            continue;
        }
        let ts: Vec<f64> = (from..=horizon).map(|t| t as f64).collect();
        for l in (0..e.classes()).filter(|&l| l != y) {
            let ys: Vec<f64> = (from..=horizon).map(|t| e.get(t, y, l)).collect();
            slopes.push(ols_slope(&ts, &ys));
        }
    }
    if slopes.is_empty() {
        f64::NAN
    } else {
        slopes.iter().sum::<f64>() / slopes.len() as f64
    }
}

fn zero_like(t: &LlrTrajectory, start: usize) -> Result<LlrTrajectory, HarnessError> {
    let rows = vec![vec![0.0; t.classes()]; t.horizon() + 1 - start];
    Ok(LlrTrajectory::from_scores(t.order(), t.horizon(), start, &rows)?)
}

fn model_seed(seed: u64, model: ModelKind) -> u64 {
    splitmix64(seed ^ ((model as u64 + 1) << 40))
}

/// Trains and evaluates every model of one (variant, seed) cell on a shared dataset.
fn run_cell(config: &ExperimentConfig, variant: &str, seed: u64) -> Vec<(ModelKind, Result<SeedResult, String>)> {
    let data = (|| -> Result<_, HarnessError> {
        let g = &config.gaussian;
        Ok((
            data_spec(g, seed, g.per_class),
            split_data(&data_spec(g, seed, g.per_class), Split::Train)?,
            split_data(&data_spec(g, seed, config.val_per_class), Split::Val)?,
            split_data(&data_spec(g, seed, config.test_per_class), Split::Test)?,
            plan_for(config)?,
        ))
    })();
    let (spec, tr, va, te, plan) = match data {
        Ok(d) => d,
        Err(e) => return config.models.iter().map(|&m| (m, Err(e.to_string()))).collect(),
    };
    config
        .models
        .iter()
        .map(|&model| {
            let r = run_model(config, variant, seed, model, &spec, &plan, (&tr, &va, &te)).map_err(|e| e.to_string());
            (model, r)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_model(
    config: &ExperimentConfig,
    variant: &str,
    seed: u64,
    model: ModelKind,
    spec: &GaussianSpec,
    plan: &WindowPlan,
    (tr, va, te): (&SplitData, &SplitData, &SplitData),
) -> Result<SeedResult, HarnessError> {
    let (est, log, best_epoch, steps) = match model.integrator(&config.model, spec.dim, spec.num_classes, config.order) {
        None => (oracle_llrs(&te.seqs, spec, plan)?, Vec::new(), 0, 0),
        Some(net) => {
            let integrator = Integrator::new(&net, model_seed(seed, model))?;
            let estimator = Estimator::new(integrator, plan.clone(), model.formula());
            let out = train(
                estimator,
                (&tr.seqs, &tr.truth),
                (&va.seqs, &va.truth),
                &config.train,
                seed,
            )?;
            (out.estimator.estimate(&te.seqs)?, out.log, out.best_epoch, out.steps)
        }
    };
    let mae_curve = compute_mae(&est, &te.truth)?;
    let final_mae = mae_curve.last().map_or(f64::NAN, |&(_, m)| m);
    let start = est[0].start();
    let zeros: Vec<LlrTrajectory> = te.truth.iter().map(|t| zero_like(t, start)).collect::<Result<_, _>>()?;
    let zero_curve = compute_mae(&zeros, &te.truth)?;
    let labels: Vec<usize> = te.seqs.iter().map(|s| s.label).collect();
    let sat = if config.sat_thresholds.is_empty() {
        Vec::new()
    } else {
        sat_points(&est, &labels, &config.sat_thresholds)?
    };
    let dumped = (0..config.dump_samples.min(est.len()))
        .map(|i| (te.seqs[i].id, est[i].clone(), te.truth[i].clone()))
        .collect();
    Ok(SeedResult {
        variant: variant.to_string(),
        model,
        seed,
        final_mae,
        pair_mae: pair_mae_final(&est, &te.truth),
        zero_pair_mae: pair_mae_final(&zeros, &te.truth),
        zero_final_mae: zero_curve.last().map_or(f64::NAN, |&(_, m)| m),
        slope: correct_sample_slope(&est, &labels, config.order),
        mae_curve,
        best_epoch,
        steps,
        log,
        dumped,
        sat,
    })
}

/// Runs every (variant, model, seed) of `config` and writes the artifacts to `config.out_dir`.
///
/// Cells run in parallel; outputs are ordered by variant, model, then seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    config.validate()?;
    let resolved: Vec<ExperimentConfig> = config.variants.iter().map(|v| config.resolve(v)).collect::<Result<_, _>>()?;
    let cells: Vec<(usize, u64)> = (0..resolved.len())
        .flat_map(|v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let outputs: Vec<Vec<(ModelKind, Result<SeedResult, String>)>> = cells
        .par_iter()
        .map(|&(v, seed)| run_cell(&resolved[v], &config.variants[v].name, seed))
        .collect();

    let mut results = Vec::new();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (v, cfg) in resolved.iter().enumerate() {
        let variant = &config.variants[v].name;
        for (mi, &model) in cfg.models.iter().enumerate() {
            let mut ok = Vec::new();
            let mut failed = Vec::new();
            for (ci, &(cv, seed)) in cells.iter().enumerate() {
                if cv != v {
                    continue;
                }
                match &outputs[ci][mi].1 {
                    Ok(r) => ok.push(r.clone()),
                    Err(e) => {
                        warnings.push(format!("{variant}/{model} seed {seed} excluded: {e}"));
                        failed.push(FailedSeed {
                            seed,
                            error: e.clone(),
                        });
                    }
                }
            }
            entries.push(summarize(cfg, variant, model, &ok, failed));
            results.extend(ok);
        }
    }
    let summary = Summary {
        preset: config.preset.clone(),
        entries,
        warnings,
    };
    write_artifacts(&config.out_dir, config, &summary, &results)?;
    Ok(RunReport {
        out_dir: config.out_dir.clone(),
        summary,
        results,
    })
}

fn pair_key((k, l): (usize, usize)) -> String {
    format!("{k}-{l}")
}

fn summarize(cfg: &ExperimentConfig, variant: &str, model: ModelKind, ok: &[SeedResult], failed: Vec<FailedSeed>) -> SummaryEntry {
    let collect = |f: &dyn Fn(&SeedResult) -> f64| -> Vec<f64> { ok.iter().map(f).collect() };
    let pairs = |zero: bool| -> BTreeMap<String, MeanSem> {
        let Some(first) = ok.first() else {
            return BTreeMap::new();
        };
        let src = |r: &SeedResult| if zero { r.zero_pair_mae.clone() } else { r.pair_mae.clone() };
        src(first)
            .iter()
            .enumerate()
            .map(|(i, &(p, _))| (pair_key(p), MeanSem::of(&collect(&|r| src(r)[i].1))))
            .collect()
    };
    let finals = collect(&|r| r.final_mae);
    SummaryEntry {
        variant: variant.to_string(),
        model,
        offset: cfg.gaussian.offset,
        horizon: cfg.gaussian.horizon,
        order: cfg.order,
        seeds: ok.iter().map(|r| r.seed).collect(),
        mae_final_t: MeanSem::of(&finals),
        per_seed_mae_final_t: finals,
        pair_mae_final_t: pairs(false),
        zero_predictor_mae_final_t: MeanSem::of(&collect(&|r| r.zero_final_mae)),
        zero_predictor_pair_mae_final_t: pairs(true),
        llr_slope: MeanSem::of(&collect(&|r| r.slope)),
        failed,
    }
}

fn csv_writer(dir: &Path, name: &str, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>, HarnessError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?));
    w.write_record(header)?;
    Ok(w)
}

fn write_artifacts(dir: &Path, config: &ExperimentConfig, summary: &Summary, results: &[SeedResult]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let sat = !config.sat_thresholds.is_empty();
    let f = format_float;

    let mut traj = csv_writer(
        dir,
        "llr_trajectories.csv",
        &["variant", "model", "seed", "sample_id", "t", "k", "l", "true_llr", "est_llr"],
    )?;
    let mut mae = csv_writer(dir, "mae_vs_t.csv", &["variant", "model", "seed", "t", "mae"])?;
    let mut metrics = csv_writer(
        dir,
        "metrics.csv",
        &["variant", "model", "seed", "epoch", "split", "lsel", "mce", "total_loss", "mae_final_t"],
    )?;
    for r in results {
        let (v, m, s) = (r.variant.as_str(), r.model.name(), r.seed.to_string());
        for (id, est, truth) in &r.dumped {
            for t in est.times() {
                for k in 0..est.classes() {
                    for l in 0..k {
                        traj.write_record([
                            v,
                            m,
                            &s,
                            &id.to_string(),
                            &t.to_string(),
                            &k.to_string(),
                            &l.to_string(),
                            &f(truth.get(t, k, l)),
                            &f(est.get(t, k, l)),
                        ])?;
                    }
                }
            }
        }
        for &(t, e) in &r.mae_curve {
            mae.write_record([v, m, &s, &t.to_string(), &f(e)])?;
        }
        for row in &r.log {
            metrics.write_record([
                v,
                m,
                &s,
                &row.epoch.to_string(),
                &row.split,
                &f(row.lsel),
                &f(row.mce),
                &f(row.total_loss),
                &f(row.mae_final_t),
            ])?;
        }
    }
    traj.flush()?;
    mae.flush()?;
    metrics.flush()?;

    if sat {
        let mut w = csv_writer(
            dir,
            "sat_curve.csv",
            &["variant", "model", "seed", "threshold", "mean_hitting_time", "mean_per_class_error"],
        )?;
        for r in results {
            for p in &r.sat {
                w.write_record([
                    r.variant.as_str(),
                    r.model.name(),
                    &r.seed.to_string(),
                    &f(p.threshold),
                    &f(p.mean_hitting_time),
                    &f(p.mean_per_class_error),
                ])?;
            }
        }
        w.flush()?;
    }

    write_json(&dir.join("config.json"), config)?;
    write_json(&dir.join("summary.json"), summary)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let mut js = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut js, value)?;
    js.write_all(b"\n")?;
    js.flush()?;
    Ok(())
}
