use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ExperimentConfig, HarnessError, ModelKind};
use crate::diffcore::{finite_diff_check, DenseArray, DiffError, Primitive, Tape, Var, LAYERNORM_EPS};
use crate::gauss::{make_split, true_llr, true_posterior, FeatureSequence, GaussianSpec, Split};
use crate::losses::lsel_on_tape;
use crate::nets::Integrator;
use crate::optim::Estimator;
use crate::sprt::{mean_sem, sprt_run, wald_binary, wald_error_probe, ThresholdMatrix, WaldProbe};
use crate::tandem::{tandem_llr, LlrTrajectory, PosteriorTrajectoryPair, WindowPlan};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Largest `|tandem - truth|` over every timestep of `n` sequences at
/// offset `a`, with exact posteriors, N = 0 and uniform priors.
pub fn oracle_equivalence(a: f64, n: usize, horizon: usize) -> Result<f64, HarnessError> {
    let spec = GaussianSpec {
        offset: a,
        horizon,
        per_class: n.div_ceil(2),
        seed: 11,
        ..GaussianSpec::default()
    };
    let plan = WindowPlan::new(horizon, 0)?;
    let priors = vec![0.5, 0.5];
    let mut worst: f64 = 0.0;
    for seq in make_split(&spec, Split::Test)?.iter().take(n) {
        let full: Vec<Vec<f64>> = plan
            .full
            .iter()
            .map(|r| true_posterior(seq.window(r.clone()), &spec, &priors))
            .collect();
        let pair = PosteriorTrajectoryPair::from_probabilities(&plan, vec![], full, vec![], priors.clone())?;
        let est = tandem_llr(&pair)?;
        let truth = true_llr(seq, &spec)?;
        for t in 1..=horizon {
            worst = worst.max((est.get(t, 1, 0) - truth.get(t, 1, 0)).abs());
        }
    }
    Ok(worst)
}

type Probe = (String, Vec<DenseArray>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>>);

fn seeded(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DenseArray {
    DenseArray::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Worst relative finite-difference error of each differentiable primitive.
pub fn primitive_gradient_errors() -> Result<Vec<(String, f64)>, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = seeded(&[3, 4], &mut rng, -1.5, 1.5);
    let b = seeded(&[3, 4], &mut rng, -1.5, 1.5);
    let w = seeded(&[4, 2], &mut rng, -1.0, 1.0);
    let pos = seeded(&[3, 4], &mut rng, 0.5, 2.0);
    let batched = seeded(&[2, 3, 4], &mut rng, -1.0, 1.0);
    let away_from_kink = DenseArray::from_fn(&[3, 4], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.4 - i as f64 * 0.1 });
    // a nonlinear readout keeps every output coordinate in play
    let readout = |t: &mut Tape, v: Var| -> Result<Var, DiffError> {
        let s = t.tanh(v);
        let sq = t.mul(s, v)?;
        t.sum_all(sq)
    };
    let unary = |p: Primitive| -> Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>> {
        Box::new(move |t, v| {
            let y = t.apply(&p, &[v[0]])?;
            readout(t, y)
        })
    };
    let probes: Vec<Probe> = vec![
        (
            "matmul".into(),
            vec![a.clone(), w.clone()],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y)
            }),
        ),
        (
            "matmul-batched".into(),
            vec![batched.clone(), seeded(&[2, 4, 3], &mut rng, -1.0, 1.0)],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y)
            }),
        ),
        (
            "add".into(),
            vec![a.clone(), seeded(&[4], &mut rng, -1.0, 1.0)],
            Box::new(move |t, v| {
                let y = t.add(v[0], v[1])?;
                readout(t, y)
            }),
        ),
        (
            "multiply".into(),
            vec![a.clone(), b.clone()],
            Box::new(move |t, v| {
                let y = t.mul(v[0], v[1])?;
                readout(t, y)
            }),
        ),
        ("sigmoid".into(), vec![a.clone()], unary(Primitive::Sigmoid)),
        ("tanh".into(), vec![a.clone()], unary(Primitive::Tanh)),
        ("b2bsqrt".into(), vec![away_from_kink.clone()], unary(Primitive::B2Bsqrt { alpha: 1.0 })),
        ("softmax".into(), vec![a.clone()], unary(Primitive::SoftmaxLastAxis)),
        ("log".into(), vec![pos], unary(Primitive::Log)),
        ("sum_axis".into(), vec![batched.clone()], unary(Primitive::SumAxis { axis: 1 })),
        ("scale".into(), vec![a.clone()], unary(Primitive::Scale { factor: -0.7 })),
        (
            "concat".into(),
            vec![a.clone(), b.clone()],
            Box::new(move |t, v| {
                let y = t.apply(&Primitive::Concat { axis: 1 }, &[v[0], v[1]])?;
                readout(t, y)
            }),
        ),
        (
            "layernorm".into(),
            vec![a.clone()],
            unary(Primitive::LayerNormLastAxis { eps: LAYERNORM_EPS }),
        ),
        ("logsumexp".into(), vec![a.clone()], unary(Primitive::LogSumExpLastAxis)),
        (
            "relu".into(),
            vec![away_from_kink],
            Box::new(move |t, v| {
                let y = t.relu(v[0]);
                readout(t, y)
            }),
        ),
        (
            "slice-take-reshape-transpose".into(),
            vec![batched],
            Box::new(move |t, v| {
                let s = t.slice_axis(v[0], 2, 1, 3)?;
                let s = t.take(s, 1, vec![2, 0, 2])?;
                let s = t.transpose_last2(s)?;
                let s = t.reshape(s, vec![6, 3])?;
                readout(t, s)
            }),
        ),
        (
            "broadcast_to".into(),
            vec![seeded(&[1, 4], &mut rng, -1.0, 1.0)],
            Box::new(move |t, v| {
                let y = t.broadcast_to(v[0], vec![3, 4])?;
                let y = t.mul(y, v[0])?;
                readout(t, y)
            }),
        ),
    ];
    probes
        .into_iter()
        .map(|(name, params, f)| Ok((name, finite_diff_check(f, &params, 1e-5)?)))
        .collect()
}

/// Worst relative finite-difference error of LSEL through the TANDEM
/// formula and each trainable model kind, on a T=5, N=1, K=2, d=4 instance.
pub fn loss_gradient_errors() -> Result<Vec<(String, f64)>, HarnessError> {
    let spec = GaussianSpec {
        dim: 4,
        horizon: 5,
        per_class: 2,
        seed: 3,
        ..GaussianSpec::default()
    };
    let data = make_split(&spec, Split::Train)?;
    let batch: Vec<&FeatureSequence> = data.iter().collect();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let plan = WindowPlan::new(5, 1)?.with_prefix();
    let sizes = super::ModelSizes {
        hidden: 3,
        model_dim: 4,
        heads: 2,
        ff_dim: 5,
        layernorm: true,
        ..super::ModelSizes::default()
    };
    let mut out = Vec::new();
    for kind in ModelKind::ALL {
        let Some(net) = kind.integrator(&sizes, 4, 2, 1) else {
            continue;
        };
        let est = Estimator::new(Integrator::new(&net, 9)?, plan.clone(), kind.formula());
        let params: Vec<DenseArray> = est.model.params().iter().map(|(_, _, v)| v.clone()).collect();
        let err = finite_diff_check(
            |tape, _| {
                let (_, scores) = est.scores_on_tape(tape, &batch).map_err(|e| match e {
                    crate::optim::OptimError::Diff(d) => d,
                    other => DiffError::InvalidAttr {
                        op: "loss",
                        detail: other.to_string(),
                    },
                })?;
                lsel_on_tape(tape, &scores, &labels).map_err(|e| DiffError::InvalidAttr {
                    op: "lsel",
                    detail: e.to_string(),
                })
            },
            &params,
            1e-5,
        )?;
        out.push((kind.name().to_string(), err));
    }
    Ok(out)
}

/// Random binary trajectories where `sprt_run` and `wald_binary` disagree.
pub fn sprt_wald_disagreements(trials: usize, seed: u64) -> Result<usize, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let horizon = rng.gen_range(1..40);
        let start = rng.gen_range(1..=horizon);
        let drift = rng.gen_range(-1.0..1.0);
        let mut acc = 0.0;
        let series: Vec<f64> = (start..=horizon)
            .map(|_| {
                acc += drift + rng.gen_range(-2.0..2.0);
                acc
            })
            .collect();
        let upper = rng.gen_range(0.0..6.0);
        let lower = rng.gen_range(0.0..6.0);
        let scores: Vec<Vec<f64>> = series.iter().map(|&v| vec![0.0, v]).collect();
        let llr = LlrTrajectory::from_scores(start - 1, horizon, start, &scores)?;
        let thresholds = ThresholdMatrix::new(2, vec![0.0, lower, upper, 0.0])?;
        let got = sprt_run(&llr, &thresholds)?;
        let agree = match wald_binary(&series, start, upper, lower) {
            Some(w) => w == got,
            None => got.forced && got.stopping_time == horizon,
        };
        bad += (!agree) as usize;
    }
    Ok(bad)
}

/// SPRT error rate on `trials` analytic trajectories (offset `offset`, length `horizon`).
pub fn wald_probe(threshold: f64, trials: usize, offset: f64, horizon: usize) -> Result<WaldProbe, HarnessError> {
    let spec = GaussianSpec {
        dim: 2,
        offset,
        horizon,
        per_class: trials / 2,
        seed: 21,
        ..GaussianSpec::default()
    };
    let data = make_split(&spec, Split::Test)?;
    let llrs: Vec<LlrTrajectory> = data.iter().map(|s| true_llr(s, &spec)).collect::<Result<_, _>>()?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    Ok(wald_error_probe(threshold, &llrs, &labels)?)
}

/// Mean and SEM of per-frame increments of the true `lambda_10` under class 1.
pub fn llr_increment(offset: f64, frames: usize) -> Result<(f64, f64), HarnessError> {
    let spec = GaussianSpec {
        dim: 4,
        offset,
        horizon: 1,
        per_class: frames,
        seed: 31,
        ..GaussianSpec::default()
    };
    let incs: Vec<f64> = make_split(&spec, Split::Test)?
        .iter()
        .filter(|s| s.label == 1)
        .map(|s| spec.frame_llr(s.frame(0), 1, 0))
        .collect();
    Ok(mean_sem(&incs))
}

/// Oracle-sanity preset plus the fast invariant suite.
pub fn verify(out_dir: Option<&std::path::Path>) -> Result<Vec<CheckResult>, HarnessError> {
    let mut checks = Vec::new();

    let tmp;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => {
            tmp = std::env::temp_dir().join(format!("sdrelab-verify-{}", std::process::id()));
            tmp.clone()
        }
    };
    let config = ExperimentConfig {
        out_dir: dir,
        ..super::preset("oracle-sanity")?
    };
    let report = super::run_experiment(&config)?;
    let worst = report
        .results
        .iter()
        .flat_map(|r| r.mae_curve.iter().map(|&(_, m)| m))
        .fold(0.0, f64::max);
    checks.push(CheckResult::new(
        "oracle-sanity: MAE < 1e-9 at every t",
        worst < 1e-9,
        format!("max MAE {worst:.3e}"),
    ));
    if out_dir.is_none() {
        let _ = std::fs::remove_dir_all(&report.out_dir);
    }

    for a in [1.0, 2.0] {
        let e = oracle_equivalence(a, 100, 50)?;
        checks.push(CheckResult::new(
            format!("tandem matches analytic LLR (a={a})"),
            e < 1e-9,
            format!("max abs error {e:.3e}"),
        ));
    }
    let prims = primitive_gradient_errors()?;
    let worst = prims.iter().map(|p| p.1).fold(0.0, f64::max);
    checks.push(CheckResult::new(
        "primitive gradients",
        worst < 1e-4,
        format!("worst relative error {worst:.3e}"),
    ));
    for (name, e) in loss_gradient_errors()? {
        checks.push(CheckResult::new(
            format!("loss gradient ({name})"),
            e < 1e-4,
            format!("relative error {e:.3e}"),
        ));
    }
    let bad = sprt_wald_disagreements(1000, 1)?;
    checks.push(CheckResult::new(
        "sprt agrees with two-boundary Wald",
        bad == 0,
        format!("{bad} disagreements / 1000"),
    ));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_are_tight() {
        for (name, e) in primitive_gradient_errors().unwrap() {
            assert!(e < 1e-4, "{name}: {e}");
        }
    }

    #[test]
    fn wald_agreement() {
        assert_eq!(sprt_wald_disagreements(300, 2).unwrap(), 0);
    }

    #[test]
    fn increment_mean_is_offset_squared() {
        let (m, s) = llr_increment(2.0, 4000).unwrap();
        assert!((m - 4.0).abs() < 4.0 * s, "{m} ± {s}");
    }
}
