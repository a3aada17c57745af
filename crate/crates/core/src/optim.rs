//! Adam with decoupled weight decay, class-balanced batching and the training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DenseArray, Gradients, Tape, Var};
use crate::gauss::FeatureSequence;
use crate::harness::{compute_mae, format_float};
use crate::losses::{self, LossError};
use crate::nets::{Integrator, NetError, ParamStore};
use crate::tandem::{self, LlrTrajectory, TandemError, WindowOutputs, WindowPlan};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("loss diverged (seed {seed}, step {step}): {loss}")]
    Diverged { seed: u64, step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tandem(#[from] TandemError),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed optimizer-step budget spread evenly over `epochs`; `None` means
    /// one pass over the training set per epoch.
    pub max_steps: Option<usize>,
    /// Weight of LSEL against mCE in the total loss.
    pub llre_ratio: f64,
    /// Training sequences scored for the train-split MAE column.
    pub train_eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 100,
            epochs: 20,
            max_steps: None,
            llre_ratio: 1.0,
            train_eval_size: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight decay non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.llre_ratio) {
            return bad("llre_ratio must lie in [0, 1]");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<DenseArray>,
    second: Vec<DenseArray>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: &TrainConfig, params: &ParamStore) -> Self {
        let zeros: Vec<DenseArray> = params.iter().map(|(_, _, v)| DenseArray::zeros(v.shape())).collect();
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &DenseArray {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &DenseArray {
        &self.second[i]
    }
}

/// One Adam update. Decay is decoupled: `p -= lr * wd * p` precedes the Adam delta.
///
/// Gradients are checked for finiteness before any parameter is touched.
pub fn adam_step(state: &mut OptimizerState, params: &mut ParamStore, grads: &Gradients) -> Result<(), OptimError> {
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        if let Some(g) = grads.get(id) {
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient {
                    name: params.name(id).to_string(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let decay = state.lr * state.weight_decay;
    for id in ids {
        let i = id.0;
        let p = params.get_mut(id).values_mut();
        if decay != 0.0 {
            p.iter_mut().for_each(|x| *x -= decay * *x);
        }
        let Some(g) = grads.get(id) else { continue };
        let m = state.first[i].values_mut();
        let v = state.second[i].values_mut();
        for j in 0..p.len() {
            let gj = g.values()[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Draws batches with an equal count per class (the remainder rotates over classes).
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    pools: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    rotate: usize,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], classes: usize, seed: u64) -> Result<Self, OptimError> {
        let mut pools = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            pools
                .get_mut(y)
                .ok_or_else(|| OptimError::Data(format!("label {y} out of range")))?
                .push(i);
        }
        if let Some(k) = pools.iter().position(Vec::is_empty) {
            return Err(OptimError::Data(format!("class {k} has no training sequences")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pools.iter_mut().for_each(|p| p.shuffle(&mut rng));
        Ok(Self {
            cursor: vec![0; classes],
            pools,
            rotate: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let k = self.pools.len();
        let mut batch = Vec::with_capacity(size);
        for c in 0..k {
            let extra = ((c + k - self.rotate) % k) < size % k;
            for _ in 0..size / k + extra as usize {
                if self.cursor[c] == self.pools[c].len() {
                    self.pools[c].shuffle(&mut self.rng);
                    self.cursor[c] = 0;
                }
                batch.push(self.pools[c][self.cursor[c]]);
                self.cursor[c] += 1;
            }
        }
        self.rotate = (self.rotate + size % k) % k;
        batch.shuffle(&mut self.rng);
        batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlrFormula {
    Tandem,
    Oblivion,
}

/// A window model wired to an LLR formula over a fixed window plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    pub model: Integrator,
    pub plan: WindowPlan,
    pub formula: LlrFormula,
}

/// Rows scored per tape during evaluation.
const EVAL_CHUNK: usize = 100;

impl Estimator {
    pub fn new(model: Integrator, plan: WindowPlan, formula: LlrFormula) -> Self {
        Self { model, plan, formula }
    }

    /// Window logits and per-timestep scores (`[batch, K]`, `lambda_kl = S_k - S_l`).
    pub fn scores_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[&FeatureSequence],
    ) -> Result<(WindowOutputs, Vec<Var>), OptimError> {
        let outputs = self.model.window_logits(tape, batch, &self.plan)?;
        let scores = match self.formula {
            LlrFormula::Tandem => tandem::tandem_scores_on_tape(tape, &self.plan, &outputs)?,
            LlrFormula::Oblivion => tandem::oblivion_scores_on_tape(&self.plan, &outputs)?,
        };
        Ok((outputs, scores))
    }

    /// Weighted LSEL/mCE loss on a tape; returns `(total, lsel, mce)`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[&FeatureSequence],
        llre_ratio: f64,
    ) -> Result<(Var, Option<Var>, Option<Var>), OptimError> {
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let (outputs, scores) = self.scores_on_tape(tape, batch)?;
        let lsel = if llre_ratio > 0.0 {
            Some(losses::lsel_on_tape(tape, &scores, &labels)?)
        } else {
            None
        };
        let mce = if llre_ratio < 1.0 {
            Some(mce_of(tape, &outputs, &labels)?)
        } else {
            None
        };
        let total = match (lsel, mce) {
            (Some(l), None) => l,
            (None, Some(m)) => m,
            (Some(l), Some(m)) => {
                let l = tape.scale(l, llre_ratio);
                let m = tape.scale(m, 1.0 - llre_ratio);
                tape.add(l, m)?
            }
            (None, None) => unreachable!("ratio lies in [0, 1]"),
        };
        Ok((total, lsel, mce))
    }

    fn trajectories(&self, tape: &Tape, scores: &[Var], rows: usize, out: &mut Vec<LlrTrajectory>) -> Result<(), OptimError> {
        let k = self.model.classes();
        for b in 0..rows {
            let per_t: Vec<Vec<f64>> = scores
                .iter()
                .map(|&s| tape.value(s).values()[b * k..(b + 1) * k].to_vec())
                .collect();
            out.push(LlrTrajectory::from_scores(
                self.plan.order,
                self.plan.horizon,
                self.plan.start(),
                &per_t,
            )?);
        }
        Ok(())
    }

    /// Estimated LLR trajectories, one per sequence.
    pub fn estimate(&self, data: &[FeatureSequence]) -> Result<Vec<LlrTrajectory>, OptimError> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(EVAL_CHUNK) {
            let batch: Vec<&FeatureSequence> = chunk.iter().collect();
            let mut tape = Tape::new();
            let (_, scores) = self.scores_on_tape(&mut tape, &batch)?;
            self.trajectories(&tape, &scores, chunk.len(), &mut out)?;
        }
        Ok(out)
    }

    /// Losses `(lsel, mce, total)` and the estimated trajectories of `data`, in one pass.
    pub fn evaluate(
        &self,
        data: &[FeatureSequence],
        llre_ratio: f64,
    ) -> Result<((f64, f64, f64), Vec<LlrTrajectory>), OptimError> {
        let (mut lsel, mut mce, mut n) = (0.0, 0.0, 0.0);
        let mut llrs = Vec::with_capacity(data.len());
        for chunk in data.chunks(EVAL_CHUNK) {
            let batch: Vec<&FeatureSequence> = chunk.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let (outputs, scores) = self.scores_on_tape(&mut tape, &batch)?;
            let l = losses::lsel_on_tape(&mut tape, &scores, &labels)?;
            let m = mce_of(&mut tape, &outputs, &labels)?;
            let w = chunk.len() as f64;
            lsel += w * tape.value(l).values()[0];
            mce += w * tape.value(m).values()[0];
            n += w;
            self.trajectories(&tape, &scores, chunk.len(), &mut llrs)?;
        }
        let (lsel, mce) = (lsel / n, mce / n);
        Ok(((lsel, mce, losses::combine(lsel, mce, llre_ratio)?), llrs))
    }
}

fn mce_of(tape: &mut Tape, outputs: &WindowOutputs, labels: &[usize]) -> Result<Var, OptimError> {
    let all: Vec<Var> = outputs
        .prefix
        .iter()
        .chain(&outputs.full)
        .chain(&outputs.short)
        .copied()
        .collect();
    Ok(losses::mce_on_tape(tape, &all, labels)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub lsel: f64,
    pub mce: f64,
    pub total_loss: f64,
    pub mae_final_t: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub estimator: Estimator,
    pub log: Vec<MetricsRow>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub steps: usize,
}

/// MAE at the final timestep between estimates and ground truth.
pub fn final_mae(est: &[LlrTrajectory], truth: &[LlrTrajectory]) -> Result<f64, OptimError> {
    let curve = compute_mae(est, truth).map_err(|e| OptimError::Data(e.to_string()))?;
    Ok(curve.last().map(|&(_, m)| m).unwrap_or(f64::NAN))
}

/// Trains `estimator` and returns the checkpoint with the lowest validation
/// MAE at the final timestep. Epoch 0 is the untrained model.
///
/// `truth_*` are analytic trajectories aligned with the corresponding splits.
pub fn train(
    mut estimator: Estimator,
    train: (&[FeatureSequence], &[LlrTrajectory]),
    val: (&[FeatureSequence], &[LlrTrajectory]),
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, OptimError> {
    config.validate()?;
    let (train_data, train_truth) = train;
    let (val_data, val_truth) = val;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(OptimError::Data("empty training or validation split".into()));
    }
    let labels: Vec<usize> = train_data.iter().map(|s| s.label).collect();
    let mut sampler = BalancedSampler::new(&labels, estimator.model.classes(), seed)?;
    let mut state = OptimizerState::new(config, estimator.model.params());
    let steps_per_epoch = match config.max_steps {
        Some(m) => m.div_ceil(config.epochs),
        None => train_data.len().div_ceil(config.batch_size),
    };
    let total_steps = config.max_steps.unwrap_or(steps_per_epoch * config.epochs);
    let eval_n = config.train_eval_size.min(train_data.len());

    let mut log = Vec::new();
    let validate = |est: &Estimator| -> Result<((f64, f64, f64), f64), OptimError> {
        let (losses, llrs) = est.evaluate(val_data, config.llre_ratio)?;
        Ok((losses, final_mae(&llrs, val_truth)?))
    };
    let ((l, m, t), mut best_val_mae) = validate(&estimator)?;
    log.push(MetricsRow {
        seed,
        epoch: 0,
        split: "val".into(),
        lsel: l,
        mce: m,
        total_loss: t,
        mae_final_t: best_val_mae,
    });
    let mut best = estimator.clone();
    let mut best_epoch = 0;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let (mut sum_l, mut sum_m, mut sum_t, mut n) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..steps_per_epoch {
            if step == total_steps {
                break;
            }
            let idx = sampler.next_batch(config.batch_size);
            let batch: Vec<&FeatureSequence> = idx.iter().map(|&i| &train_data[i]).collect();
            let mut tape = Tape::new();
            let (total, lsel, mce) = estimator.loss_on_tape(&mut tape, &batch, config.llre_ratio)?;
            let loss = tape.value(total).values()[0];
            if !loss.is_finite() {
                return Err(OptimError::Diverged { seed, step, loss });
            }
            let grads = tape.backward(total)?;
            adam_step(&mut state, estimator.model.params_mut(), &grads)?;
            sum_t += loss;
            sum_l += lsel.map_or(f64::NAN, |v| tape.value(v).values()[0]);
            sum_m += mce.map_or(f64::NAN, |v| tape.value(v).values()[0]);
            n += 1;
            step += 1;
        }
        if n == 0 {
            break;
        }
        let train_mae = final_mae(&estimator.estimate(&train_data[..eval_n])?, &train_truth[..eval_n])?;
        let nf = n as f64;
        log.push(MetricsRow {
            seed,
            epoch,
            split: "train".into(),
            lsel: sum_l / nf,
            mce: sum_m / nf,
            total_loss: sum_t / nf,
            mae_final_t: train_mae,
        });
        let ((l, m, t), mae) = validate(&estimator)?;
        log.push(MetricsRow {
            seed,
            epoch,
            split: "val".into(),
            lsel: l,
            mce: m,
            total_loss: t,
            mae_final_t: mae,
        });
        if mae < best_val_mae {
            best_val_mae = mae;
            best = estimator.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        estimator: best,
        log,
        best_epoch,
        best_val_mae,
        steps: step,
    })
}

/// Writes the metrics log as CSV.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<(), OptimError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seed", "epoch", "split", "lsel", "mce", "total_loss", "mae_final_t"])?;
    for r in rows {
        out.write_record([
            r.seed.to_string(),
            r.epoch.to_string(),
            r.split.clone(),
            format_float(r.lsel),
            format_float(r.mce),
            format_float(r.total_loss),
            format_float(r.mae_final_t),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{ParamId, Tape};
    use crate::gauss::{make_split, true_llr, GaussianSpec, Split};
    use crate::nets::{ActivationKind, IntegratorConfig, LstmConfig};

    fn scalar_store(values: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            p.add(format!("p{i}"), DenseArray::scalar(v));
        }
        p
    }

    fn grads_for(values: &[f64], p: &ParamStore) -> Gradients {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.ids().map(|id| p.bind(&mut tape, id)).collect();
        let consts: Vec<Var> = values.iter().map(|&g| tape.constant(DenseArray::scalar(g))).collect();
        let mut acc = None;
        for (v, c) in vars.into_iter().zip(consts) {
            let term = tape.mul(v, c).unwrap();
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term).unwrap(),
            });
        }
        tape.backward(acc.unwrap()).unwrap()
    }

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = scalar_store(&[1.5, -2.0]);
        let g = grads_for(&[0.0, 0.0], &p);
        let mut s = OptimizerState::new(&cfg(0.1, 0.0), &p);
        adam_step(&mut s, &mut p, &g).unwrap();
        assert_eq!(p.get(ParamId(0)).values(), &[1.5]);
        assert_eq!(p.get(ParamId(1)).values(), &[-2.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(&[1.0]);
        let g = grads_for(&[1.0], &p);
        let mut s = OptimizerState::new(&cfg(0.1, 0.0), &p);
        adam_step(&mut s, &mut p, &g).unwrap();
        assert!((p.get(ParamId(0)).values()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut p = scalar_store(&[2.0]);
        let g = grads_for(&[0.0], &p);
        let mut s = OptimizerState::new(&cfg(0.1, 0.1), &p);
        for n in 1..=3 {
            adam_step(&mut s, &mut p, &g).unwrap();
            let expect = 2.0 * 0.99f64.powi(n);
            assert!((p.get(ParamId(0)).values()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let init = [0.5, -1.0, 3.0];
        let g1 = [0.2, -0.7, 1.5];
        let g2 = [-0.1, 0.4, 2.5];
        let mut p = scalar_store(&init);
        let mut s = OptimizerState::new(&cfg(0.01, 0.0), &p);
        let g = grads_for(&g1, &p);
        adam_step(&mut s, &mut p, &g).unwrap();
        let g = grads_for(&g2, &p);
        adam_step(&mut s, &mut p, &g).unwrap();
        for i in 0..3 {
            let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.01, 1e-8);
            let m1 = (1.0 - b1) * g1[i];
            let v1 = (1.0 - b2) * g1[i] * g1[i];
            let x1 = init[i] - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
            let m2 = b1 * m1 + (1.0 - b1) * g2[i];
            let v2 = b2 * v1 + (1.0 - b2) * g2[i] * g2[i];
            let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
            assert!((p.get(ParamId(i)).values()[0] - x2).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(&[1.0, 1.0]);
        let g = grads_for(&[0.0, f64::NAN], &p);
        let mut s = OptimizerState::new(&cfg(0.1, 0.0), &p);
        match adam_step(&mut s, &mut p, &g) {
            Err(OptimError::NonFiniteGradient { name }) => assert_eq!(name, "p1"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.get(ParamId(0)).values(), &[1.0]);
    }

    #[test]
    fn sampler_balances_classes() {
        let labels: Vec<usize> = (0..31).map(|i| i % 3).collect();
        let mut s = BalancedSampler::new(&labels, 3, 4).unwrap();
        let mut totals = [0usize; 3];
        for _ in 0..50 {
            let b = s.next_batch(10);
            assert_eq!(b.len(), 10);
            let mut counts = [0usize; 3];
            b.iter().for_each(|&i| counts[labels[i]] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1);
            (0..3).for_each(|k| totals[k] += counts[k]);
        }
        assert!(totals.iter().max().unwrap() - totals.iter().min().unwrap() <= 1);
        assert!(BalancedSampler::new(&[0, 0], 2, 0).is_err());
    }

    fn tiny_setup() -> (Estimator, Vec<FeatureSequence>, Vec<LlrTrajectory>, Vec<FeatureSequence>, Vec<LlrTrajectory>) {
        let spec = GaussianSpec {
            dim: 4,
            horizon: 6,
            per_class: 40,
            ..GaussianSpec::default()
        };
        let tr = make_split(&spec, Split::Train).unwrap();
        let va = make_split(&spec, Split::Val).unwrap();
        let ttr = tr.iter().map(|s| true_llr(s, &spec).unwrap()).collect();
        let tva = va.iter().map(|s| true_llr(s, &spec).unwrap()).collect();
        let model = Integrator::new(&IntegratorConfig::Lstm(LstmConfig::new(4, 6, 2, ActivationKind::b2bsqrt())), 3).unwrap();
        let plan = WindowPlan::new(6, 2).unwrap().with_prefix();
        (Estimator::new(model, plan, LlrFormula::Tandem), tr, ttr, va, tva)
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let (est, tr, ttr, va, tva) = tiny_setup();
        let config = TrainConfig {
            lr: 1e-2,
            epochs: 3,
            batch_size: 20,
            ..TrainConfig::default()
        };
        let a = train(est.clone(), (&tr, &ttr), (&va, &tva), &config, 7).unwrap();
        let b = train(est, (&tr, &ttr), (&va, &tva), &config, 7).unwrap();
        let csv = |log: &[MetricsRow]| {
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, log).unwrap();
            buf
        };
        assert_eq!(csv(&a.log), csv(&b.log));
        let vals: Vec<f64> = a.log.iter().filter(|r| r.split == "val").map(|r| r.mae_final_t).collect();
        assert_eq!(vals.len(), 4);
        assert!(vals.iter().all(|&v| a.best_val_mae <= v));
        let again = final_mae(&a.estimator.estimate(&va).unwrap(), &tva).unwrap();
        assert_eq!(again, a.best_val_mae);
        let train_loss: Vec<f64> = a.log.iter().filter(|r| r.split == "train").map(|r| r.total_loss).collect();
        assert!(train_loss[2] < train_loss[0]);
    }

    #[test]
    fn pure_lsel_skips_mce() {
        let (est, tr, ..) = tiny_setup();
        let batch: Vec<&FeatureSequence> = tr.iter().take(4).collect();
        let mut tape = Tape::new();
        let (_, l, m) = est.loss_on_tape(&mut tape, &batch, 1.0).unwrap();
        assert!(l.is_some() && m.is_none());
        let (_, l, m) = est.loss_on_tape(&mut tape, &batch, 0.0).unwrap();
        assert!(l.is_none() && m.is_some());
    }

    #[test]
    fn lsel_equals_mce_only_for_a_single_tandem_term() {
        let (est, tr, ..) = tiny_setup();
        let losses = |est: &Estimator| est.evaluate(&tr[..10], 0.5).unwrap().0;
        let (l, m, _) = losses(&est);
        assert!((l - m).abs() > 1e-6);
        let full = Estimator {
            plan: WindowPlan::new(6, 5).unwrap().with_prefix(),
            ..est
        };
        let (l, m, _) = losses(&full);
        assert!((l - m).abs() < 1e-12);
    }

    #[test]
    fn step_budget_is_respected() {
        let (est, tr, ttr, va, tva) = tiny_setup();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 10,
            max_steps: Some(3),
            ..TrainConfig::default()
        };
        let out = train(est, (&tr, &ttr), (&va, &tva), &config, 1).unwrap();
        assert_eq!(out.steps, 3);
    }

    #[test]
    fn metrics_csv_header() {
        let mut buf = Vec::new();
        let row = MetricsRow {
            seed: 1,
            epoch: 2,
            split: "val".into(),
            lsel: 0.5,
            mce: 0.25,
            total_loss: 0.5,
            mae_final_t: 1.0 / 3.0,
        };
        write_metrics_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "seed,epoch,split,lsel,mce,total_loss,mae_final_t\n1,2,val,0.5,0.25,0.5,0.333333333\n");
    }
}
