//! LLR-estimation and classification losses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DenseArray, DiffError, Tape, Var};
use crate::tandem::{LlrTrajectory, PosteriorTrajectoryPair};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{llrs} trajectories but {labels} labels")]
    LengthMismatch { llrs: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("LLRe loss ratio must lie in [0, 1], got {0}")]
    InvalidRatio(f64),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lsel: f64,
    pub mce: f64,
    pub total: f64,
    pub llre_ratio: f64,
}

impl LossBreakdown {
    pub fn new(lsel: f64, mce: f64, llre_ratio: f64) -> Result<Self, LossError> {
        Ok(Self {
            lsel,
            mce,
            total: combine(lsel, mce, llre_ratio)?,
            llre_ratio,
        })
    }
}

fn check_batch(n: usize, labels: &[usize], classes: usize) -> Result<(), LossError> {
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if n != labels.len() {
        return Err(LossError::LengthMismatch {
            llrs: n,
            labels: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// `log(1 + sum_{l != y} exp(-lambda_yl))`, stable for large magnitudes.
fn lsel_term(llr: &LlrTrajectory, t: usize, y: usize) -> f64 {
    let mut terms: Vec<f64> = (0..llr.classes()).filter(|&l| l != y).map(|l| -llr.get(t, y, l)).collect();
    terms.push(0.0);
    let (arg, max) = terms
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
    let rest: f64 = terms
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Log-sum-exponential loss averaged over samples and defined timesteps.
pub fn lsel(llrs: &[LlrTrajectory], labels: &[usize]) -> Result<f64, LossError> {
    let classes = llrs.first().map(|l| l.classes()).unwrap_or(0);
    check_batch(llrs.len(), labels, classes)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (llr, &y) in llrs.iter().zip(labels) {
        for t in llr.times() {
            total += lsel_term(llr, t, y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(total / count as f64)
}

/// Multiplet cross-entropy: mean `-log p(y)` over every window of every sample.
pub fn mce(posteriors: &[PosteriorTrajectoryPair], labels: &[usize]) -> Result<f64, LossError> {
    let classes = posteriors.first().map(|p| p.classes()).unwrap_or(0);
    check_batch(posteriors.len(), labels, classes)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, &y) in posteriors.iter().zip(labels) {
        for row in p.log_prefix().iter().chain(p.log_full()).chain(p.log_short()) {
            total -= row[y];
            count += 1;
        }
    }
    if count == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(total / count as f64)
}

/// `ratio * lsel + (1 - ratio) * mce`.
pub fn combine(lsel: f64, mce: f64, llre_ratio: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&llre_ratio) {
        return Err(LossError::InvalidRatio(llre_ratio));
    }
    if llre_ratio == 1.0 {
        return Ok(lsel);
    }
    if llre_ratio == 0.0 {
        return Ok(mce);
    }
    Ok(llre_ratio * lsel + (1.0 - llre_ratio) * mce)
}

fn one_hot(labels: &[usize], classes: usize, repeats: usize) -> DenseArray {
    let n = labels.len();
    DenseArray::from_fn(&[repeats * n, classes], |i| {
        let row = i / classes;
        (labels[row % n] == i % classes) as u8 as f64
    })
}

/// Mean over rows of `logsumexp(x) - x[y]` for stacked `[batch, K]` blocks.
fn stacked_cross_entropy(tape: &mut Tape, blocks: &[Var], labels: &[usize]) -> Result<Var, LossError> {
    let Some(&first) = blocks.first() else {
        return Err(LossError::EmptyBatch);
    };
    let shape = tape.shape(first).to_vec();
    let classes = *shape.last().ok_or(LossError::EmptyBatch)?;
    check_batch(shape[0], labels, classes)?;
    let stacked = tape.concat(blocks, 0)?;
    let mask = tape.constant(one_hot(labels, classes, blocks.len()));
    let lse = tape.logsumexp(stacked)?;
    let picked = tape.mul(stacked, mask)?;
    let picked = tape.sum_axis(picked, 1)?;
    let per_row = tape.sub(lse, picked)?;
    Ok(tape.mean_all(per_row)?)
}

/// Differentiable LSEL from TANDEM scores (`lambda_kl = S_k - S_l`).
///
/// `log(1 + sum_{l != y} exp(S_l - S_y)) = logsumexp(S) - S_y`.
pub fn lsel_on_tape(tape: &mut Tape, scores: &[Var], labels: &[usize]) -> Result<Var, LossError> {
    stacked_cross_entropy(tape, scores, labels)
}

/// Differentiable mCE from per-window logits.
pub fn mce_on_tape(tape: &mut Tape, window_logits: &[Var], labels: &[usize]) -> Result<Var, LossError> {
    stacked_cross_entropy(tape, window_logits, labels)
}
