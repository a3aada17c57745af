//! Log-likelihood-ratio trajectories from window posteriors.
//!
//! Under an N-th order Markov assumption the LLR of `x(1..t)` decomposes into
//! a sum of window log posterior-ratios: windows of N+1 frames ending at each
//! `s` in `[N+1, t]`, minus windows of N frames ending at `s-1` for `s` in
//! `[N+2, t]`. Before `N+1` frames exist, the growing prefix window
//! `x(1..t)` gives the exact log posterior-ratio without any Markov
//! assumption; this is optional and controlled by [`WindowPlan::with_prefix`].
//!
//! Every LLR matrix here is stored as a difference of per-class scores, so
//! `llr[k][l] == -llr[l][k]` and the diagonal is zero bit-for-bit.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Var};
use crate::gauss::FeatureSequence;

/// Posterior-sum tolerance for validated inputs.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TandemError {
    #[error("Markov order {order} needs horizon > order, got horizon {horizon}")]
    OrderTooLarge { order: usize, horizon: usize },
    #[error("{family} posterior {index} has a nonpositive entry ({value})")]
    NonPositive {
        family: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{family} posterior {index} sums to {sum}, not 1")]
    NotNormalized {
        family: &'static str,
        index: usize,
        sum: f64,
    },
    #[error("{family} family has {got} windows, expected {expected}")]
    WindowCount {
        family: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{family} posterior {index} has {got} classes, expected {expected}")]
    ClassCount {
        family: &'static str,
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("trajectory is empty")]
    Empty,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Frame ranges (0-based, half-open) of every window the formula reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub horizon: usize,
    pub order: usize,
    /// `x(1..t)` for `t` in `[1, N]`; empty unless built with prefix windows.
    pub prefix: Vec<Range<usize>>,
    /// N+1 frames ending at `s`, for `s` in `[N+1, T]`.
    pub full: Vec<Range<usize>>,
    /// N frames ending at `s-1`, for `s` in `[N+2, T]`. Empty when N = 0.
    pub short: Vec<Range<usize>>,
}

impl WindowPlan {
    pub fn new(horizon: usize, order: usize) -> Result<Self, TandemError> {
        if order >= horizon {
            return Err(TandemError::OrderTooLarge { order, horizon });
        }
        let full = (order + 1..=horizon).map(|s| s - order - 1..s).collect();
        let short = if order == 0 {
            Vec::new()
        } else {
            (order + 2..=horizon).map(|s| s - order - 1..s - 1).collect()
        };
        Ok(Self {
            horizon,
            order,
            prefix: Vec::new(),
            full,
            short,
        })
    }

    pub fn with_prefix(mut self) -> Self {
        self.prefix = (1..=self.order).map(|t| 0..t).collect();
        self
    }

    pub fn has_prefix(&self) -> bool {
        self.order == 0 || !self.prefix.is_empty()
    }

    /// First timestep (1-based) at which an LLR is defined.
    pub fn start(&self) -> usize {
        if self.has_prefix() {
            1
        } else {
            self.order + 1
        }
    }

    /// Number of short-window terms the formula subtracts, including the
    /// prior substitutes used when N = 0.
    fn short_terms(&self) -> usize {
        self.horizon - self.order - 1
    }
}

/// Full and short sliding windows of `seq` for Markov order `order`.
pub fn sliding_windows(seq: &FeatureSequence, order: usize) -> Result<WindowPlan, TandemError> {
    WindowPlan::new(seq.len(), order)
}

/// Log posteriors of every window in a [`WindowPlan`].
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTrajectoryPair {
    classes: usize,
    order: usize,
    horizon: usize,
    prefix: Vec<Vec<f64>>,
    full: Vec<Vec<f64>>,
    short: Vec<Vec<f64>>,
    log_priors: Vec<f64>,
}

fn validate_simplex(family: &'static str, rows: &[Vec<f64>], classes: usize) -> Result<(), TandemError> {
    for (index, p) in rows.iter().enumerate() {
        if p.len() != classes {
            return Err(TandemError::ClassCount {
                family,
                index,
                expected: classes,
                got: p.len(),
            });
        }
        if let Some(&value) = p.iter().find(|&&v| !(v > 0.0)) {
            return Err(TandemError::NonPositive { family, index, value });
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(TandemError::NotNormalized { family, index, sum });
        }
    }
    Ok(())
}

fn validate_log_simplex(family: &'static str, rows: &[Vec<f64>], classes: usize) -> Result<(), TandemError> {
    for (index, p) in rows.iter().enumerate() {
        if p.len() != classes {
            return Err(TandemError::ClassCount {
                family,
                index,
                expected: classes,
                got: p.len(),
            });
        }
        if let Some(&value) = p.iter().find(|v| !v.is_finite()) {
            return Err(TandemError::NonPositive { family, index, value });
        }
        let lse = log_sum_exp(p);
        if lse.abs() > SIMPLEX_TOL {
            return Err(TandemError::NotNormalized {
                family,
                index,
                sum: lse.exp(),
            });
        }
    }
    Ok(())
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| x - lse).collect()
}

impl PosteriorTrajectoryPair {
    /// Validates posterior simplices against `plan` and takes their logs.
    pub fn from_probabilities(
        plan: &WindowPlan,
        prefix: Vec<Vec<f64>>,
        full: Vec<Vec<f64>>,
        short: Vec<Vec<f64>>,
        priors: Vec<f64>,
    ) -> Result<Self, TandemError> {
        let classes = priors.len();
        validate_simplex("prior", std::slice::from_ref(&priors), classes)?;
        validate_simplex("prefix", &prefix, classes)?;
        validate_simplex("full", &full, classes)?;
        validate_simplex("short", &short, classes)?;
        let logs = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.into_iter().map(|r| r.into_iter().map(f64::ln).collect()).collect()
        };
        Self::assemble(
            plan,
            logs(prefix),
            logs(full),
            logs(short),
            priors.into_iter().map(f64::ln).collect(),
        )
    }

    /// Same as [`Self::from_probabilities`] for log posteriors.
    pub fn from_log_probabilities(
        plan: &WindowPlan,
        prefix: Vec<Vec<f64>>,
        full: Vec<Vec<f64>>,
        short: Vec<Vec<f64>>,
        log_priors: Vec<f64>,
    ) -> Result<Self, TandemError> {
        let classes = log_priors.len();
        validate_log_simplex("prior", std::slice::from_ref(&log_priors), classes)?;
        validate_log_simplex("prefix", &prefix, classes)?;
        validate_log_simplex("full", &full, classes)?;
        validate_log_simplex("short", &short, classes)?;
        Self::assemble(plan, prefix, full, short, log_priors)
    }

    fn assemble(
        plan: &WindowPlan,
        prefix: Vec<Vec<f64>>,
        full: Vec<Vec<f64>>,
        short: Vec<Vec<f64>>,
        log_priors: Vec<f64>,
    ) -> Result<Self, TandemError> {
        let check = |family, expected: usize, got: usize| {
            if expected != got {
                Err(TandemError::WindowCount { family, expected, got })
            } else {
                Ok(())
            }
        };
        check("prefix", plan.prefix.len(), prefix.len())?;
        check("full", plan.full.len(), full.len())?;
        check("short", plan.short.len(), short.len())?;
        Ok(Self {
            classes: log_priors.len(),
            order: plan.order,
            horizon: plan.horizon,
            prefix,
            full,
            short,
            log_priors,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn log_prefix(&self) -> &[Vec<f64>] {
        &self.prefix
    }

    pub fn log_full(&self) -> &[Vec<f64>] {
        &self.full
    }

    pub fn log_short(&self) -> &[Vec<f64>] {
        &self.short
    }

    fn start(&self) -> usize {
        if self.order == 0 || !self.prefix.is_empty() {
            1
        } else {
            self.order + 1
        }
    }

    /// Log posterior subtracted at step `s` (1-based, `s >= N+2`).
    fn short_at(&self, s: usize) -> &[f64] {
        if self.order == 0 {
            &self.log_priors
        } else {
            &self.short[s - self.order - 2]
        }
    }
}

/// Estimated or true `lambda_kl(t)` for every class pair and timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrTrajectory {
    classes: usize,
    order: usize,
    horizon: usize,
    start: usize,
    /// `(horizon - start + 1) * classes * classes`, row-major `[t][k][l]`.
    values: Vec<f64>,
}

impl LlrTrajectory {
    /// Builds LLR matrices as pairwise differences of per-class scores.
    ///
    /// `scores[i]` belongs to timestep `start + i`.
    pub fn from_scores(order: usize, horizon: usize, start: usize, scores: &[Vec<f64>]) -> Result<Self, TandemError> {
        let classes = scores.first().map(Vec::len).ok_or(TandemError::Empty)?;
        if start == 0 || start + scores.len() != horizon + 1 {
            return Err(TandemError::WindowCount {
                family: "score",
                expected: horizon + 1 - start.max(1),
                got: scores.len(),
            });
        }
        let mut values = Vec::with_capacity(scores.len() * classes * classes);
        for (index, s) in scores.iter().enumerate() {
            if s.len() != classes {
                return Err(TandemError::ClassCount {
                    family: "score",
                    index,
                    expected: classes,
                    got: s.len(),
                });
            }
            for k in 0..classes {
                for l in 0..classes {
                    values.push(if k == l { 0.0 } else { s[k] - s[l] });
                }
            }
        }
        Ok(Self {
            classes,
            order,
            horizon,
            start,
            values,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// First defined timestep (1-based).
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn times(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.horizon
    }

    pub fn len(&self) -> usize {
        self.horizon + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `lambda_kl(t)`; `t` is 1-based and must lie in [`Self::times`].
    pub fn get(&self, t: usize, k: usize, l: usize) -> f64 {
        assert!(t >= self.start && t <= self.horizon, "timestep {t} outside {:?}", self.times());
        let kk = self.classes * self.classes;
        self.values[(t - self.start) * kk + k * self.classes + l]
    }

    /// The `K x K` matrix at timestep `t`, row-major.
    pub fn matrix(&self, t: usize) -> &[f64] {
        let kk = self.classes * self.classes;
        let i = t - self.start;
        &self.values[i * kk..(i + 1) * kk]
    }

    /// `min_{l != k} lambda_kl(t)`.
    pub fn min_margin(&self, t: usize, k: usize) -> f64 {
        (0..self.classes)
            .filter(|&l| l != k)
            .map(|l| self.get(t, k, l))
            .fold(f64::INFINITY, f64::min)
    }

    /// Restricts to timesteps `>= start`.
    pub fn restricted(&self, start: usize) -> Self {
        let start = start.max(self.start);
        let kk = self.classes * self.classes;
        Self {
            classes: self.classes,
            order: self.order,
            horizon: self.horizon,
            start,
            values: self.values[(start - self.start) * kk..].to_vec(),
        }
    }

    /// Multiplies every entry by `c` (used by scale-equivariance checks).
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }
}

/// Accumulated per-class scores under the TANDEM decomposition.
fn tandem_scores(p: &PosteriorTrajectoryPair) -> Vec<Vec<f64>> {
    let start = p.start();
    let order = p.order;
    let mut scores = Vec::with_capacity(p.horizon + 1 - start);
    if start == 1 && order > 0 {
        scores.extend(p.prefix.iter().cloned());
    }
    let mut acc = vec![0.0; p.classes];
    for s in order + 1..=p.horizon {
        let full = &p.full[s - order - 1];
        for k in 0..p.classes {
            acc[k] += full[k];
        }
        if s >= order + 2 {
            let short = p.short_at(s);
            for k in 0..p.classes {
                acc[k] -= short[k];
            }
        }
        scores.push(acc.clone());
    }
    scores
}

/// LLR trajectory from window posteriors via the TANDEM decomposition.
///
/// Runs incrementally: each new timestep costs O(K^2).
pub fn tandem_llr(p: &PosteriorTrajectoryPair) -> Result<LlrTrajectory, TandemError> {
    LlrTrajectory::from_scores(p.order, p.horizon, p.start(), &tandem_scores(p))
}

/// Recomputes the TANDEM sum from scratch for a single timestep `t`.
pub fn tandem_llr_at(p: &PosteriorTrajectoryPair, t: usize) -> Vec<f64> {
    let order = p.order;
    if t <= order {
        return p.prefix[t - 1].clone();
    }
    let mut acc = vec![0.0; p.classes];
    for s in order + 1..=t {
        for k in 0..p.classes {
            acc[k] += p.full[s - order - 1][k];
        }
        if s >= order + 2 {
            let short = p.short_at(s);
            for k in 0..p.classes {
                acc[k] -= short[k];
            }
        }
    }
    acc
}

/// LLR from the current window alone, with no accumulation.
pub fn oblivion_llr(p: &PosteriorTrajectoryPair) -> Result<LlrTrajectory, TandemError> {
    let start = p.start();
    let mut scores: Vec<Vec<f64>> = Vec::new();
    if start == 1 && p.order > 0 {
        scores.extend(p.prefix.iter().cloned());
    }
    scores.extend(p.full.iter().cloned());
    LlrTrajectory::from_scores(p.order, p.horizon, start, &scores)
}

/// Per-window log-posterior (or logit) tensors of shape `[batch, K]`.
#[derive(Debug, Clone)]
pub struct WindowOutputs {
    pub prefix: Vec<Var>,
    pub full: Vec<Var>,
    pub short: Vec<Var>,
}

/// Differentiable TANDEM scores `S(t)` (`[batch, K]` per timestep).
///
/// `lambda_kl(t) = S_k(t) - S_l(t)`. Log-posterior differences equal logit
/// differences, so window outputs may be logits. For N = 0 the short terms
/// are the prior log ratio, which is zero under the uniform priors used in
/// training, and are omitted.
pub fn tandem_scores_on_tape(tape: &mut Tape, plan: &WindowPlan, w: &WindowOutputs) -> Result<Vec<Var>, TandemError> {
    check_outputs(plan, w)?;
    let mut scores = Vec::with_capacity(plan.horizon);
    if plan.order > 0 {
        scores.extend(w.prefix.iter().copied());
    }
    let mut acc: Option<Var> = None;
    for (i, &full) in w.full.iter().enumerate() {
        let mut next = match acc {
            Some(prev) => tape.add(prev, full)?,
            None => full,
        };
        if i >= 1 && plan.order > 0 {
            next = tape.sub(next, w.short[i - 1])?;
        }
        acc = Some(next);
        scores.push(next);
    }
    Ok(scores)
}

/// Differentiable Oblivion scores: the current window's output only.
pub fn oblivion_scores_on_tape(plan: &WindowPlan, w: &WindowOutputs) -> Result<Vec<Var>, TandemError> {
    check_outputs(plan, w)?;
    let mut scores = Vec::with_capacity(plan.horizon);
    if plan.order > 0 {
        scores.extend(w.prefix.iter().copied());
    }
    scores.extend(w.full.iter().copied());
    Ok(scores)
}

fn check_outputs(plan: &WindowPlan, w: &WindowOutputs) -> Result<(), TandemError> {
    let pairs = [
        ("prefix", plan.prefix.len(), w.prefix.len()),
        ("full", plan.full.len(), w.full.len()),
        ("short", plan.short.len(), w.short.len()),
    ];
    for (family, expected, got) in pairs {
        if expected != got {
            return Err(TandemError::WindowCount { family, expected, got });
        }
    }
    debug_assert_eq!(plan.short.len(), if plan.order == 0 { 0 } else { plan.short_terms() });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(k: usize) -> Vec<f64> {
        vec![1.0 / k as f64; k]
    }

    fn random_simplex(k: usize, seed: &mut u64) -> Vec<f64> {
        let raw: Vec<f64> = (0..k)
            .map(|_| {
                *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect();
        let lse = log_sum_exp(&raw);
        raw.iter().map(|x| (x - lse).exp()).collect()
    }

    fn random_pair(t: usize, n: usize, k: usize, prefix: bool, seed: u64) -> (WindowPlan, PosteriorTrajectoryPair) {
        let mut s = seed;
        let mut plan = WindowPlan::new(t, n).unwrap();
        if prefix {
            plan = plan.with_prefix();
        }
        let gen = |count: usize, s: &mut u64| (0..count).map(|_| random_simplex(k, s)).collect::<Vec<_>>();
        let pre = gen(plan.prefix.len(), &mut s);
        let full = gen(plan.full.len(), &mut s);
        let short = gen(plan.short.len(), &mut s);
        let pair = PosteriorTrajectoryPair::from_probabilities(&plan, pre, full, short, uniform(k)).unwrap();
        (plan, pair)
    }

    #[test]
    fn windows_t3_n1() {
        let plan = WindowPlan::new(3, 1).unwrap();
        assert_eq!(plan.full, vec![0..2, 1..3]);
        assert_eq!(plan.short, vec![1..2]);
        assert_eq!(plan.start(), 2);
    }

    #[test]
    fn windows_t50_n49_single_full_window() {
        let plan = WindowPlan::new(50, 49).unwrap();
        assert_eq!(plan.full, vec![0..50]);
        assert!(plan.short.is_empty());
        let plan = plan.with_prefix();
        assert_eq!(plan.prefix.len(), 49);
        assert_eq!(plan.prefix[0], 0..1);
        assert_eq!(plan.start(), 1);
    }

    #[test]
    fn windows_order_zero() {
        let plan = WindowPlan::new(4, 0).unwrap();
        assert_eq!(plan.full, vec![0..1, 1..2, 2..3, 3..4]);
        assert!(plan.short.is_empty());
        assert_eq!(plan.start(), 1);
    }

    #[test]
    fn order_must_be_below_horizon() {
        assert!(matches!(WindowPlan::new(5, 5), Err(TandemError::OrderTooLarge { .. })));
    }

    #[test]
    fn first_step_is_single_full_term() {
        let (_, p) = random_pair(6, 2, 3, false, 7);
        let llr = tandem_llr(&p).unwrap();
        assert_eq!(llr.start(), 3);
        let f = &p.log_full()[0];
        for k in 0..3 {
            for l in 0..3 {
                let expect = if k == l { 0.0 } else { f[k] - f[l] };
                assert_eq!(llr.get(3, k, l), expect);
            }
        }
    }

    #[test]
    fn antisymmetric_and_zero_diagonal() {
        let (_, p) = random_pair(12, 3, 4, true, 11);
        for llr in [tandem_llr(&p).unwrap(), oblivion_llr(&p).unwrap()] {
            for t in llr.times() {
                for k in 0..4 {
                    assert_eq!(llr.get(t, k, k), 0.0);
                    for l in 0..4 {
                        assert_eq!(llr.get(t, k, l), -llr.get(t, l, k));
                    }
                }
            }
        }
    }

    #[test]
    fn incremental_matches_batch_exactly() {
        for (n, prefix) in [(0, false), (1, false), (3, true), (5, false)] {
            let (_, p) = random_pair(10, n, 3, prefix, 5 + n as u64);
            let llr = tandem_llr(&p).unwrap();
            for t in llr.times() {
                let s = tandem_llr_at(&p, t);
                for k in 0..3 {
                    for l in 0..3 {
                        let expect = if k == l { 0.0 } else { s[k] - s[l] };
                        assert_eq!(llr.get(t, k, l), expect, "t={t} n={n}");
                    }
                }
            }
        }
    }

    #[test]
    fn increments_are_window_terms() {
        let (_, p) = random_pair(10, 2, 3, false, 3);
        let llr = tandem_llr(&p).unwrap();
        for t in 4..=10 {
            let f = &p.log_full()[t - 3];
            let s = &p.log_short()[t - 4];
            for (k, l) in [(0, 1), (2, 0), (1, 2)] {
                let step = llr.get(t, k, l) - llr.get(t - 1, k, l);
                let expect = (f[k] - f[l]) - (s[k] - s[l]);
                assert!((step - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oblivion_on_constant_posteriors_is_flat() {
        let plan = WindowPlan::new(8, 2).unwrap();
        let post = vec![0.2, 0.8];
        let p = PosteriorTrajectoryPair::from_probabilities(
            &plan,
            vec![],
            vec![post.clone(); plan.full.len()],
            vec![post; plan.short.len()],
            uniform(2),
        )
        .unwrap();
        let llr = oblivion_llr(&p).unwrap();
        let first = llr.get(3, 1, 0);
        assert!((first - 4f64.ln()).abs() < 1e-15);
        for t in llr.times() {
            assert_eq!(llr.get(t, 1, 0), first);
        }
    }

    #[test]
    fn zero_posterior_is_rejected() {
        let plan = WindowPlan::new(2, 0).unwrap();
        let err = PosteriorTrajectoryPair::from_probabilities(
            &plan,
            vec![],
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            vec![],
            uniform(2),
        )
        .unwrap_err();
        assert!(matches!(err, TandemError::NonPositive { family: "full", .. }));
    }

    #[test]
    fn window_count_is_checked() {
        let plan = WindowPlan::new(4, 1).unwrap();
        let err = PosteriorTrajectoryPair::from_probabilities(&plan, vec![], vec![uniform(2); 2], vec![uniform(2); 2], uniform(2))
            .unwrap_err();
        assert!(matches!(err, TandemError::WindowCount { family: "full", .. }));
    }

    #[test]
    fn tape_scores_match_pure_formula() {
        let (plan, p) = random_pair(7, 2, 3, true, 19);
        let mut tape = Tape::new();
        let as_var = |tape: &mut Tape, v: &Vec<f64>| tape.constant(crate::diffcore::DenseArray::new(vec![1, 3], v.clone()).unwrap());
        let w = WindowOutputs {
            prefix: p.log_prefix().iter().map(|v| as_var(&mut tape, v)).collect(),
            full: p.log_full().iter().map(|v| as_var(&mut tape, v)).collect(),
            short: p.log_short().iter().map(|v| as_var(&mut tape, v)).collect(),
        };
        let scores = tandem_scores_on_tape(&mut tape, &plan, &w).unwrap();
        let llr = tandem_llr(&p).unwrap();
        for (i, t) in llr.times().enumerate() {
            let s = tape.value(scores[i]).values();
            assert!((llr.get(t, 0, 2) - (s[0] - s[2])).abs() < 1e-12);
        }
    }
}
