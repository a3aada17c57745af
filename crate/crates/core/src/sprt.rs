//! Multiclass SPRT decisions over LLR trajectories.
//!
//! Class `k` is accepted at the first `t` where
//! `min_{l != k} (lambda_kl(t) - a_kl) >= 0`; the test stops at the earliest
//! such time over all classes. Evaluation starts at the first timestep the
//! trajectory defines. Trajectories that never cross are decided at the
//! horizon by the largest `min_{l != k} lambda_kl(T)` and flagged as forced.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tandem::LlrTrajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SprtError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("threshold matrix is for {thresholds} classes, trajectory has {llr}")]
    ClassMismatch { thresholds: usize, llr: usize },
    #[error("threshold entries must be finite")]
    NonFiniteThreshold,
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("empty dataset or threshold sweep")]
    Empty,
    #[error("{0} trajectories but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("binary test needs 2 classes, got {0}")]
    NotBinary(usize),
}

/// Decision thresholds `a_kl`; the diagonal is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMatrix {
    classes: usize,
    values: Vec<f64>,
}

impl ThresholdMatrix {
    pub fn new(classes: usize, values: Vec<f64>) -> Result<Self, SprtError> {
        if values.len() != classes * classes {
            return Err(SprtError::ClassMismatch {
                thresholds: (values.len() as f64).sqrt() as usize,
                llr: classes,
            });
        }
        let off_diag_finite = (0..classes)
            .flat_map(|k| (0..classes).map(move |l| (k, l)))
            .filter(|(k, l)| k != l)
            .all(|(k, l)| values[k * classes + l].is_finite());
        if !off_diag_finite {
            return Err(SprtError::NonFiniteThreshold);
        }
        Ok(Self { classes, values })
    }

    /// Every off-diagonal entry equal to `a`.
    pub fn scalar(classes: usize, a: f64) -> Result<Self, SprtError> {
        Self::new(
            classes,
            (0..classes * classes)
                .map(|i| if i / classes == i % classes { 0.0 } else { a })
                .collect(),
        )
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[k * self.classes + l]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            classes: self.classes,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SprtOutcome {
    pub decided_class: usize,
    /// 1-based timestep of the decision.
    pub stopping_time: usize,
    /// No threshold was crossed by the horizon.
    pub forced: bool,
}

/// Runs the multiclass SPRT on one trajectory.
pub fn sprt_run(llr: &LlrTrajectory, thresholds: &ThresholdMatrix) -> Result<SprtOutcome, SprtError> {
    if llr.is_empty() {
        return Err(SprtError::EmptyTrajectory);
    }
    let k_count = llr.classes();
    if thresholds.classes() != k_count {
        return Err(SprtError::ClassMismatch {
            thresholds: thresholds.classes(),
            llr: k_count,
        });
    }
    for t in llr.times() {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..k_count {
            let margin = (0..k_count)
                .filter(|&l| l != k)
                .map(|l| llr.get(t, k, l) - thresholds.get(k, l))
                .fold(f64::INFINITY, f64::min);
            if margin >= 0.0 && best.map_or(true, |(_, m)| margin > m) {
                best = Some((k, margin));
            }
        }
        if let Some((k, _)) = best {
            return Ok(SprtOutcome {
                decided_class: k,
                stopping_time: t,
                forced: false,
            });
        }
    }
    let horizon = llr.horizon();
    let decided_class = (0..k_count)
        .map(|k| (k, llr.min_margin(horizon, k)))
        .fold((0, f64::NEG_INFINITY), |acc, (k, m)| if m > acc.1 { (k, m) } else { acc })
        .0;
    Ok(SprtOutcome {
        decided_class,
        stopping_time: horizon,
        forced: true,
    })
}

/// Classical two-boundary Wald test on a binary log-ratio series.
///
/// `series[i]` is `lambda_10` at timestep `start + i`; the test decides 1 on
/// reaching `upper` and 0 on reaching `-lower`.
pub fn wald_binary(series: &[f64], start: usize, upper: f64, lower: f64) -> Option<SprtOutcome> {
    series.iter().enumerate().find_map(|(i, &v)| {
        let t = start + i;
        let up = v - upper;
        let down = -v - lower;
        match (up >= 0.0, down >= 0.0) {
            (true, true) => Some(if down > up { (0, t) } else { (1, t) }),
            (true, false) => Some((1, t)),
            (false, true) => Some((0, t)),
            _ => None,
        }
        .map(|(decided_class, stopping_time)| SprtOutcome {
            decided_class,
            stopping_time,
            forced: false,
        })
    })
}

/// One point of a speed-accuracy tradeoff curve for a single seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatPoint {
    pub threshold: f64,
    pub mean_hitting_time: f64,
    pub mean_per_class_error: f64,
}

/// Seed-aggregated SAT point with standard errors over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatSummary {
    pub threshold: f64,
    pub mean_hitting_time: f64,
    pub mean_per_class_error: f64,
    pub sem_hitting_time: f64,
    pub sem_per_class_error: f64,
}

/// Mean hitting time and class-averaged error rate per scalar threshold.
pub fn sat_points(llrs: &[LlrTrajectory], labels: &[usize], sweep: &[f64]) -> Result<Vec<SatPoint>, SprtError> {
    if llrs.is_empty() || sweep.is_empty() {
        return Err(SprtError::Empty);
    }
    if llrs.len() != labels.len() {
        return Err(SprtError::LengthMismatch(llrs.len(), labels.len()));
    }
    let classes = llrs[0].classes();
    let mut per_class = vec![0usize; classes];
    for &y in labels {
        per_class[y] += 1;
    }
    if let Some(c) = per_class.iter().position(|&n| n == 0) {
        return Err(SprtError::MissingClass(c));
    }
    sweep
        .iter()
        .map(|&a| {
            let thresholds = ThresholdMatrix::scalar(classes, a)?;
            let mut wrong = vec![0usize; classes];
            let mut time = 0.0;
            for (llr, &y) in llrs.iter().zip(labels) {
                let out = sprt_run(llr, &thresholds)?;
                time += out.stopping_time as f64;
                if out.decided_class != y {
                    wrong[y] += 1;
                }
            }
            let err = wrong
                .iter()
                .zip(&per_class)
                .map(|(&w, &n)| w as f64 / n as f64)
                .sum::<f64>()
                / classes as f64;
            Ok(SatPoint {
                threshold: a,
                mean_hitting_time: time / llrs.len() as f64,
                mean_per_class_error: err,
            })
        })
        .collect()
}

/// Sample mean and standard error of the mean.
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// SAT curve over seed repetitions: `runs[i]` holds one seed's points.
pub fn sat_curve(runs: &[Vec<SatPoint>]) -> Result<Vec<SatSummary>, SprtError> {
    let first = runs.first().ok_or(SprtError::Empty)?;
    Ok((0..first.len())
        .map(|i| {
            let times: Vec<f64> = runs.iter().map(|r| r[i].mean_hitting_time).collect();
            let errs: Vec<f64> = runs.iter().map(|r| r[i].mean_per_class_error).collect();
            let (mean_hitting_time, sem_hitting_time) = mean_sem(&times);
            let (mean_per_class_error, sem_per_class_error) = mean_sem(&errs);
            SatSummary {
                threshold: first[i].threshold,
                mean_hitting_time,
                mean_per_class_error,
                sem_hitting_time,
                sem_per_class_error,
            }
        })
        .collect())
}

/// Result of [`wald_error_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldProbe {
    pub error_rate: f64,
    pub decided: usize,
    pub forced: usize,
}

impl WaldProbe {
    /// Binomial standard error of the error rate.
    pub fn binomial_sem(&self) -> f64 {
        if self.decided == 0 {
            return 0.0;
        }
        (self.error_rate * (1.0 - self.error_rate) / self.decided as f64).sqrt()
    }
}

/// Empirical error among non-forced binary decisions at symmetric threshold `a`.
pub fn wald_error_probe(a: f64, llrs: &[LlrTrajectory], labels: &[usize]) -> Result<WaldProbe, SprtError> {
    if llrs.len() != labels.len() {
        return Err(SprtError::LengthMismatch(llrs.len(), labels.len()));
    }
    if let Some(l) = llrs.iter().find(|l| l.classes() != 2) {
        return Err(SprtError::NotBinary(l.classes()));
    }
    let thresholds = ThresholdMatrix::scalar(2, a)?;
    let (mut wrong, mut decided, mut forced) = (0usize, 0usize, 0usize);
    for (llr, &y) in llrs.iter().zip(labels) {
        let out = sprt_run(llr, &thresholds)?;
        if out.forced {
            forced += 1;
            continue;
        }
        decided += 1;
        wrong += (out.decided_class != y) as usize;
    }
    Ok(WaldProbe {
        error_rate: if decided == 0 { 0.0 } else { wrong as f64 / decided as f64 },
        decided,
        forced,
    })
}
