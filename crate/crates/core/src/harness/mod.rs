//! Experiment configuration, presets, metrics and artifact emission.
//!
//! An experiment is a grid of variants (named config overrides), model
//! kinds and seeds. Each (variant, seed) pair draws one dataset that every
//! model in the grid trains on.

mod presets;
mod run;
mod verify;

pub use presets::{preset, PRESETS};
pub use run::{run_experiment, FailedSeed, MeanSem, RunReport, SeedResult, Summary, SummaryEntry};
pub use verify::{
    llr_increment, loss_gradient_errors, oracle_equivalence, primitive_gradient_errors, sprt_wald_disagreements, verify,
    wald_probe, CheckResult,
};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gauss::{GaussError, GaussianSpec};
use crate::nets::{
    ActivationKind, IntegratorConfig, LstmConfig, NetError, PoolingKind, TransformerConfig,
};
use crate::optim::{LlrFormula, OptimError, TrainConfig};
use crate::sprt::SprtError;
use crate::tandem::{LlrTrajectory, TandemError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("override {0:?}: expected key=value")]
    Override(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tandem(#[from] TandemError),
    #[error(transparent)]
    Sprt(#[from] SprtError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    B2bsqrtTandem,
    TanhTandem,
    TandemformerNsp,
    TandemformerGap,
    TandemformerOnetoken,
    OblivionLsel,
    /// Bayes posteriors of the generating Gaussians; nothing is trained.
    Oracle,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        Self::B2bsqrtTandem,
        Self::TanhTandem,
        Self::TandemformerNsp,
        Self::TandemformerGap,
        Self::TandemformerOnetoken,
        Self::OblivionLsel,
        Self::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::B2bsqrtTandem => "b2bsqrt-tandem",
            Self::TanhTandem => "tanh-tandem",
            Self::TandemformerNsp => "tandemformer-nsp",
            Self::TandemformerGap => "tandemformer-gap",
            Self::TandemformerOnetoken => "tandemformer-onetoken",
            Self::OblivionLsel => "oblivion-lsel",
            Self::Oracle => "oracle",
        }
    }

    pub fn formula(self) -> LlrFormula {
        match self {
            Self::OblivionLsel => LlrFormula::Oblivion,
            _ => LlrFormula::Tandem,
        }
    }

    /// Network for this kind; `None` for the oracle.
    pub fn integrator(self, sizes: &ModelSizes, dim: usize, classes: usize, order: usize) -> Option<IntegratorConfig> {
        let lstm = |act: ActivationKind| {
            IntegratorConfig::Lstm(LstmConfig {
                layernorm: sizes.layernorm,
                ..LstmConfig::new(dim, sizes.hidden, classes, act)
            })
        };
        let former = |pooling: PoolingKind| {
            IntegratorConfig::Transformer(TransformerConfig {
                input_dim: dim,
                classes,
                order,
                pooling,
                model_dim: sizes.model_dim,
                heads: sizes.heads,
                ff_dim: sizes.ff_dim,
                blocks: sizes.blocks,
                layernorm: sizes.layernorm,
            })
        };
        let b2b = ActivationKind::B2bsqrt { alpha: sizes.alpha };
        Some(match self {
            Self::B2bsqrtTandem | Self::OblivionLsel => lstm(b2b),
            Self::TanhTandem => lstm(ActivationKind::Tanh),
            Self::TandemformerNsp => former(PoolingKind::Nsp),
            Self::TandemformerGap => former(PoolingKind::Gap),
            Self::TandemformerOnetoken => former(PoolingKind::OneToken),
            Self::Oracle => return None,
        })
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSizes {
    pub hidden: usize,
    pub alpha: f64,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    pub layernorm: bool,
}

impl Default for ModelSizes {
    fn default() -> Self {
        Self {
            hidden: 64,
            alpha: ActivationKind::DEFAULT_ALPHA,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            blocks: 1,
            layernorm: false,
        }
    }
}

/// A named set of dotted-key overrides applied on top of the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
}

impl Variant {
    pub fn base() -> Self {
        Self {
            name: "base".into(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn with(name: impl Into<String>, key: &str, value: impl Into<Value>) -> Self {
        Self {
            name: name.into(),
            overrides: BTreeMap::from([(key.to_string(), value.into())]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: String,
    pub models: Vec<ModelKind>,
    /// `per_class` sizes the training split.
    pub gaussian: GaussianSpec,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Markov order N.
    pub order: usize,
    /// Score t in [1, N] from growing windows `x(1..t)`.
    pub prefix_windows: bool,
    pub model: ModelSizes,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub variants: Vec<Variant>,
    /// Scalar SPRT thresholds; empty disables the SAT evaluation.
    pub sat_thresholds: Vec<f64>,
    /// Test sequences written to `llr_trajectories.csv` per run.
    pub dump_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "custom".into(),
            models: vec![ModelKind::B2bsqrtTandem],
            gaussian: GaussianSpec::default(),
            val_per_class: 500,
            test_per_class: 500,
            order: 49,
            prefix_windows: true,
            model: ModelSizes::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            variants: vec![Variant::base()],
            sat_thresholds: Vec::new(),
            dump_samples: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        self.gaussian.validate()?;
        self.train.validate()?;
        if self.order >= self.gaussian.horizon {
            return bad(format!("N = {} must be at most T - 1 = {}", self.order, self.gaussian.horizon - 1));
        }
        if self.models.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return bad("models, seeds and variants must be non-empty".into());
        }
        if self.gaussian.per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return bad("every split needs at least one sequence per class".into());
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("variant names must be unique".into());
        }
        Ok(())
    }

    /// The config with `variant`'s overrides applied.
    pub fn resolve(&self, variant: &Variant) -> Result<Self, HarnessError> {
        let mut value = serde_json::to_value(self)?;
        for (key, v) in &variant.overrides {
            set_dotted(&mut value, key, v.clone())?;
        }
        let resolved: Self = serde_json::from_value(value)?;
        resolved.validate()?;
        Ok(resolved)
    }

    /// Applies `key=value` overrides; values parse as JSON, else as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, HarnessError> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| HarnessError::Override(o.to_string()))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_dotted(&mut value, key.trim(), parsed)?;
        }
        let out: Self = serde_json::from_value(value)?;
        out.validate()?;
        Ok(out)
    }
}

fn set_dotted(root: &mut Value, key: &str, v: Value) -> Result<(), HarnessError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| HarnessError::InvalidConfig(format!("{key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(HarnessError::InvalidConfig(format!("unknown config key {key}")));
            }
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| HarnessError::InvalidConfig(format!("unknown config key {key}")))?;
    }
    Err(HarnessError::Override(key.to_string()))
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Per-timestep MAE over samples and class pairs `k < l`, on the estimate's time range.
///
/// `truth` may start earlier than `est`; it is restricted to `est`'s range.
pub fn compute_mae(est: &[LlrTrajectory], truth: &[LlrTrajectory]) -> Result<Vec<(usize, f64)>, HarnessError> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(HarnessError::Shape(format!("{} estimates vs {} truths", est.len(), truth.len())));
    }
    let (k, horizon, start) = (est[0].classes(), est[0].horizon(), est[0].start());
    for (e, t) in est.iter().zip(truth) {
        if e.classes() != k || t.classes() != k || e.horizon() != horizon || t.horizon() != horizon {
            return Err(HarnessError::Shape("class count or horizon differs".into()));
        }
        if e.start() != start || t.start() > start {
            return Err(HarnessError::Shape(format!(
                "estimate starts at {}, truth at {}",
                e.start(),
                t.start()
            )));
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let n = est.len() as f64;
    Ok((start..=horizon)
        .map(|t| {
            let mut sum = 0.0;
            for (e, tr) in est.iter().zip(truth) {
                for a in 0..k {
                    for b in a + 1..k {
                        sum += (e.get(t, a, b) - tr.get(t, a, b)).abs();
                    }
                }
            }
            (t, sum / (n * pairs))
        })
        .collect())
}

/// Final-timestep MAE of each pair `(k, l)`, `k < l`.
pub fn pair_mae_final(est: &[LlrTrajectory], truth: &[LlrTrajectory]) -> Vec<((usize, usize), f64)> {
    let Some(first) = est.first() else {
        return Vec::new();
    };
    let (k, t) = (first.classes(), first.horizon());
    let n = est.len() as f64;
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let s: f64 = est.iter().zip(truth).map(|(e, tr)| (e.get(t, a, b) - tr.get(t, a, b)).abs()).sum();
            out.push(((a, b), s / n));
        }
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &p in &idx[i..=j] {
                r[p] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_matches_printf_g9() {
        let cases = [
            (1.0, "1"),
            (0.5, "0.5"),
            (1.0 / 3.0, "0.333333333"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (1e-5, "1e-05"),
            (0.0001234, "0.0001234"),
            (-2.5, "-2.5"),
            (100.0, "100"),
            (0.0, "0"),
            (f64::NAN, "nan"),
            (99999999.95, "100000000"),
        ];
        for (v, s) in cases {
            assert_eq!(format_float(v), s, "{v}");
        }
    }

    fn traj(values: &[f64]) -> LlrTrajectory {
        let scores: Vec<Vec<f64>> = values.iter().map(|&v| vec![0.0, v]).collect();
        LlrTrajectory::from_scores(0, values.len(), 1, &scores).unwrap()
    }

    #[test]
    fn mae_examples() {
        let truth = vec![traj(&[1.0, 2.0, 3.0]), traj(&[-1.0, 0.5, 4.0])];
        let same = compute_mae(&truth, &truth).unwrap();
        assert!(same.iter().all(|&(_, m)| m == 0.0));
        let shifted: Vec<LlrTrajectory> = [[2.0, 3.0, 4.0], [0.0, 1.5, 5.0]].iter().map(|v| traj(v)).collect();
        let plus_one = compute_mae(&shifted, &truth).unwrap();
        assert_eq!(plus_one, vec![(1, 1.0), (2, 1.0), (3, 1.0)]);
        assert!(compute_mae(&truth[..1], &truth).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert!((ols_slope(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn overrides_use_dotted_keys() {
        let base = ExperimentConfig::default();
        let c = base
            .with_overrides(&["gaussian.offset=1.5", "train.weight_decay=0.01", "models=[\"tanh-tandem\"]"])
            .unwrap();
        assert_eq!(c.gaussian.offset, 1.5);
        assert_eq!(c.train.weight_decay, 0.01);
        assert_eq!(c.models, vec![ModelKind::TanhTandem]);
        assert!(base.with_overrides(&["gaussian.nope=1"]).is_err());
        assert!(base.with_overrides(&["order=50"]).is_err());
        assert!(base.with_overrides(&["noequals"]).is_err());
    }
}
