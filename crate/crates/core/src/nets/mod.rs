//! Temporal integrators that map a window of frames to class logits.
//!
//! Two families share one interface ([`Integrator`]): an LSTM whose
//! candidate-cell and cell-output activations are configurable, and a
//! sliding-window transformer with configurable pooling. Swapping either
//! knob changes no shapes, so ablations are pure configuration changes.

mod checkpoint;
mod lstm;
mod params;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use lstm::{LstmConfig, LstmIntegrator};
pub use params::ParamStore;
pub use transformer::{sinusoidal_encoding, TransformerConfig, TransformerIntegrator};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DenseArray, DiffError, Tape, Var};
use crate::gauss::FeatureSequence;
use crate::tandem::{TandemError, WindowOutputs, WindowPlan};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Tandem(#[from] TandemError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("window of {len} frames exceeds the Markov order {order} (max {max})", max = order + 1)]
    WindowTooLong { len: usize, order: usize },
    #[error("input has {got} features per frame, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("batch sequences must share length {expected}, got {got}")]
    Horizon { expected: usize, got: usize },
    #[error("empty window or batch")]
    Empty,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Nonlinearity for the LSTM's candidate-cell and cell-output paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActivationKind {
    Tanh,
    B2bsqrt { alpha: f64 },
}

impl ActivationKind {
    pub const DEFAULT_ALPHA: f64 = 1.0;

    pub fn b2bsqrt() -> Self {
        Self::B2bsqrt {
            alpha: Self::DEFAULT_ALPHA,
        }
    }

    fn validate(&self) -> Result<(), NetError> {
        match *self {
            Self::B2bsqrt { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(NetError::InvalidConfig(format!("b2bsqrt alpha must be positive, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        match *self {
            Self::Tanh => Ok(tape.tanh(x)),
            Self::B2bsqrt { alpha } => tape.b2bsqrt(x, alpha),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    /// Sum of tokens divided by the constant N+1.
    Nsp,
    /// Mean over the tokens actually present.
    Gap,
    /// Output of a learned token prepended to the window.
    OneToken,
}

/// `sign(x) (sqrt(alpha + |x|) - sqrt(alpha))`.
pub fn b2bsqrt(x: f64, alpha: f64) -> Result<f64, NetError> {
    ActivationKind::B2bsqrt { alpha }.validate()?;
    Ok(x.signum() * ((alpha + x.abs()).sqrt() - alpha.sqrt()))
}

/// Derivative of [`b2bsqrt`]; `1 / (2 sqrt(alpha))` at the origin.
pub fn b2bsqrt_derivative(x: f64, alpha: f64) -> Result<f64, NetError> {
    ActivationKind::B2bsqrt { alpha }.validate()?;
    Ok(0.5 / (alpha + x.abs()).sqrt())
}

/// Normalized summation pooling: elementwise sum of `tokens` over `order + 1`.
pub fn nsp_pool(tokens: &[Vec<f64>], order: usize) -> Result<Vec<f64>, NetError> {
    let first = tokens.first().ok_or(NetError::Empty)?;
    if tokens.len() > order + 1 {
        return Err(NetError::WindowTooLong {
            len: tokens.len(),
            order,
        });
    }
    let mut out = vec![0.0; first.len()];
    for z in tokens {
        if z.len() != out.len() {
            return Err(NetError::InputDim {
                expected: out.len(),
                got: z.len(),
            });
        }
        out.iter_mut().zip(z).for_each(|(o, v)| *o += v);
    }
    let denom = (order + 1) as f64;
    out.iter_mut().for_each(|o| *o /= denom);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum IntegratorConfig {
    Lstm(LstmConfig),
    Transformer(TransformerConfig),
}

impl IntegratorConfig {
    pub fn classes(&self) -> usize {
        match self {
            Self::Lstm(c) => c.classes,
            Self::Transformer(c) => c.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Integrator {
    Lstm(LstmIntegrator),
    Transformer(TransformerIntegrator),
}

impl Integrator {
    pub fn new(config: &IntegratorConfig, seed: u64) -> Result<Self, NetError> {
        Ok(match config {
            IntegratorConfig::Lstm(c) => Self::Lstm(LstmIntegrator::new(c.clone(), seed)?),
            IntegratorConfig::Transformer(c) => Self::Transformer(TransformerIntegrator::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> IntegratorConfig {
        match self {
            Self::Lstm(m) => IntegratorConfig::Lstm(m.config().clone()),
            Self::Transformer(m) => IntegratorConfig::Transformer(m.config().clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Self::Lstm(m) => m.params(),
            Self::Transformer(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Lstm(m) => m.params_mut(),
            Self::Transformer(m) => m.params_mut(),
        }
    }

    pub fn classes(&self) -> usize {
        self.config().classes()
    }

    /// Logits (`[batch, K]`) of every window in `plan`, for a batch of sequences.
    pub fn window_logits(
        &self,
        tape: &mut Tape,
        batch: &[&FeatureSequence],
        plan: &WindowPlan,
    ) -> Result<WindowOutputs, NetError> {
        match self {
            Self::Lstm(m) => m.window_logits(tape, batch, plan),
            Self::Transformer(m) => m.window_logits(tape, batch, plan),
        }
    }

    /// Class posterior for a single window of frames (row-major `[len, d]`).
    pub fn posterior(&self, window: &[f64]) -> Result<Vec<f64>, NetError> {
        match self {
            Self::Lstm(m) => m.posterior(window),
            Self::Transformer(m) => m.posterior(window),
        }
    }
}

/// Stacks the frames of a batch into a `[batch * T, d]` constant.
pub(crate) fn frames_constant(tape: &mut Tape, batch: &[&FeatureSequence], dim: usize) -> Result<(Var, usize), NetError> {
    let first = batch.first().ok_or(NetError::Empty)?;
    let horizon = first.len();
    let mut values = Vec::with_capacity(batch.len() * horizon * dim);
    for seq in batch {
        if seq.dim() != dim {
            return Err(NetError::InputDim {
                expected: dim,
                got: seq.dim(),
            });
        }
        if seq.len() != horizon {
            return Err(NetError::Horizon {
                expected: horizon,
                got: seq.len(),
            });
        }
        values.extend_from_slice(seq.frames());
    }
    let var = tape.constant(DenseArray::new(vec![batch.len() * horizon, dim], values)?);
    Ok((var, horizon))
}

/// Softmax of a logit row.
pub(crate) fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b2bsqrt_examples() {
        assert_eq!(b2bsqrt(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(b2bsqrt(3.0, 1.0).unwrap(), 1.0);
        assert_eq!(b2bsqrt(-3.0, 1.0).unwrap(), -1.0);
        assert_eq!(b2bsqrt_derivative(0.0, 1.0).unwrap(), 0.5);
        assert!(b2bsqrt(1.0, 0.0).is_err());
        assert!(b2bsqrt(1.0, -2.0).is_err());
    }

    #[test]
    fn b2bsqrt_is_odd_and_increasing() {
        let grid: Vec<f64> = (0..1000).map(|i| -50.0 + 100.0 * i as f64 / 999.0).collect();
        let vals: Vec<f64> = grid.iter().map(|&x| b2bsqrt(x, 1.0).unwrap()).collect();
        for (x, v) in grid.iter().zip(&vals) {
            assert_eq!(b2bsqrt(-x, 1.0).unwrap(), -v);
        }
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn b2bsqrt_grows_like_sqrt() {
        let x = 1e4;
        let r = b2bsqrt(x, 1.0).unwrap() / x.sqrt();
        assert!((0.9..=1.0).contains(&r), "{r}");
    }

    #[test]
    fn nsp_examples() {
        assert_eq!(nsp_pool(&vec![vec![0.0; 3]; 2], 4).unwrap(), vec![0.0; 3]);
        let z = vec![1.0, -2.0, 0.5];
        let full = nsp_pool(&vec![z.clone(); 5], 4).unwrap();
        for (a, b) in full.iter().zip(&z) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(nsp_pool(&[vec![5.0, 10.0]], 4).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(nsp_pool(&[], 3), Err(NetError::Empty)));
        assert!(matches!(nsp_pool(&vec![z; 6], 4), Err(NetError::WindowTooLong { .. })));
    }

    #[test]
    fn nsp_norm_grows_with_window_fill() {
        let z = vec![0.3, -1.1, 2.0];
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut prev = 0.0;
        for w in 1..=6 {
            let pooled = nsp_pool(&vec![z.clone(); w], 5).unwrap();
            let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - w as f64 / 6.0 * zn).abs() < 1e-12);
            assert!(norm > prev);
            prev = norm;
        }
    }
}
