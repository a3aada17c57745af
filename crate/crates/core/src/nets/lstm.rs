use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frames_constant, softmax_row, ActivationKind, NetError, ParamStore};
use crate::diffcore::{DenseArray, ParamId, Tape, Var, LAYERNORM_EPS};
use crate::gauss::FeatureSequence;
use crate::tandem::{WindowOutputs, WindowPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub cell_activation: ActivationKind,
    pub output_activation: ActivationKind,
    /// Normalize the cell state (with learned gain and bias) before the output activation.
    #[serde(default)]
    pub layernorm: bool,
}

impl LstmConfig {
    pub fn new(input_dim: usize, hidden: usize, classes: usize, activation: ActivationKind) -> Self {
        Self {
            input_dim,
            hidden,
            classes,
            cell_activation: activation,
            output_activation: activation,
            layernorm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Ids {
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
    ln: Option<(ParamId, ParamId)>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Parameters registered on one tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    w_x: Var,
    w_h: Var,
    bias: Var,
    ln: Option<(Var, Var)>,
    head_w: Var,
    head_b: Var,
}

/// Single-layer LSTM with a softmax posterior head on the last hidden state.
///
/// Gates are laid out `[input, forget, candidate, output]` along the last
/// axis of the `4 * hidden` pre-activation.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmIntegrator {
    config: LstmConfig,
    params: ParamStore,
    ids: Ids,
}

impl LstmIntegrator {
    pub fn new(config: LstmConfig, seed: u64) -> Result<Self, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, h, k) = (config.input_dim, config.hidden, config.classes);
        // fan-in of the gates is the concatenated [x, h] input
        let bound_gates = 1.0 / ((d + h) as f64).sqrt();
        let gate_weight = |rng: &mut ChaCha8Rng, rows: usize| {
            use rand::Rng;
            DenseArray::from_fn(&[rows, 4 * h], |_| rng.gen_range(-bound_gates..=bound_gates))
        };
        let w_x = params.add("lstm.w_x", gate_weight(&mut rng, d));
        let w_h = params.add("lstm.w_h", gate_weight(&mut rng, h));
        let bias = params.add_zeros("lstm.bias", &[4 * h]);
        let ln = config.layernorm.then(|| {
            (
                params.add("lstm.ln_gain", DenseArray::full(&[h], 1.0)),
                params.add_zeros("lstm.ln_bias", &[h]),
            )
        });
        let head_w = params.add_weight("head.w", &[h, k], &mut rng);
        let head_b = params.add_zeros("head.b", &[k]);
        Self::from_params(
            config,
            params,
            Ids {
                w_x,
                w_h,
                bias,
                ln,
                head_w,
                head_b,
            },
        )
    }

    fn from_params(config: LstmConfig, params: ParamStore, ids: Ids) -> Result<Self, NetError> {
        config.cell_activation.validate()?;
        config.output_activation.validate()?;
        if config.input_dim == 0 || config.hidden == 0 || config.classes < 2 {
            return Err(NetError::InvalidConfig(format!("degenerate LSTM sizes {config:?}")));
        }
        Ok(Self { config, params, ids })
    }

    /// Rebuilds a model from named parameters (checkpoint loading).
    pub(crate) fn with_params(config: LstmConfig, params: ParamStore) -> Result<Self, NetError> {
        let find = |name: &str| {
            params
                .find(name)
                .ok_or_else(|| NetError::Checkpoint(format!("missing parameter {name}")))
        };
        let ln = if config.layernorm {
            Some((find("lstm.ln_gain")?, find("lstm.ln_bias")?))
        } else {
            None
        };
        let ids = Ids {
            w_x: find("lstm.w_x")?,
            w_h: find("lstm.w_h")?,
            bias: find("lstm.bias")?,
            ln,
            head_w: find("head.w")?,
            head_b: find("head.b")?,
        };
        let fresh = Self::new(config.clone(), 0)?;
        for (_, name, value) in fresh.params.iter() {
            let got = params.get(params.find(name).expect("checked above"));
            if got.shape() != value.shape() {
                return Err(NetError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    value.shape()
                )));
            }
        }
        Self::from_params(config, params, ids)
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        let p = &self.params;
        LstmVars {
            w_x: p.bind(tape, self.ids.w_x),
            w_h: p.bind(tape, self.ids.w_h),
            bias: p.bind(tape, self.ids.bias),
            ln: self.ids.ln.map(|(g, b)| (p.bind(tape, g), p.bind(tape, b))),
            head_w: p.bind(tape, self.ids.head_w),
            head_b: p.bind(tape, self.ids.head_b),
        }
    }

    /// One LSTM step on `x` (`[batch, d]`) from state `(h, c)`.
    pub fn step(&self, tape: &mut Tape, v: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var), NetError> {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.config.input_dim {
            return Err(NetError::InputDim {
                expected: self.config.input_dim,
                got: xs.last().copied().unwrap_or(0),
            });
        }
        let proj = tape.matmul(x, v.w_x)?;
        let proj = tape.add(proj, v.bias)?;
        self.step_projected(tape, v, proj, h, c)
    }

    /// Step with the input projection `x W_x + b` already computed.
    fn step_projected(&self, tape: &mut Tape, v: &LstmVars, proj: Var, h: Var, c: Var) -> Result<(Var, Var), NetError> {
        let hid = self.config.hidden;
        let rec = tape.matmul(h, v.w_h)?;
        let pre = tape.add(proj, rec)?;
        let i = tape.slice_axis(pre, 1, 0, hid)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_axis(pre, 1, hid, hid)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_axis(pre, 1, 2 * hid, hid)?;
        let g = self.config.cell_activation.apply(tape, g)?;
        let o = tape.slice_axis(pre, 1, 3 * hid, hid)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let cell = match v.ln {
            Some((gain, bias)) => {
                let n = tape.layernorm(c_next, LAYERNORM_EPS)?;
                let n = tape.mul(n, gain)?;
                tape.add(n, bias)?
            }
            None => c_next,
        };
        let act = self.config.output_activation.apply(tape, cell)?;
        let h_next = tape.mul(o, act)?;
        Ok((h_next, c_next))
    }

    /// Posterior-head logits `[rows, K]`.
    pub fn head(&self, tape: &mut Tape, v: &LstmVars, h: Var) -> Result<Var, NetError> {
        let z = tape.matmul(h, v.head_w)?;
        Ok(tape.add(z, v.head_b)?)
    }

    fn zero_state(&self, tape: &mut Tape, rows: usize) -> (Var, Var) {
        let h = tape.constant(DenseArray::zeros(&[rows, self.config.hidden]));
        let c = tape.constant(DenseArray::zeros(&[rows, self.config.hidden]));
        (h, c)
    }

    /// Logits of every window in `plan`.
    ///
    /// All full windows run stacked from a zero state. A short window is the
    /// first N frames of the full window one step later, and prefix windows
    /// are the partial states of the first full window, so one pass yields
    /// every family.
    pub fn window_logits(
        &self,
        tape: &mut Tape,
        batch: &[&FeatureSequence],
        plan: &WindowPlan,
    ) -> Result<WindowOutputs, NetError> {
        let v = self.bind(tape);
        let b = batch.len();
        let (x, horizon) = frames_constant(tape, batch, self.config.input_dim)?;
        if horizon != plan.horizon {
            return Err(NetError::Horizon {
                expected: plan.horizon,
                got: horizon,
            });
        }
        let proj = tape.matmul(x, v.w_x)?;
        let proj = tape.add(proj, v.bias)?;

        let order = plan.order;
        let windows = plan.full.len();
        let rows = windows * b;
        let (mut h, mut c) = self.zero_state(tape, rows);
        let mut out = WindowOutputs {
            prefix: Vec::with_capacity(plan.prefix.len()),
            full: Vec::with_capacity(windows),
            short: Vec::with_capacity(plan.short.len()),
        };
        for j in 0..=order {
            let idx: Vec<usize> = plan
                .full
                .iter()
                .flat_map(|w| (0..b).map(move |bi| bi * horizon + w.start + j))
                .collect();
            let xp = tape.take(proj, 0, idx)?;
            (h, c) = self.step_projected(tape, &v, xp, h, c)?;
            let seen = j + 1;
            if seen == order + 1 {
                let logits = self.head(tape, &v, h)?;
                for w in 0..windows {
                    out.full.push(tape.slice_axis(logits, 0, w * b, b)?);
                }
            } else if seen == order && windows > 1 {
                let logits = self.head(tape, &v, h)?;
                if !plan.prefix.is_empty() {
                    out.prefix.push(tape.slice_axis(logits, 0, 0, b)?);
                }
                for w in 1..windows {
                    out.short.push(tape.slice_axis(logits, 0, w * b, b)?);
                }
            } else if !plan.prefix.is_empty() {
                let h0 = tape.slice_axis(h, 0, 0, b)?;
                out.prefix.push(self.head(tape, &v, h0)?);
            }
        }
        Ok(out)
    }

    /// Posterior for one window: run from a zero state, softmax the head.
    pub fn posterior(&self, window: &[f64]) -> Result<Vec<f64>, NetError> {
        let d = self.config.input_dim;
        if window.is_empty() || !window.len().is_multiple_of(d) {
            return Err(NetError::Empty);
        }
        let mut tape = Tape::new();
        let v = self.bind(&mut tape);
        let (mut h, mut c) = self.zero_state(&mut tape, 1);
        for frame in window.chunks(d) {
            let x = tape.constant(DenseArray::new(vec![1, d], frame.to_vec())?);
            (h, c) = self.step(&mut tape, &v, x, h, c)?;
        }
        let logits = self.head(&mut tape, &v, h)?;
        Ok(softmax_row(tape.value(logits).values()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(m: &mut LstmIntegrator, name: &str, values: Vec<f64>) {
        let id = m.param_id(name).unwrap();
        let shape = m.params().get(id).shape().to_vec();
        *m.params_mut().get_mut(id) = DenseArray::new(shape, values).unwrap();
    }

    fn zeroed(config: LstmConfig) -> LstmIntegrator {
        let mut m = LstmIntegrator::new(config, 1).unwrap();
        let ids: Vec<_> = m.params().ids().collect();
        for id in ids {
            let shape = m.params().get(id).shape().to_vec();
            *m.params_mut().get_mut(id) = DenseArray::zeros(&shape);
        }
        m
    }

    #[test]
    fn zeros_propagate() {
        let m = zeroed(LstmConfig::new(3, 2, 2, ActivationKind::Tanh));
        let mut tape = Tape::new();
        let v = m.bind(&mut tape);
        let x = tape.constant(DenseArray::zeros(&[1, 3]));
        let (h, c) = m.zero_state(&mut tape, 1);
        let (h, c) = m.step(&mut tape, &v, x, h, c).unwrap();
        assert_eq!(tape.value(h).values(), &[0.0, 0.0]);
        assert_eq!(tape.value(c).values(), &[0.0, 0.0]);
    }

    #[test]
    fn forced_gates_write_b2bsqrt_of_candidate() {
        let mut m = zeroed(LstmConfig::new(1, 1, 2, ActivationKind::b2bsqrt()));
        // x = 1; candidate pre-activation 3 via w_x, input gate saturated by bias, forget gate closed
        set(&mut m, "lstm.w_x", vec![0.0, 0.0, 3.0, 0.0]);
        set(&mut m, "lstm.bias", vec![60.0, -60.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let v = m.bind(&mut tape);
        let x = tape.constant(DenseArray::new(vec![1, 1], vec![1.0]).unwrap());
        let (h, c) = m.zero_state(&mut tape, 1);
        let (_, c) = m.step(&mut tape, &v, x, h, c).unwrap();
        assert_eq!(tape.value(c).values(), &[1.0]);
    }

    #[test]
    fn zero_head_gives_uniform_posterior() {
        let mut m = LstmIntegrator::new(LstmConfig::new(4, 3, 3, ActivationKind::Tanh), 5).unwrap();
        set(&mut m, "head.w", vec![0.0; 9]);
        let p = m.posterior(&[0.5; 8]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn window_logits_match_single_window_posteriors() {
        let m = LstmIntegrator::new(LstmConfig::new(2, 3, 2, ActivationKind::b2bsqrt()), 9).unwrap();
        let seqs: Vec<FeatureSequence> = (0..2)
            .map(|i| FeatureSequence::new(i, i, 2, (0..12).map(|j| ((i * 12 + j) as f64 * 0.7).sin()).collect()))
            .collect();
        let batch: Vec<&FeatureSequence> = seqs.iter().collect();
        let plan = WindowPlan::new(6, 2).unwrap().with_prefix();
        let mut tape = Tape::new();
        let out = m.window_logits(&mut tape, &batch, &plan).unwrap();
        let check = |var: Var, range: std::ops::Range<usize>, tape: &Tape| {
            let logits = tape.value(var).values();
            for (bi, seq) in seqs.iter().enumerate() {
                let expect = m.posterior(seq.window(range.clone())).unwrap();
                let got = softmax_row(&logits[bi * 2..bi * 2 + 2]);
                for (a, b) in expect.iter().zip(&got) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        };
        for (v, r) in out.prefix.iter().zip(&plan.prefix) {
            check(*v, r.clone(), &tape);
        }
        for (v, r) in out.full.iter().zip(&plan.full) {
            check(*v, r.clone(), &tape);
        }
        for (v, r) in out.short.iter().zip(&plan.short) {
            check(*v, r.clone(), &tape);
        }
        assert_eq!(out.full.len(), 4);
        assert_eq!(out.short.len(), 3);
        assert_eq!(out.prefix.len(), 2);
    }
}
