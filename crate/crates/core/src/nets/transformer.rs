use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frames_constant, softmax_row, NetError, ParamStore, PoolingKind};
use crate::diffcore::{DenseArray, ParamId, Tape, Var, LAYERNORM_EPS};
use crate::gauss::FeatureSequence;
use crate::tandem::{WindowOutputs, WindowPlan};

fn default_heads() -> usize {
    4
}
fn default_model_dim() -> usize {
    64
}
fn default_ff_dim() -> usize {
    128
}
fn default_blocks() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub input_dim: usize,
    pub classes: usize,
    /// Markov order N; windows hold at most N+1 frames.
    pub order: usize,
    pub pooling: PoolingKind,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ff_dim")]
    pub ff_dim: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Pre-norm residual blocks.
    #[serde(default)]
    pub layernorm: bool,
}

impl TransformerConfig {
    pub fn new(input_dim: usize, classes: usize, order: usize, pooling: PoolingKind) -> Self {
        Self {
            input_dim,
            classes,
            order,
            pooling,
            model_dim: default_model_dim(),
            heads: default_heads(),
            ff_dim: default_ff_dim(),
            blocks: default_blocks(),
            layernorm: false,
        }
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 || self.classes < 2 {
            return Err(NetError::InvalidConfig(format!("degenerate transformer sizes {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(NetError::InvalidConfig(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Fixed sinusoidal position codes, `[len, dim]`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> DenseArray {
    DenseArray::from_fn(&[len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let freq = 10000f64.powf(-((j - j % 2) as f64) / dim as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln: Option<[ParamId; 4]>,
}

#[derive(Debug, Clone, Copy)]
struct BlockVars {
    qkv_w: Var,
    qkv_b: Var,
    out_w: Var,
    out_b: Var,
    ff1_w: Var,
    ff1_b: Var,
    ff2_w: Var,
    ff2_b: Var,
    ln: Option<[Var; 4]>,
}

struct Vars {
    embed_w: Var,
    embed_b: Var,
    blocks: Vec<BlockVars>,
    cls: Option<Var>,
    head_w: Var,
    head_b: Var,
}

#[derive(Debug, Clone, PartialEq)]
struct Ids {
    embed_w: ParamId,
    embed_b: ParamId,
    blocks: Vec<BlockIds>,
    cls: Option<ParamId>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Window transformer: frame embedding, self-attention blocks, pooling, softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerIntegrator {
    config: TransformerConfig,
    params: ParamStore,
    ids: Ids,
}

fn block_names(i: usize) -> [String; 12] {
    [
        "qkv_w", "qkv_b", "out_w", "out_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
    ]
    .map(|n| format!("block{i}.{n}"))
}

impl TransformerIntegrator {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, dm, ff, k) = (config.input_dim, config.model_dim, config.ff_dim, config.classes);
        p.add_weight("embed.w", &[d, dm], &mut rng);
        p.add_zeros("embed.b", &[dm]);
        for i in 0..config.blocks {
            let n = block_names(i);
            p.add_weight(&n[0], &[dm, 3 * dm], &mut rng);
            p.add_zeros(&n[1], &[3 * dm]);
            p.add_weight(&n[2], &[dm, dm], &mut rng);
            p.add_zeros(&n[3], &[dm]);
            p.add_weight(&n[4], &[dm, ff], &mut rng);
            p.add_zeros(&n[5], &[ff]);
            p.add_weight(&n[6], &[ff, dm], &mut rng);
            p.add_zeros(&n[7], &[dm]);
            if config.layernorm {
                p.add(n[8].clone(), DenseArray::full(&[dm], 1.0));
                p.add_zeros(&n[9], &[dm]);
                p.add(n[10].clone(), DenseArray::full(&[dm], 1.0));
                p.add_zeros(&n[11], &[dm]);
            }
        }
        if config.pooling == PoolingKind::OneToken {
            p.add_weight("cls", &[1, dm], &mut rng);
        }
        p.add_weight("head.w", &[dm, k], &mut rng);
        p.add_zeros("head.b", &[k]);
        Self::with_params(config, p)
    }

    /// Rebuilds a model from named parameters.
    pub(crate) fn with_params(config: TransformerConfig, params: ParamStore) -> Result<Self, NetError> {
        config.validate()?;
        let find = |name: &str| {
            params
                .find(name)
                .ok_or_else(|| NetError::Checkpoint(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let n = block_names(i);
            let ln = if config.layernorm {
                Some([find(&n[8])?, find(&n[9])?, find(&n[10])?, find(&n[11])?])
            } else {
                None
            };
            blocks.push(BlockIds {
                qkv_w: find(&n[0])?,
                qkv_b: find(&n[1])?,
                out_w: find(&n[2])?,
                out_b: find(&n[3])?,
                ff1_w: find(&n[4])?,
                ff1_b: find(&n[5])?,
                ff2_w: find(&n[6])?,
                ff2_b: find(&n[7])?,
                ln,
            });
        }
        let cls = match config.pooling {
            PoolingKind::OneToken => Some(find("cls")?),
            _ => None,
        };
        let ids = Ids {
            embed_w: find("embed.w")?,
            embed_b: find("embed.b")?,
            blocks,
            cls,
            head_w: find("head.w")?,
            head_b: find("head.b")?,
        };
        let (d, dm, k) = (config.input_dim, config.model_dim, config.classes);
        for (id, shape) in [(ids.embed_w, vec![d, dm]), (ids.head_w, vec![dm, k])] {
            if params.get(id).shape() != shape.as_slice() {
                return Err(NetError::Checkpoint(format!(
                    "{}: shape {:?}, expected {shape:?}",
                    params.name(id),
                    params.get(id).shape()
                )));
            }
        }
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &TransformerConfig {
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

    fn bind(&self, tape: &mut Tape) -> Vars {
        let p = &self.params;
        let blocks = self
            .ids
            .blocks
            .iter()
            .map(|b| BlockVars {
                qkv_w: p.bind(tape, b.qkv_w),
                qkv_b: p.bind(tape, b.qkv_b),
                out_w: p.bind(tape, b.out_w),
                out_b: p.bind(tape, b.out_b),
                ff1_w: p.bind(tape, b.ff1_w),
                ff1_b: p.bind(tape, b.ff1_b),
                ff2_w: p.bind(tape, b.ff2_w),
                ff2_b: p.bind(tape, b.ff2_b),
                ln: b.ln.map(|ids| ids.map(|id| p.bind(tape, id))),
            })
            .collect();
        Vars {
            embed_w: p.bind(tape, self.ids.embed_w),
            embed_b: p.bind(tape, self.ids.embed_b),
            blocks,
            cls: self.ids.cls.map(|id| p.bind(tape, id)),
            head_w: p.bind(tape, self.ids.head_w),
            head_b: p.bind(tape, self.ids.head_b),
        }
    }

    fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, NetError> {
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    fn norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var, NetError> {
        let n = tape.layernorm(x, LAYERNORM_EPS)?;
        let n = tape.mul(n, gain)?;
        Ok(tape.add(n, bias)?)
    }

    /// One residual block on `x: [R, L, D]`.
    fn block(&self, tape: &mut Tape, v: &BlockVars, x: Var) -> Result<Var, NetError> {
        let dm = self.config.model_dim;
        let heads = self.config.heads;
        let dh = dm / heads;
        let xin = match v.ln {
            Some([g, b, ..]) => Self::norm(tape, x, g, b)?,
            None => x,
        };
        let qkv = Self::affine(tape, xin, v.qkv_w, v.qkv_b)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_axis(qkv, 2, h * dh, dh)?;
            let k = tape.slice_axis(qkv, 2, dm + h * dh, dh)?;
            let val = tape.slice_axis(qkv, 2, 2 * dm + h * dh, dh)?;
            let kt = tape.transpose_last2(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = tape.softmax(scores)?;
            outs.push(tape.matmul(att, val)?);
        }
        let att = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
        let proj = Self::affine(tape, att, v.out_w, v.out_b)?;
        let x = tape.add(x, proj)?;
        let xin = match v.ln {
            Some([_, _, g, b]) => Self::norm(tape, x, g, b)?,
            None => x,
        };
        let hidden = Self::affine(tape, xin, v.ff1_w, v.ff1_b)?;
        let hidden = tape.relu(hidden);
        let ff = Self::affine(tape, hidden, v.ff2_w, v.ff2_b)?;
        Ok(tape.add(x, ff)?)
    }

    /// Logits for equal-length windows gathered from embedded frames `emb: [B*T, D]`.
    ///
    /// Rows are window-major: row `w * batch + b`.
    fn encode(
        &self,
        tape: &mut Tape,
        v: &Vars,
        emb: Var,
        batch: usize,
        horizon: usize,
        windows: &[Range<usize>],
    ) -> Result<Var, NetError> {
        let len = windows[0].len();
        if len == 0 {
            return Err(NetError::Empty);
        }
        if len > self.config.order + 1 {
            return Err(NetError::WindowTooLong {
                len,
                order: self.config.order,
            });
        }
        let dm = self.config.model_dim;
        let rows = windows.len() * batch;
        let idx: Vec<usize> = windows
            .iter()
            .flat_map(|w| (0..batch).flat_map(move |b| (0..len).map(move |j| b * horizon + w.start + j)))
            .collect();
        let x = tape.take(emb, 0, idx)?;
        let x = tape.reshape(x, vec![rows, len, dm])?;
        let pe = tape.constant(sinusoidal_encoding(len, dm));
        let mut x = tape.add(x, pe)?;
        if let Some(cls) = v.cls {
            let c = tape.reshape(cls, vec![1, 1, dm])?;
            let c = tape.broadcast_to(c, vec![rows, 1, dm])?;
            x = tape.concat(&[c, x], 1)?;
        }
        for b in &v.blocks {
            x = self.block(tape, b, x)?;
        }
        let pooled = match self.config.pooling {
            PoolingKind::Nsp => {
                let s = tape.sum_axis(x, 1)?;
                tape.scale(s, 1.0 / (self.config.order + 1) as f64)
            }
            PoolingKind::Gap => {
                let s = tape.sum_axis(x, 1)?;
                tape.scale(s, 1.0 / len as f64)
            }
            PoolingKind::OneToken => {
                let c = tape.slice_axis(x, 1, 0, 1)?;
                tape.reshape(c, vec![rows, dm])?
            }
        };
        Self::affine(tape, pooled, v.head_w, v.head_b)
    }

    fn embed(&self, tape: &mut Tape, v: &Vars, x: Var) -> Result<Var, NetError> {
        Self::affine(tape, x, v.embed_w, v.embed_b)
    }

    /// Logits of every window in `plan`, full and short windows each in one stacked pass.
    pub fn window_logits(
        &self,
        tape: &mut Tape,
        batch: &[&FeatureSequence],
        plan: &WindowPlan,
    ) -> Result<WindowOutputs, NetError> {
        if plan.order > self.config.order {
            return Err(NetError::WindowTooLong {
                len: plan.order + 1,
                order: self.config.order,
            });
        }
        let v = self.bind(tape);
        let b = batch.len();
        let (x, horizon) = frames_constant(tape, batch, self.config.input_dim)?;
        if horizon != plan.horizon {
            return Err(NetError::Horizon {
                expected: plan.horizon,
                got: horizon,
            });
        }
        let emb = self.embed(tape, &v, x)?;
        let split = |tape: &mut Tape, logits: Var, n: usize| -> Result<Vec<Var>, NetError> {
            (0..n).map(|w| Ok(tape.slice_axis(logits, 0, w * b, b)?)).collect()
        };
        let logits = self.encode(tape, &v, emb, b, horizon, &plan.full)?;
        let full = split(tape, logits, plan.full.len())?;
        let short = if plan.short.is_empty() {
            Vec::new()
        } else {
            let logits = self.encode(tape, &v, emb, b, horizon, &plan.short)?;
            split(tape, logits, plan.short.len())?
        };
        let mut prefix = Vec::with_capacity(plan.prefix.len());
        for r in &plan.prefix {
            prefix.push(self.encode(tape, &v, emb, b, horizon, std::slice::from_ref(r))?);
        }
        Ok(WindowOutputs { prefix, full, short })
    }

    /// Posterior for a single window of at most N+1 frames.
    pub fn posterior(&self, window: &[f64]) -> Result<Vec<f64>, NetError> {
        let d = self.config.input_dim;
        if window.is_empty() || !window.len().is_multiple_of(d) {
            return Err(NetError::Empty);
        }
        let len = window.len() / d;
        let mut tape = Tape::new();
        let v = self.bind(&mut tape);
        let x = tape.constant(DenseArray::new(vec![len, d], window.to_vec())?);
        let emb = self.embed(&mut tape, &v, x)?;
        let logits = self.encode(&mut tape, &v, emb, 1, len, &[0..len])?;
        Ok(softmax_row(tape.value(logits).values()))
    }

    /// Token outputs of the last block for one window, `[len (+1), D]`.
    pub fn tokens(&self, window: &[f64]) -> Result<DenseArray, NetError> {
        let d = self.config.input_dim;
        if window.is_empty() || !window.len().is_multiple_of(d) {
            return Err(NetError::Empty);
        }
        let len = window.len() / d;
        let dm = self.config.model_dim;
        let mut tape = Tape::new();
        let v = self.bind(&mut tape);
        let x = tape.constant(DenseArray::new(vec![len, d], window.to_vec())?);
        let emb = self.embed(&mut tape, &v, x)?;
        let x = tape.reshape(emb, vec![1, len, dm])?;
        let pe = tape.constant(sinusoidal_encoding(len, dm));
        let mut x = tape.add(x, pe)?;
        if let Some(cls) = v.cls {
            let c = tape.reshape(cls, vec![1, 1, dm])?;
            x = tape.concat(&[c, x], 1)?;
        }
        for b in &v.blocks {
            x = self.block(&mut tape, b, x)?;
        }
        let out = tape.value(x).clone();
        let rows = out.shape()[1];
        Ok(out.reshaped(vec![rows, dm])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;

    fn tiny(pooling: PoolingKind, layernorm: bool) -> TransformerConfig {
        TransformerConfig {
            model_dim: 8,
            heads: 2,
            ff_dim: 12,
            layernorm,
            ..TransformerConfig::new(3, 2, 3, pooling)
        }
    }

    #[test]
    fn posterior_is_a_distribution() {
        for pooling in [PoolingKind::Nsp, PoolingKind::Gap, PoolingKind::OneToken] {
            let m = TransformerIntegrator::new(tiny(pooling, true), 2).unwrap();
            for len in 1..=4 {
                let w: Vec<f64> = (0..len * 3).map(|i| (i as f64).cos()).collect();
                let p = m.posterior(&w).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_posterior() {
        let mut m = TransformerIntegrator::new(tiny(PoolingKind::Nsp, false), 3).unwrap();
        let id = m.param_id("head.w").unwrap();
        *m.params_mut().get_mut(id) = DenseArray::zeros(&[8, 2]);
        let p = m.posterior(&[1.0; 9]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_long_windows() {
        let m = TransformerIntegrator::new(tiny(PoolingKind::Gap, false), 3).unwrap();
        assert!(matches!(m.posterior(&[0.0; 15]), Err(NetError::WindowTooLong { .. })));
    }

    #[test]
    fn nsp_matches_scaled_gap() {
        let nsp = TransformerIntegrator::new(tiny(PoolingKind::Nsp, false), 7).unwrap();
        let mut gap = nsp.clone();
        gap.config.pooling = PoolingKind::Gap;
        let w: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let tokens = nsp.tokens(&w).unwrap();
        let rows: Vec<Vec<f64>> = tokens.values().chunks(8).map(|c| c.to_vec()).collect();
        let pooled = super::super::nsp_pool(&rows, 3).unwrap();
        // head logits differ only through the 2/4 vs 2/2 scaling of the token sum
        let head = |pooled: &[f64]| -> Vec<f64> {
            let w = nsp.params().get(nsp.ids.head_w).values();
            (0..2).map(|k| (0..8).map(|j| pooled[j] * w[j * 2 + k]).sum()).collect()
        };
        let logits = head(&pooled);
        let expect = softmax_row(&logits);
        let got = nsp.posterior(&w).unwrap();
        for (a, b) in expect.iter().zip(&got) {
            assert!((a - b).abs() < 1e-12);
        }
        let gap_pooled: Vec<f64> = pooled.iter().map(|v| v * 2.0).collect();
        let expect = softmax_row(&head(&gap_pooled));
        for (a, b) in expect.iter().zip(&gap.posterior(&w).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn window_logits_match_single_window_posteriors() {
        let m = TransformerIntegrator::new(tiny(PoolingKind::OneToken, true), 4).unwrap();
        let seqs: Vec<FeatureSequence> = (0..2)
            .map(|i| FeatureSequence::new(i, i, 3, (0..21).map(|j| ((i * 21 + j) as f64 * 0.37).sin()).collect()))
            .collect();
        let batch: Vec<&FeatureSequence> = seqs.iter().collect();
        let plan = WindowPlan::new(7, 3).unwrap().with_prefix();
        let mut tape = Tape::new();
        let out = m.window_logits(&mut tape, &batch, &plan).unwrap();
        let pairs = out
            .prefix
            .iter()
            .zip(&plan.prefix)
            .chain(out.full.iter().zip(&plan.full))
            .chain(out.short.iter().zip(&plan.short));
        for (var, range) in pairs {
            let logits = tape.value(*var).values();
            for (bi, seq) in seqs.iter().enumerate() {
                let expect = m.posterior(seq.window(range.clone())).unwrap();
                let got = softmax_row(&logits[bi * 2..bi * 2 + 2]);
                for (a, b) in expect.iter().zip(&got) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_block_gradients() {
        let m = TransformerIntegrator::new(tiny(PoolingKind::Nsp, true), 11).unwrap();
        let x = DenseArray::from_fn(&[2, 3, 8], |i| (i as f64 * 0.3).sin());
        let params: Vec<DenseArray> = m.ids.blocks[0]
            .ln
            .unwrap()
            .iter()
            .chain([&m.ids.blocks[0].qkv_w, &m.ids.blocks[0].ff1_w])
            .map(|&id| m.params().get(id).clone())
            .collect();
        let err = finite_diff_check(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let ids = &m.ids.blocks[0];
                let mut c = |id| tape.constant(m.params().get(id).clone());
                let bv = BlockVars {
                    qkv_w: p[4],
                    qkv_b: c(ids.qkv_b),
                    out_w: c(ids.out_w),
                    out_b: c(ids.out_b),
                    ff1_w: p[5],
                    ff1_b: c(ids.ff1_b),
                    ff2_w: c(ids.ff2_w),
                    ff2_b: c(ids.ff2_b),
                    ln: Some([p[0], p[1], p[2], p[3]]),
                };
                let y = m.block(tape, &bv, xv).map_err(|e| match e {
                    NetError::Diff(d) => d,
                    other => panic!("{other}"),
                })?;
                let y = tape.tanh(y);
                tape.sum_all(y)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
