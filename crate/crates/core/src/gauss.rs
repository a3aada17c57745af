//! Sequential Gaussian datasets with analytic log-likelihood ratios.
//!
//! Class `k` draws i.i.d. frames from `N(mu_k, I)` where `mu_k` has the
//! offset `a` on coordinate `k` and zeros elsewhere. Because covariances are
//! shared, the per-frame LLR is linear in the frame:
//! `(mu_k - mu_l) . x - (|mu_k|^2 - |mu_l|^2) / 2`.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tandem::{log_sum_exp, LlrTrajectory, TandemError};

#[derive(Debug, Error)]
pub enum GaussError {
    #[error("invalid gaussian spec: {0}")]
    InvalidSpec(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tandem(#[from] TandemError),
}

/// Which split a sequence belongs to; each split draws from its own seed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Val => 0x7661_6c00_0000_0002,
            Split::Test => 0x7465_7374_0000_0003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianSpec {
    /// Frame dimension `d_feat`.
    pub dim: usize,
    /// Mean offset `a`.
    pub offset: f64,
    pub num_classes: usize,
    /// Sequence length `T`.
    pub horizon: usize,
    /// Sequences per class.
    pub per_class: usize,
    pub seed: u64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            dim: 128,
            offset: 2.0,
            num_classes: 2,
            horizon: 50,
            per_class: 4000,
            seed: 0,
        }
    }
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<(), GaussError> {
        let bad = |msg: String| Err(GaussError::InvalidSpec(msg));
        if !(self.offset > 0.0 && self.offset.is_finite()) {
            return bad(format!("offset must be positive, got {}", self.offset));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.dim < self.num_classes {
            return bad(format!("dimension {} cannot hold {} class means", self.dim, self.num_classes));
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        Ok(())
    }

    /// `mu_k`: offset on coordinate `k`.
    pub fn mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        m[class] = self.offset;
        m
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes).map(|k| self.mean(k)).collect()
    }

    pub fn total(&self) -> usize {
        self.per_class * self.num_classes
    }

    /// Per-class log-density of one frame up to the shared `-|x|^2/2` term.
    fn frame_scores(&self, frame: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            // mu_k . x - |mu_k|^2 / 2 with the single nonzero coordinate of mu_k
            *o = self.offset * frame[k] - 0.5 * self.offset * self.offset;
        }
    }

    /// Per-frame `lambda_kl` contribution.
    pub fn frame_llr(&self, frame: &[f64], k: usize, l: usize) -> f64 {
        let mu_k = self.mean(k);
        let mu_l = self.mean(l);
        let dot: f64 = mu_k.iter().zip(&mu_l).zip(frame).map(|((a, b), x)| (a - b) * x).sum();
        let nk: f64 = mu_k.iter().map(|v| v * v).sum();
        let nl: f64 = mu_l.iter().map(|v| v * v).sum();
        dot - 0.5 * (nk - nl)
    }
}

/// One time series with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: usize,
    pub label: usize,
    dim: usize,
    frames: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(id: usize, label: usize, dim: usize, frames: Vec<f64>) -> Self {
        assert!(dim > 0 && frames.len().is_multiple_of(dim), "frames must be a whole number of rows");
        Self { id, label, dim, frames }
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Frame at 0-based position `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    /// Frames `range` as a flat row-major slice.
    pub fn window(&self, range: std::ops::Range<usize>) -> &[f64] {
        &self.frames[range.start * self.dim..range.end * self.dim]
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draws by the Box-Muller transform.
pub struct BoxMuller<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> BoxMuller<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        self.spare = Some(r * (TAU * u2).sin());
        r * (TAU * u2).cos()
    }
}

/// Generates one split. Sequence `i` has label `i % K` and its own RNG
/// stream, so any sequence can be regenerated independently.
pub fn make_split(spec: &GaussianSpec, split: Split) -> Result<Vec<FeatureSequence>, GaussError> {
    spec.validate()?;
    let base = splitmix64(spec.seed ^ split.stream());
    Ok((0..spec.total())
        .map(|i| {
            let label = i % spec.num_classes;
            let mut rng = ChaCha8Rng::seed_from_u64(base);
            rng.set_stream(i as u64);
            let mut normal = BoxMuller::new(rng);
            let mut frames = Vec::with_capacity(spec.horizon * spec.dim);
            for _ in 0..spec.horizon {
                for j in 0..spec.dim {
                    let mu = if j == label { spec.offset } else { 0.0 };
                    frames.push(mu + normal.sample());
                }
            }
            FeatureSequence::new(i, label, spec.dim, frames)
        })
        .collect())
}

/// The training split of `spec`.
pub fn make_dataset(spec: &GaussianSpec) -> Result<Vec<FeatureSequence>, GaussError> {
    make_split(spec, Split::Train)
}

/// Ground-truth `lambda_kl(t)` for `t` in `[1, T]`.
pub fn true_llr(seq: &FeatureSequence, spec: &GaussianSpec) -> Result<LlrTrajectory, GaussError> {
    let k = spec.num_classes;
    let mut acc = vec![0.0; k];
    let mut step = vec![0.0; k];
    let mut scores = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        spec.frame_scores(seq.frame(t), &mut step);
        for c in 0..k {
            acc[c] += step[c];
        }
        scores.push(acc.clone());
    }
    Ok(LlrTrajectory::from_scores(0, seq.len(), 1, &scores)?)
}

/// Bayes posterior of the classes given a window of frames.
pub fn true_posterior(window: &[f64], spec: &GaussianSpec, priors: &[f64]) -> Vec<f64> {
    let log_post = true_log_posterior(window, spec, priors);
    log_post.iter().map(|v| v.exp()).collect()
}

/// Log of [`true_posterior`], normalized by a stable log-sum-exp.
pub fn true_log_posterior(window: &[f64], spec: &GaussianSpec, priors: &[f64]) -> Vec<f64> {
    assert!(!window.is_empty(), "posterior of an empty window");
    let k = spec.num_classes;
    let mut logits: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
    let mut step = vec![0.0; k];
    for frame in window.chunks(spec.dim) {
        spec.frame_scores(frame, &mut step);
        for c in 0..k {
            logits[c] += step[c];
        }
    }
    let lse = log_sum_exp(&logits);
    logits.iter().map(|v| v - lse).collect()
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    spec: GaussianSpec,
    split: Split,
    count: usize,
    horizon: usize,
    dim: usize,
    labels: Vec<usize>,
}

const DATASET_MAGIC: &[u8; 8] = b"SDREDATA";

/// Writes a split: magic, u64 LE header length, JSON header, LE f64 frames.
pub fn dump_dataset<W: Write>(
    mut w: W,
    spec: &GaussianSpec,
    split: Split,
    data: &[FeatureSequence],
) -> Result<(), GaussError> {
    let header = DatasetHeader {
        spec: spec.clone(),
        split,
        count: data.len(),
        horizon: spec.horizon,
        dim: spec.dim,
        labels: data.iter().map(|s| s.label).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for seq in data {
        if seq.len() != spec.horizon || seq.dim() != spec.dim {
            return Err(GaussError::Format(format!("sequence {} does not match the spec shape", seq.id)));
        }
        for v in seq.frames() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a split written by [`dump_dataset`], validating shape and count.
pub fn load_dataset<R: Read>(mut r: R) -> Result<(GaussianSpec, Split, Vec<FeatureSequence>), GaussError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(GaussError::Format("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: DatasetHeader = serde_json::from_slice(&json)?;
    if header.labels.len() != header.count || header.horizon != header.spec.horizon || header.dim != header.spec.dim {
        return Err(GaussError::Format("header fields disagree".into()));
    }
    let per_seq = header.horizon * header.dim;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != header.count * per_seq * 8 {
        return Err(GaussError::Format(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            header.count * per_seq * 8
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let data = header
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| FeatureSequence::new(i, label, header.dim, values[i * per_seq..(i + 1) * per_seq].to_vec()))
        .collect();
    Ok((header.spec, header.split, data))
}
