use std::path::PathBuf;

use super::{ExperimentConfig, HarnessError, ModelKind, ModelSizes, Variant};
use crate::gauss::GaussianSpec;
use crate::optim::TrainConfig;

pub const PRESETS: [&str; 9] = [
    "oracle-sanity",
    "fig1-trajectories",
    "fig2-weightdecay",
    "fig2-layernorm",
    "fig2-datasize",
    "fig2-pooling",
    "fig2-loss",
    "appendix-3class",
    "sat-gaussian",
];

const PROPOSED: [ModelKind; 2] = [ModelKind::B2bsqrtTandem, ModelKind::TandemformerNsp];

const ALL_TRAINED: [ModelKind; 6] = [
    ModelKind::B2bsqrtTandem,
    ModelKind::TanhTandem,
    ModelKind::TandemformerNsp,
    ModelKind::TandemformerGap,
    ModelKind::TandemformerOnetoken,
    ModelKind::OblivionLsel,
];

/// Shared desk-scale protocol: d=128, T=20, N=19, 8K/1K/1K sequences.
fn desk() -> ExperimentConfig {
    ExperimentConfig {
        gaussian: GaussianSpec {
            dim: 128,
            offset: 2.0,
            num_classes: 2,
            horizon: 20,
            per_class: 4000,
            seed: 0,
        },
        val_per_class: 500,
        test_per_class: 500,
        order: 19,
        prefix_windows: true,
        model: ModelSizes {
            hidden: 32,
            model_dim: 32,
            heads: 2,
            ff_dim: 64,
            ..ModelSizes::default()
        },
        train: TrainConfig {
            lr: 3e-3,
            epochs: 8,
            ..TrainConfig::default()
        },
        seeds: vec![0, 1, 2, 3, 4],
        ..ExperimentConfig::default()
    }
}

fn offsets() -> Vec<Variant> {
    vec![Variant::with("a=1", "gaussian.offset", 1.0), Variant::with("a=2", "gaussian.offset", 2.0)]
}

/// Named experiment preset; output goes to `runs/<name>`.
pub fn preset(name: &str) -> Result<ExperimentConfig, HarnessError> {
    let base = desk();
    let mut c = match name {
        "oracle-sanity" => ExperimentConfig {
            models: vec![ModelKind::Oracle],
            gaussian: GaussianSpec {
                horizon: 50,
                per_class: 1,
                ..base.gaussian.clone()
            },
            val_per_class: 1,
            test_per_class: 50,
            order: 0,
            seeds: vec![0],
            variants: offsets(),
            ..base
        },
        "fig1-trajectories" => ExperimentConfig {
            models: vec![ModelKind::B2bsqrtTandem, ModelKind::TanhTandem, ModelKind::TandemformerNsp],
            variants: {
                let mut v = offsets();
                let mut short = Variant::with("a=2,N=4", "gaussian.offset", 2.0);
                short.overrides.insert("order".into(), 4.into());
                v.push(short);
                v
            },
            ..base
        },
        "fig2-weightdecay" => ExperimentConfig {
            models: ALL_TRAINED.to_vec(),
            variants: [0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1]
                .iter()
                .map(|&wd| Variant::with(format!("wd={wd:e}"), "train.weight_decay", wd))
                .collect(),
            ..base
        },
        "fig2-layernorm" => ExperimentConfig {
            models: ALL_TRAINED[..5].to_vec(),
            variants: vec![
                Variant::with("plain", "model.layernorm", false),
                Variant::with("layernorm", "model.layernorm", true),
            ],
            ..base
        },
        "fig2-datasize" => ExperimentConfig {
            models: vec![ModelKind::TanhTandem],
            train: TrainConfig {
                max_steps: Some(base.train.epochs * 80),
                ..base.train.clone()
            },
            variants: [500usize, 4000, 32000]
                .iter()
                .map(|&n| Variant::with(format!("train={}", 2 * n), "gaussian.per_class", n))
                .collect(),
            ..base
        },
        "fig2-pooling" => ExperimentConfig {
            models: vec![
                ModelKind::B2bsqrtTandem,
                ModelKind::TanhTandem,
                ModelKind::TandemformerNsp,
                ModelKind::TandemformerGap,
                ModelKind::TandemformerOnetoken,
            ],
            ..base
        },
        "fig2-loss" => ExperimentConfig {
            models: ALL_TRAINED.to_vec(),
            order: 4,
            variants: vec![
                Variant::with("lsel", "train.llre_ratio", 1.0),
                Variant::with("lsel+mce", "train.llre_ratio", 0.5),
            ],
            ..base
        },
        "appendix-3class" => ExperimentConfig {
            models: PROPOSED.to_vec(),
            gaussian: GaussianSpec {
                num_classes: 3,
                per_class: 2667,
                ..base.gaussian.clone()
            },
            val_per_class: 333,
            test_per_class: 333,
            ..base
        },
        "sat-gaussian" => ExperimentConfig {
            models: vec![ModelKind::B2bsqrtTandem, ModelKind::TandemformerNsp, ModelKind::Oracle],
            sat_thresholds: (0..=20).map(|i| i as f64 * 2.0).collect(),
            ..base
        },
        other => return Err(HarnessError::UnknownPreset(other.to_string())),
    };
    c.preset = name.to_string();
    c.out_dir = PathBuf::from("runs").join(name);
    c.validate()?;
    Ok(c)
}
