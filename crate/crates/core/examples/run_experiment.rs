//! Runs a miniature experiment grid (two models, two offsets, two seeds)
//! through the harness and prints the summary.
use sdrelab::gauss::GaussianSpec;
use sdrelab::harness::{run_experiment, ExperimentConfig, ModelKind, ModelSizes, Variant};
use sdrelab::optim::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("sdrelab-example-run");
    let config = ExperimentConfig {
        models: vec![ModelKind::B2bsqrtTandem, ModelKind::Oracle],
        gaussian: GaussianSpec {
            dim: 8,
            horizon: 8,
            per_class: 200,
            ..GaussianSpec::default()
        },
        val_per_class: 50,
        test_per_class: 50,
        order: 3,
        model: ModelSizes {
            hidden: 8,
            ..ModelSizes::default()
        },
        train: TrainConfig {
            epochs: 20,
            batch_size: 50,
            lr: 1e-2,
            ..TrainConfig::default()
        },
        seeds: vec![0, 1],
        variants: vec![
            Variant::with("a=1", "gaussian.offset", 1.0),
            Variant::with("a=2", "gaussian.offset", 2.0),
        ],
        out_dir: out.clone(),
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&config)?;
    for e in &report.summary.entries {
        println!(
            "{:4} {:16} final-t MAE {:8.4} ± {:.4}  zero predictor {:8.4}",
            e.variant, e.model, e.mae_final_t.mean, e.mae_final_t.sem, e.zero_predictor_mae_final_t.mean
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
