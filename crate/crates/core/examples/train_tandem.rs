//! Trains a small LSTM tandem estimator with the LSEL loss and compares
//! its final-t LLR error with the zero predictor.
use sdrelab::gauss::{make_split, true_llr, GaussianSpec, Split};
use sdrelab::nets::{ActivationKind, Integrator, IntegratorConfig, LstmConfig};
use sdrelab::optim::{final_mae, train, Estimator, LlrFormula, TrainConfig};
use sdrelab::tandem::WindowPlan;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GaussianSpec {
        dim: 16,
        offset: 0.5,
        horizon: 10,
        per_class: 500,
        ..GaussianSpec::default()
    };
    let train_set = make_split(&spec, Split::Train)?;
    let val_spec = GaussianSpec { per_class: 100, ..spec.clone() };
    let val_set = make_split(&val_spec, Split::Val)?;
    let truth = |d: &[_]| d.iter().map(|s| true_llr(s, &spec)).collect::<Result<Vec<_>, _>>();
    let (train_truth, val_truth) = (truth(&train_set)?, truth(&val_set)?);

    let net = IntegratorConfig::Lstm(LstmConfig::new(spec.dim, 16, 2, ActivationKind::b2bsqrt()));
    let plan = WindowPlan::new(spec.horizon, 3)?.with_prefix();
    let estimator = Estimator::new(Integrator::new(&net, 7)?, plan, LlrFormula::Tandem);
    let config = TrainConfig {
        lr: 3e-3,
        epochs: 10,
        batch_size: 50,
        ..TrainConfig::default()
    };
    let outcome = train(estimator, (&train_set, &train_truth), (&val_set, &val_truth), &config, 7)?;
    for row in outcome.log.iter().filter(|r| r.split == "val") {
        println!("epoch {:2}: val LSEL {:.4}, final-t MAE {:.4}", row.epoch, row.lsel, row.mae_final_t);
    }
    let est = outcome.estimator.estimate(&val_set)?;
    let zero: f64 = val_truth.iter().map(|t| t.get(spec.horizon, 1, 0).abs()).sum::<f64>() / val_truth.len() as f64;
    println!(
        "best epoch {}: final-t MAE {:.4} vs zero predictor {zero:.4}",
        outcome.best_epoch,
        final_mae(&est, &val_truth)?
    );
    Ok(())
}
