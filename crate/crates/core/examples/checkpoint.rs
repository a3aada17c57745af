//! Saves an integrator to the binary checkpoint format and restores it.
use sdrelab::nets::{save_checkpoint, load_checkpoint, ActivationKind, Integrator, IntegratorConfig, LstmConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = IntegratorConfig::Lstm(LstmConfig::new(6, 8, 3, ActivationKind::Tanh));
    let model = Integrator::new(&cfg, 42)?;
    let mut bytes = Vec::new();
    save_checkpoint(&mut bytes, &model, 42)?;
    let (restored, seed) = load_checkpoint(bytes.as_slice())?;
    let window: Vec<f64> = (0..18).map(|i| (i as f64).cos()).collect();
    println!("{} bytes, seed {seed}", bytes.len());
    println!("original posterior {:?}", model.posterior(&window)?);
    println!("restored posterior {:?}", restored.posterior(&window)?);
    Ok(())
}
