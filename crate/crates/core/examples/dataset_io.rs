//! Generates a split, writes it in the binary dataset format and reads it back.
use sdrelab::gauss::{dump_dataset, load_dataset, make_split, GaussianSpec, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GaussianSpec {
        dim: 16,
        horizon: 10,
        per_class: 50,
        num_classes: 3,
        ..GaussianSpec::default()
    };
    let data = make_split(&spec, Split::Train)?;
    let mut bytes = Vec::new();
    dump_dataset(&mut bytes, &spec, Split::Train, &data)?;
    let (loaded_spec, split, loaded) = load_dataset(bytes.as_slice())?;
    println!(
        "{} sequences of {}x{} ({:?}), {} bytes; roundtrip identical: {}",
        loaded.len(),
        loaded_spec.horizon,
        loaded_spec.dim,
        split,
        bytes.len(),
        loaded == data
    );
    Ok(())
}
