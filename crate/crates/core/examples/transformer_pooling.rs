//! Builds the transformer integrator with each pooling mode and shows how
//! the pooled token norm and the posterior react to window length.
use sdrelab::gauss::{make_split, GaussianSpec, Split};
use sdrelab::nets::{nsp_pool, Integrator, IntegratorConfig, PoolingKind, TransformerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GaussianSpec {
        dim: 8,
        horizon: 10,
        per_class: 1,
        ..GaussianSpec::default()
    };
    let seq = &make_split(&spec, Split::Test)?[1];
    let order = 9;

    let tokens = vec![vec![1.0; 4]; 3];
    let full = vec![vec![1.0; 4]; order + 1];
    println!(
        "NSP of 3 unit tokens: {:?}; of {} tokens: {:?}",
        nsp_pool(&tokens, order)?,
        order + 1,
        nsp_pool(&full, order)?
    );

    for pooling in [PoolingKind::Nsp, PoolingKind::Gap, PoolingKind::OneToken] {
        let cfg = IntegratorConfig::Transformer(TransformerConfig {
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            ..TransformerConfig::new(spec.dim, 2, order, pooling)
        });
        let model = Integrator::new(&cfg, 3)?;
        print!("{pooling:?}:");
        for len in [1, 5, 10] {
            let p = model.posterior(seq.window(0..len))?;
            print!("  p(1 | x(1..{len})) = {:.4}", p[1]);
        }
        println!();
    }
    Ok(())
}
