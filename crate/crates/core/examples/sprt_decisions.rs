//! Runs the SPRT on analytic LLR trajectories, cross-checks it against a
//! two-boundary Wald test and measures the empirical error at a threshold.
use sdrelab::gauss::{make_split, true_llr, GaussianSpec, Split};
use sdrelab::sprt::{sprt_run, wald_binary, wald_error_probe, ThresholdMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GaussianSpec {
        dim: 4,
        offset: 0.5,
        horizon: 100,
        per_class: 1000,
        ..GaussianSpec::default()
    };
    let data = make_split(&spec, Split::Test)?;
    let llrs = data.iter().map(|s| true_llr(s, &spec)).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();

    let threshold = 3.0;
    let thresholds = ThresholdMatrix::scalar(2, threshold)?;
    let mut agree = 0;
    for llr in &llrs {
        let series: Vec<f64> = llr.times().map(|t| llr.get(t, 1, 0)).collect();
        let wald = wald_binary(&series, llr.start(), threshold, threshold);
        let sprt = sprt_run(llr, &thresholds)?;
        agree += (wald.map(|w| (w.decided_class, w.stopping_time)) == Some((sprt.decided_class, sprt.stopping_time))
            || (wald.is_none() && sprt.forced)) as usize;
    }
    println!("SPRT and Wald agree on {agree}/{} trajectories", llrs.len());

    let probe = wald_error_probe(threshold, &llrs, &labels)?;
    println!(
        "threshold {threshold}: error {:.4} ± {:.4} (bound e^-a = {:.4}), {} forced",
        probe.error_rate,
        probe.binomial_sem(),
        (-threshold).exp(),
        probe.forced
    );
    Ok(())
}
