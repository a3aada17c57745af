//! Sweeps SPRT thresholds over analytic LLRs and prints the
//! speed-accuracy tradeoff curve.
use sdrelab::gauss::{make_split, true_llr, GaussianSpec, Split};
use sdrelab::sprt::sat_points;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GaussianSpec {
        dim: 8,
        offset: 0.3,
        horizon: 50,
        per_class: 500,
        ..GaussianSpec::default()
    };
    let data = make_split(&spec, Split::Test)?;
    let llrs = data.iter().map(|s| true_llr(s, &spec)).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let sweep: Vec<f64> = (0..=10).map(|i| i as f64 * 0.5).collect();
    println!("threshold  mean_hitting_time  per_class_error");
    for p in sat_points(&llrs, &labels, &sweep)? {
        println!("{:9.2}  {:17.3}  {:15.4}", p.threshold, p.mean_hitting_time, p.mean_per_class_error);
    }
    Ok(())
}
