//! Feeds exact Bayes posteriors through the tandem formula and compares
//! the result to the analytic LLR of the Gaussian benchmark.
use sdrelab::gauss::{make_split, true_llr, true_posterior, GaussianSpec, Split};
use sdrelab::tandem::{tandem_llr, PosteriorTrajectoryPair, WindowPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GaussianSpec {
        offset: 2.0,
        horizon: 20,
        per_class: 5,
        ..GaussianSpec::default()
    };
    let priors = vec![0.5, 0.5];
    let plan = WindowPlan::new(spec.horizon, 0)?;
    for seq in make_split(&spec, Split::Test)?.iter().take(4) {
        let full = plan
            .full
            .iter()
            .map(|r| true_posterior(seq.window(r.clone()), &spec, &priors))
            .collect();
        let pair = PosteriorTrajectoryPair::from_probabilities(&plan, vec![], full, vec![], priors.clone())?;
        let est = tandem_llr(&pair)?;
        let truth = true_llr(seq, &spec)?;
        let worst = est
            .times()
            .map(|t| (est.get(t, 1, 0) - truth.get(t, 1, 0)).abs())
            .fold(0.0, f64::max);
        println!(
            "sequence {} (label {}): lambda_10(T) = {:8.3}, max |tandem - analytic| = {worst:.2e}",
            seq.id,
            seq.label,
            truth.get(spec.horizon, 1, 0)
        );
    }
    Ok(())
}
