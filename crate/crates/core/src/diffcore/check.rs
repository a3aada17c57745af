use super::{DenseArray, DiffError, ParamId, Tape, Var};

/// Compares reverse-mode gradients of `f` with central finite differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |numeric|)` over every
/// coordinate of every parameter. `f` receives a fresh tape with `params`
/// registered (as `ParamId(0..)`) and must return a scalar.
pub fn finite_diff_check<F>(f: F, params: &[DenseArray], eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(DiffError::InvalidAttr {
            op: "finite_diff_check",
            detail: format!("eps must lie in (0, 1e-2], got {eps}"),
        });
    }
    let eval = |values: &[DenseArray]| -> Result<(Tape, Var), DiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, out))
    };
    let scalar = |tape: &Tape, v: Var| -> Result<f64, DiffError> {
        tape.value(v)
            .item()
            .ok_or_else(|| DiffError::NonScalarLoss(tape.shape(v).to_vec()))
    };

    let (tape, out) = eval(params)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(ParamId(pi)).expect("registered parameter");
        for j in 0..p.len() {
            let x = p.values()[j];
            probe[pi].values_mut()[j] = x + eps;
            let (t, o) = eval(&probe)?;
            let up = scalar(&t, o)?;
            probe[pi].values_mut()[j] = x - eps;
            let (t, o) = eval(&probe)?;
            let down = scalar(&t, o)?;
            probe[pi].values_mut()[j] = x;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic.values()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
