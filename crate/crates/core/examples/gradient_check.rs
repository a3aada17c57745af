//! Records a small computation on the tape and checks reverse-mode
//! gradients against central differences.
use sdrelab::diffcore::{finite_diff_check, DenseArray, ParamId, Tape};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = DenseArray::new(vec![3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7])?;
    let x = DenseArray::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.param(ParamId(0), &w);
    let h = tape.matmul(xv, wv)?;
    let y = tape.tanh(h);
    let s = tape.logsumexp(y)?;
    let loss = tape.sum_axis(s, 0)?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).values()[0]);
    println!("dloss/dw = {:?}", grads.get(ParamId(0)).map(|g| g.values().to_vec()));

    let err = finite_diff_check(
        |tape, p| {
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, p[0])?;
            let y = tape.tanh(h);
            let s = tape.logsumexp(y)?;
            tape.sum_axis(s, 0)
        },
        &[w],
        1e-5,
    )?;
    println!("max relative error vs central differences: {err:.2e}");
    Ok(())
}
