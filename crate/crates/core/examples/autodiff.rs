//! Reverse-mode gradients on a small expression, checked against finite
//! differences.

use vcr_joint::autodiff::{grad_check, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(
        vec![2, 3],
        vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7],
    )?);
    let w = tape.leaf(Tensor::new(
        vec![3, 2],
        vec![1.0, 0.2, -0.4, 0.9, 0.3, -1.1],
    )?);

    // loss = mean(tanh(x·w))
    let y = tape.matmul(x, w)?;
    let y = tape.tanh(y)?;
    let loss = tape.mean(y)?;
    let grads = tape.backward(loss)?;

    println!("loss      = {:.6}", tape.value(loss).item());
    println!("dloss/dx  = {:?}", grads.wrt(&tape, x).data());
    println!("dloss/dw  = {:?}", grads.wrt(&tape, w).data());

    let w0 = tape.value(w).clone();
    let err = grad_check(
        |t, x| {
            let w = t.constant(w0.clone());
            let y = t.matmul(x, w)?;
            let y = t.tanh(y)?;
            t.mean(y)
        },
        tape.value(x),
        1e-5,
    )?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}
