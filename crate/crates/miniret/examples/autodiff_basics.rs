//! Reverse-mode autodiff on the tape: build a small expression, read
//! gradients back, and verify them against finite differences.

use miniret::error::Result;
use miniret::gradcheck::grad_check;
use miniret::tape::{Tape, Var};
use miniret::tensor::Tensor;

fn main() -> Result<()> {
    // f(a, b) = mean(silu(a @ b) * 0.5), exercising a few tape ops
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let prod = tape.matmul(vars[0], vars[1])?;
        let squashed = tape.silu(prod);
        let scaled = tape.scale(squashed, 0.5);
        Ok(tape.mean_all(scaled))
    };

    let a = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.7, 0.2, 0.9, -0.3])?;
    let b = Tensor::matrix(3, 2, vec![0.5, -0.1, 0.3, 0.8, -0.6, 0.2])?;

    // forward + backward
    let mut tape = Tape::new();
    let va = tape.leaf(a.clone(), true);
    let vb = tape.leaf(b.clone(), true);
    let out = f(&mut tape, &[va, vb])?;
    println!("value = {:.6}", tape.value(out).scalar_value());
    let grads = tape.backward(out)?;
    println!("df/da = {:?}", grads.wrt(va).unwrap().data());
    println!("df/db = {:?}", grads.wrt(vb).unwrap().data());

    // the same function checked against central finite differences
    let max_rel_err = grad_check(&f, &[a, b], 1e-6, None, 0)?;
    println!("finite-difference max relative error = {max_rel_err:.3e}");
    assert!(max_rel_err < 1e-8);
    Ok(())
}
