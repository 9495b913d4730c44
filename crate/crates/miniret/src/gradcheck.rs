//! Central-difference gradient verification.
//!
//! The checker is the independent oracle for every differentiable path in
//! the crate: it rebuilds the function from scratch at perturbed points on
//! fresh tapes and never reuses the analytic path it is checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Max over checked coordinates of
/// `|analytic − central-difference| / max(1, |central-difference|)`.
///
/// `f` receives one leaf [`Var`] per input tensor, in order, and must
/// return a scalar-valued root. When `coords_per_input` is `Some(c)`, at
/// most `c` seeded-random coordinates of each input are probed; `None`
/// probes every coordinate.
pub fn grad_check<F>(
    f: &F,
    points: &[Tensor],
    step: f64,
    coords_per_input: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check: step must be > 0"));
    }

    // Analytic gradients at the unperturbed point.
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::invalid("grad_check: function must be scalar-valued"));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = pts.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).scalar_value())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = points.to_vec();

    for (ti, point) in points.iter().enumerate() {
        let n = point.len();
        let coords: Vec<usize> = match coords_per_input {
            Some(c) if c < n => sample(&mut rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        for ci in coords {
            let orig = point.data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = orig - step;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = orig;

            let cd = (fp - fm) / (2.0 * step);
            let an = analytic[ti].data()[ci];
            if !cd.is_finite() || !an.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: input {} coordinate {} (analytic {}, central diff {})",
                    ti, ci, an, cd
                )));
            }
            let err = (an - cd).abs() / cd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
