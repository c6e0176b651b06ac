//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Norm below which a gradient counts as identically zero.
pub const ZERO_GRAD_NORM: f64 = 1e-7;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`.
///
/// When both norms are below [`ZERO_GRAD_NORM`] (a parameter the output is
/// invariant to, such as a key bias under softmax) the absolute difference is
/// returned instead, since the ratio of two rounding residues carries no
/// information.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    let denom = na.max(nb);
    if denom < ZERO_GRAD_NORM {
        diff
    } else {
        diff / denom
    }
}

/// Compares analytic and numeric gradients of `Σ f(inputs) ⊙ R` for a fixed
/// random projection `R`. Returns one relative error per input.
pub fn check<F>(inputs: &[Tensor], eps: f64, seed: u64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], grad: bool| -> Result<(Var, Tape, Vec<Var>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                if grad {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let out = f(&vars)?;
        Ok((out, tape, vars))
    };

    let (probe, _, _) = eval(inputs, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Tensor::randn(probe.shape(), 1.0, &mut rng);
    drop(probe);

    let (out, tape, vars) = eval(inputs, true)?;
    let r = tape.constant(proj.clone());
    let loss = out.mul(&r)?.sum();
    let grads = tape.backward(&loss)?;

    let scalar = |vals: &[Tensor]| -> Result<f64> {
        let (out, _, _) = eval(vals, false)?;
        Ok(out.value().dot(&proj))
    };

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(var);
        let mut numeric = Tensor::zeros(inputs[idx].shape());
        for k in 0..inputs[idx].numel() {
            let orig = work[idx].data()[k];
            work[idx].data_mut()[k] = orig + eps;
            let up = scalar(&work)?;
            work[idx].data_mut()[k] = orig - eps;
            let down = scalar(&work)?;
            work[idx].data_mut()[k] = orig;
            numeric.data_mut()[k] = (up - down) / (2.0 * eps);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}
