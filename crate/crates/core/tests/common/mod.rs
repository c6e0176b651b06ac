#![allow(dead_code)]

use pdpcrn::nn::{Mode, ParamStore, Session};
use pdpcrn::tensor::gradcheck::check;
use pdpcrn::{Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Finite-difference relative errors for the input and every parameter.
pub fn grads_with_params<F>(store: &ParamStore, mode: Mode, x: Tensor, f: F) -> Vec<f64>
where
    F: Fn(&Session, &Var) -> Result<Var>,
{
    let names: Vec<String> = store.params().map(|e| e.name.clone()).collect();
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
    check(&inputs, 1e-5, 5, |v| {
        let s = Session::on_tape(v[0].tape().clone(), store, mode);
        for (n, var) in names.iter().zip(&v[1..]) {
            s.bind(n, var.clone())?;
        }
        f(&s, &v[0])
    })
    .unwrap()
}

pub fn eval(store: &ParamStore, x: &Tensor, f: impl Fn(&Session, &Var) -> Result<Var>) -> Tensor {
    let s = Session::new(store, Mode::Eval);
    let xv = s.input(x.clone());
    f(&s, &xv).unwrap().value().clone()
}

/// Largest change at frames `< t` and at frames `≥ t` along `axis`.
pub fn split_change(a: &Tensor, b: &Tensor, axis: usize, t: usize) -> (f64, f64) {
    let shape = a.shape();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let (mut past, mut future) = (0.0f64, 0.0f64);
    for (k, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let frame = (k / inner) % len;
        let d = (x - y).abs();
        if frame < t {
            past = past.max(d);
        } else {
            future = future.max(d);
        }
    }
    (past, future)
}

/// Replaces every frame `≥ t` along `axis` with fresh noise.
pub fn perturb_from(x: &Tensor, axis: usize, t: usize, seed: u64) -> Tensor {
    let noise = Tensor::randn(x.shape(), 1.0, &mut rng(seed));
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let len = x.shape()[axis];
    let mut y = x.clone();
    for (k, v) in y.data_mut().iter_mut().enumerate() {
        if (k / inner) % len >= t {
            *v = noise.data()[k];
        }
    }
    y
}

/// Runs `trials` future-perturbation checks; returns the worst past-frame
/// change. Panics if a perturbation leaves the future untouched.
pub fn causality_trials(
    x_shape: &[usize],
    axis: usize,
    trials: usize,
    seed: u64,
    run: impl Fn(&Tensor) -> Tensor,
) -> f64 {
    let mut worst = 0.0f64;
    let len = x_shape[axis];
    for trial in 0..trials {
        let mut r = rng(seed + trial as u64);
        let x = Tensor::randn(x_shape, 1.0, &mut r);
        let t = 1 + (trial % (len - 1));
        let y = perturb_from(&x, axis, t, seed ^ (0x9e37 + trial as u64));
        let (a, b) = (run(&x), run(&y));
        let (past, future) = split_change(&a, &b, axis, t);
        assert!(
            future > 0.0,
            "trial {trial}: perturbation at frame {t} had no effect"
        );
        worst = worst.max(past);
    }
    worst
}
