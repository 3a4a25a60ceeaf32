//! Randomised finite-difference checks for every differentiable op.
//!
//! Each trial draws fresh small inputs, reduces the op output to a scalar via
//! a random projection `sum(op(x) * r)` and compares the backward pass with
//! central differences.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use super::{check_gradients, GradCheckReport, DEFAULT_STEP};
use crate::error::Result;
use crate::tensor::{numel, Tensor};

type Trial = fn(&mut dyn RngCore) -> Result<GradCheckReport>;

fn randn(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<f64> {
    let data = (0..numel(shape)).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::param(shape, data).expect("shape")
}

/// Inputs bounded away from zero so kinked ops are probed on smooth pieces.
fn randn_off_zero(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<f64> {
    let data = (0..numel(shape))
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            if v.abs() < 0.05 {
                v.signum() * 0.05 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::param(shape, data).expect("shape")
}

fn project(y: &Tensor<f64>, rng: &mut dyn RngCore) -> impl Fn(&Tensor<f64>) -> Result<Tensor<f64>> {
    let r = Tensor::from_vec(y.shape(), (0..y.numel()).map(|_| StandardNormal.sample(rng)).collect()).expect("shape");
    move |y: &Tensor<f64>| y.mul(&r).map(|p| p.sum())
}

fn unary_trial(
    rng: &mut dyn RngCore,
    input: fn(&[usize], &mut dyn RngCore) -> Tensor<f64>,
    op: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    let x = input(&shape, rng);
    let proj = project(&op(&x)?, rng);
    check_gradients(std::slice::from_ref(&x), || proj(&op(&x)?), DEFAULT_STEP, None, rng)
}

fn binary_trial(
    rng: &mut dyn RngCore,
    op: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    let (a, b) = (randn(&shape, rng), randn(&shape, rng));
    let proj = project(&op(&a, &b)?, rng);
    check_gradients(&[a.clone(), b.clone()], || proj(&op(&a, &b)?), DEFAULT_STEP, None, rng)
}

fn positive(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<f64> {
    let data = (0..numel(shape)).map(|_| rng.random_range(0.2..3.0)).collect();
    Tensor::param(shape, data).expect("shape")
}

fn spatial(rng: &mut dyn RngCore, even: bool) -> Tensor<f64> {
    let (mut h, mut w) = (rng.random_range(1..5), rng.random_range(1..5));
    if even {
        h *= 2;
        w *= 2;
    }
    randn(&[rng.random_range(1..3), rng.random_range(1..4), h, w], rng)
}

fn conv_trial(rng: &mut dyn RngCore) -> Result<GradCheckReport> {
    let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
    let k = rng.random_range(1..4);
    let stride = rng.random_range(1..3);
    let pad = rng.random_range(0..2);
    let hw = rng.random_range(k.max(2)..7);
    let x = randn(&[rng.random_range(1..3), cin, hw, hw], rng);
    let w = randn(&[cout, cin, k, k], rng);
    let proj = project(&x.conv2d(&w, stride, pad)?, rng);
    check_gradients(&[x.clone(), w.clone()], || proj(&x.conv2d(&w, stride, pad)?), DEFAULT_STEP, None, rng)
}

/// The `[1,2,5,5]` conv case, run through a ReLU and a mean (the composite graph).
fn composite_trial(rng: &mut dyn RngCore) -> Result<GradCheckReport> {
    let x = randn(&[1, 2, 5, 5], rng);
    let w = randn(&[3, 2, 3, 3], rng);
    check_gradients(&[x.clone(), w.clone()], || Ok(x.conv2d(&w, 1, 1)?.relu().mean()), DEFAULT_STEP, None, rng)
}

fn matmul_trial(rng: &mut dyn RngCore) -> Result<GradCheckReport> {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let (a, b) = (randn(&[m, k], rng), randn(&[k, n], rng));
    let proj = project(&a.matmul(&b)?, rng);
    check_gradients(&[a.clone(), b.clone()], || proj(&a.matmul(&b)?), DEFAULT_STEP, None, rng)
}

fn add_bias_trial(rng: &mut dyn RngCore) -> Result<GradCheckReport> {
    let x = spatial(rng, false);
    let b = randn(&[x.shape()[1]], rng);
    let proj = project(&x.add_bias(&b)?, rng);
    check_gradients(&[x.clone(), b.clone()], || proj(&x.add_bias(&b)?), DEFAULT_STEP, None, rng)
}

fn concat_trial(rng: &mut dyn RngCore) -> Result<GradCheckReport> {
    let n = rng.random_range(1..3);
    let a = randn(&[n, rng.random_range(1..4), 2, 3], rng);
    let b = randn(&[n, rng.random_range(1..4), 2, 3], rng);
    let f = |a: &Tensor<f64>, b: &Tensor<f64>| Tensor::concat(&[a.clone(), b.clone()], 1);
    let proj = project(&f(&a, &b)?, rng);
    check_gradients(&[a.clone(), b.clone()], || proj(&f(&a, &b)?), DEFAULT_STEP, None, rng)
}

fn narrow_trial(rng: &mut dyn RngCore) -> Result<GradCheckReport> {
    let x = randn(&[rng.random_range(1..4), rng.random_range(2..8)], rng);
    let len = rng.random_range(1..x.shape()[1]);
    let start = rng.random_range(0..=x.shape()[1] - len);
    let proj = project(&x.narrow(1, start, len)?, rng);
    check_gradients(std::slice::from_ref(&x), || proj(&x.narrow(1, start, len)?), DEFAULT_STEP, None, rng)
}

fn batch_norm_trial(rng: &mut dyn RngCore, fixed: bool) -> Result<GradCheckReport> {
    let x = randn(&[rng.random_range(2..4), rng.random_range(1..4), rng.random_range(1..4), 2], rng);
    let c = x.shape()[1];
    let mean: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    let f = |x: &Tensor<f64>| x.batch_norm(fixed.then_some((&mean[..], &var[..])), 1e-5).map(|(y, _, _)| y);
    let proj = project(&f(&x)?, rng);
    check_gradients(std::slice::from_ref(&x), || proj(&f(&x)?), DEFAULT_STEP, None, rng)
}

fn gather_trial(rng: &mut dyn RngCore) -> Result<GradCheckReport> {
    let v = rng.random_range(2..6);
    let table = randn(&[v, rng.random_range(1..4)], rng);
    let ids: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..v)).collect();
    let proj = project(&table.gather_rows(&ids)?, rng);
    check_gradients(std::slice::from_ref(&table), || proj(&table.gather_rows(&ids)?), DEFAULT_STEP, None, rng)
}

fn nll_trial(rng: &mut dyn RngCore, weighted: bool) -> Result<GradCheckReport> {
    let (n, v) = if weighted { (rng.random_range(1..5), rng.random_range(2..8)) } else { (4, 7) };
    let logits = randn(&[n, v], rng).scale(2.0).detach();
    let logits = Tensor::param(logits.shape(), logits.to_vec())?;
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    check_gradients(
        std::slice::from_ref(&logits),
        || {
            if weighted {
                logits.weighted_nll(&targets, &weights)
            } else {
                logits.softmax_cross_entropy(&targets)
            }
        },
        DEFAULT_STEP,
        None,
        rng,
    )
}

fn clamp_input(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<f64> {
    // Keep every value at least 0.05 away from the clamp bounds at +-0.5.
    let data = (0..numel(shape))
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if (v.abs() - 0.5).abs() < 0.05 {
                v * 1.3
            } else {
                v
            }
        })
        .collect();
    Tensor::param(shape, data).expect("shape")
}

/// `(op name, trial)` for every differentiable op of the engine.
pub fn operations() -> Vec<(&'static str, Trial)> {
    vec![
        ("add", |r| binary_trial(r, |a, b| a.add(b))),
        ("sub", |r| binary_trial(r, |a, b| a.sub(b))),
        ("mul", |r| binary_trial(r, |a, b| a.mul(b))),
        ("add_bias", add_bias_trial),
        ("relu", |r| unary_trial(r, randn_off_zero, |x| Ok(x.relu()))),
        ("leaky_relu", |r| unary_trial(r, randn_off_zero, |x| Ok(x.leaky_relu(0.2)))),
        ("tanh", |r| unary_trial(r, randn, |x| Ok(x.tanh()))),
        ("sigmoid", |r| unary_trial(r, randn, |x| Ok(x.sigmoid()))),
        ("exp", |r| unary_trial(r, randn, |x| Ok(x.exp()))),
        ("ln", |r| unary_trial(r, positive, |x| Ok(x.ln()))),
        ("neg", |r| unary_trial(r, randn, |x| Ok(x.neg()))),
        ("scale", |r| unary_trial(r, randn, |x| Ok(x.scale(-1.7)))),
        ("add_scalar", |r| unary_trial(r, randn, |x| Ok(x.add_scalar(0.3)))),
        ("one_minus", |r| unary_trial(r, randn, |x| Ok(x.one_minus()))),
        ("square", |r| unary_trial(r, randn, |x| Ok(x.square()))),
        ("clamp", |r| unary_trial(r, clamp_input, |x| Ok(x.clamp(-0.5, 0.5)))),
        ("sum", |r| unary_trial(r, randn, |x| Ok(x.sum()))),
        ("mean", |r| unary_trial(r, randn, |x| Ok(x.mean()))),
        ("reshape", |r| unary_trial(r, randn, |x| x.reshape(&[x.numel()]))),
        ("concat", concat_trial),
        ("narrow", narrow_trial),
        ("broadcast_spatial", |r| unary_trial(r, randn, |x| x.broadcast_spatial(2, 3))),
        ("mean_spatial", |r| {
            let x = spatial(r, false);
            let proj = project(&x.mean_spatial()?, r);
            check_gradients(std::slice::from_ref(&x), || proj(&x.mean_spatial()?), DEFAULT_STEP, None, r)
        }),
        ("matmul", matmul_trial),
        ("conv2d", conv_trial),
        ("conv2d_relu_mean", composite_trial),
        ("upsample2x", |r| {
            let x = spatial(r, false);
            let proj = project(&x.upsample2x()?, r);
            check_gradients(std::slice::from_ref(&x), || proj(&x.upsample2x()?), DEFAULT_STEP, None, r)
        }),
        ("avg_pool2x", |r| {
            let x = spatial(r, true);
            let proj = project(&x.avg_pool2x()?, r);
            check_gradients(std::slice::from_ref(&x), || proj(&x.avg_pool2x()?), DEFAULT_STEP, None, r)
        }),
        ("batch_norm", |r| batch_norm_trial(r, false)),
        ("batch_norm_fixed_stats", |r| batch_norm_trial(r, true)),
        ("minibatch_stddev", |r| {
            let x = randn(&[r.random_range(2..5), r.random_range(1..3), r.random_range(1..3), 2], r);
            let proj = project(&x.minibatch_stddev(1e-8)?, r);
            check_gradients(std::slice::from_ref(&x), || proj(&x.minibatch_stddev(1e-8)?), DEFAULT_STEP, None, r)
        }),
        ("gather_rows", gather_trial),
        ("softmax_cross_entropy", |r| nll_trial(r, false)),
        ("weighted_nll", |r| nll_trial(r, true)),
    ]
}

/// Runs `trials` random trials of every op; returns the worst error per op.
pub fn run_suite<R: Rng>(trials: usize, rng: &mut R) -> Result<Vec<(&'static str, f64)>> {
    operations()
        .into_iter()
        .map(|(name, trial)| {
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                worst = worst.max(trial(rng)?.max_rel_error);
            }
            Ok((name, worst))
        })
        .collect()
}
