//! Central finite-difference verification of analytic gradients.
//!
//! Relative error of one coordinate is `|a - n| / max(|a|, |n|, 1e-6)`, where
//! `a` is the analytic and `n` the numeric derivative. The floor keeps
//! coordinates whose true derivative is zero from dividing by rounding noise.

pub mod suite;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares backward-pass gradients of the scalar `f(inputs)` against central
/// differences with step `h`. With `max_coords = Some(k)` only `k` randomly
/// chosen coordinates of each input are probed.
pub fn check_gradients<F, R>(
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
    R: Rng + ?Sized,
{
    inputs.iter().for_each(Tensor::zero_grad);
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let base = t.to_vec();
        for c in coords {
            let mut probe = base.clone();
            probe[c] = base[c] + h;
            t.set_data(probe.clone())?;
            let up = no_grad(&f)?.item();
            probe[c] = base[c] - h;
            t.set_data(probe)?;
            let down = no_grad(&f)?.item();
            t.set_data(base.clone())?;

            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[ti][c], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((ti, c, analytic[ti][c], numeric));
                }
            }
        }
    }
    inputs.iter().for_each(Tensor::zero_grad);
    Ok(report)
}
