//! Central-difference gradient checking in 64-bit precision.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Added to every analytic gradient entry before comparison. Only used to
    /// prove the checker can fail.
    pub fault: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-4, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every input entry.
    pub max_rel_error: f64,
    /// (input index, flat element index) where the maximum occurred.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences for every entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().with_requires_grad(true)).collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::shape(format!("grad_check needs a scalar, got {:?}", out.shape())));
    }
    if !out.all_finite() {
        return Err(Error::NonFinite("grad_check forward value".into()));
    }
    out.backward()?;
    drop(out);

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let perturbed: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut d = t.to_vec();
                    d[idx] += delta;
                    Tensor::new(d, t.shape()).expect("same shape")
                } else {
                    t.detach()
                }
            })
            .collect();
        let v = no_grad(|| f(&perturbed))?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("perturbed forward (input {which}, entry {idx})")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), entries: 0 };
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("analytic gradient of input {i}")));
        }
        for (j, &a) in analytic.iter().enumerate() {
            let a = a + opts.fault.unwrap_or(0.0);
            let numeric = (eval(i, j, opts.eps)? - eval(i, j, -opts.eps)?) / (2.0 * opts.eps);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
