//! Fused loss kernels. Targets are constants; only predictions receive
//! gradients. Every loss returns an unnormalized sum.

use super::ops::sigmoid_scalar;
use super::{Element, Tensor};
use crate::error::{Error, Result};

fn check_pair<E: Element>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softplus<E: Element>(x: E) -> E {
    x.max(E::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0 }
    }
}

/// Penalty-reduced pixel focal loss on logits against Gaussian heatmap targets.
///
/// Cells with target exactly 1 are positives: `-(1-p)^α log p`; every other cell
/// contributes `-(1-y)^β p^α log(1-p)`, with `p = sigmoid(logit)`.
pub fn focal_loss<E: Element>(logits: &Tensor<E>, targets: &Tensor<E>, params: FocalParams) -> Result<Tensor<E>> {
    check_pair(logits, targets, "focal_loss")?;
    let alpha = E::from_f64_lossy(params.alpha);
    let beta = E::from_f64_lossy(params.beta);
    let one = E::one();
    let mut total = E::zero();
    for (&x, &y) in logits.data().iter().zip(targets.data()) {
        let p = sigmoid_scalar(x);
        total += if y == one {
            -(one - p).powf(alpha) * -softplus(-x)
        } else {
            -(one - y).powf(beta) * p.powf(alpha) * -softplus(x)
        };
    }
    Ok(Tensor::from_op(
        "focal_loss",
        vec![total],
        vec![1],
        vec![logits.clone(), targets.clone()],
        Box::new(move |ctx| {
            let g0 = ctx.grad[0];
            let gx = ctx.inputs[0]
                .data()
                .iter()
                .zip(ctx.inputs[1].data())
                .map(|(&x, &y)| {
                    let p = sigmoid_scalar(x);
                    let d = if y == one {
                        // d/dx [-(1-p)^α log p]
                        alpha * (one - p).powf(alpha) * p * -softplus(-x) - (one - p).powf(alpha + one)
                    } else {
                        // d/dx [-(1-y)^β p^α log(1-p)]
                        -(one - y).powf(beta) * (alpha * p.powf(alpha) * (one - p) * -softplus(x) - p.powf(alpha + one))
                    };
                    d * g0
                })
                .collect();
            vec![Some(gx), None]
        }),
    ))
}

/// `Σ mask · |pred − target|`.
pub fn masked_l1<E: Element>(pred: &Tensor<E>, target: &Tensor<E>, mask: &Tensor<E>) -> Result<Tensor<E>> {
    check_pair(pred, target, "masked_l1")?;
    check_pair(pred, mask, "masked_l1")?;
    let total = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(mask.data())
        .map(|((&p, &t), &m)| m * (p - t).abs())
        .sum();
    Ok(Tensor::from_op(
        "masked_l1",
        vec![total],
        vec![1],
        vec![pred.clone(), target.clone(), mask.clone()],
        Box::new(|ctx| {
            let g0 = ctx.grad[0];
            let gx = ctx.inputs[0]
                .data()
                .iter()
                .zip(ctx.inputs[1].data())
                .zip(ctx.inputs[2].data())
                .map(|((&p, &t), &m)| {
                    let s = if p > t {
                        E::one()
                    } else if p < t {
                        -E::one()
                    } else {
                        E::zero()
                    };
                    g0 * m * s
                })
                .collect();
            vec![Some(gx), None, None]
        }),
    ))
}

/// Huber-style smooth L1 summed over all entries.
pub fn smooth_l1<E: Element>(pred: &Tensor<E>, target: &Tensor<E>, beta: f64) -> Result<Tensor<E>> {
    check_pair(pred, target, "smooth_l1")?;
    if beta <= 0.0 {
        return Err(Error::invalid("smooth_l1: beta must be positive"));
    }
    let b = E::from_f64_lossy(beta);
    let half = E::from_f64_lossy(0.5);
    let total = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).abs();
            if d < b {
                half * d * d / b
            } else {
                d - half * b
            }
        })
        .sum();
    Ok(Tensor::from_op(
        "smooth_l1",
        vec![total],
        vec![1],
        vec![pred.clone(), target.clone()],
        Box::new(move |ctx| {
            let g0 = ctx.grad[0];
            let gx = ctx.inputs[0]
                .data()
                .iter()
                .zip(ctx.inputs[1].data())
                .map(|(&p, &t)| {
                    let d = p - t;
                    g0 * if d.abs() < b { d / b } else { d.signum() }
                })
                .collect();
            vec![Some(gx), None]
        }),
    ))
}

/// Binary cross-entropy on logits, summed.
pub fn bce_with_logits<E: Element>(logits: &Tensor<E>, targets: &Tensor<E>) -> Result<Tensor<E>> {
    check_pair(logits, targets, "bce_with_logits")?;
    let total = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| softplus(x) - x * t)
        .sum();
    Ok(Tensor::from_op(
        "bce_with_logits",
        vec![total],
        vec![1],
        vec![logits.clone(), targets.clone()],
        Box::new(|ctx| {
            let g0 = ctx.grad[0];
            let gx = ctx.inputs[0]
                .data()
                .iter()
                .zip(ctx.inputs[1].data())
                .map(|(&x, &t)| g0 * (sigmoid_scalar(x) - t))
                .collect();
            vec![Some(gx), None]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn focal_oracle(x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                if y == 1.0 {
                    -(1.0 - p).powi(2) * p.ln()
                } else {
                    -(1.0 - y).powi(4) * p.powi(2) * (1.0 - p).ln()
                }
            })
            .sum()
    }

    #[test]
    fn focal_matches_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.random_range(1..30);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 1.0 } else { rng.random_range(0.0..1.0) }).collect();
            let l = focal_loss(&Tensor::new(x.clone(), &[n]).unwrap(), &Tensor::new(y.clone(), &[n]).unwrap(), FocalParams::default())
                .unwrap();
            assert!((l.item() - focal_oracle(&x, &y)).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_and_smooth_l1_values() {
        let x = Tensor::<f64>::new(vec![0.0, 2.0], &[2]).unwrap();
        let t = Tensor::<f64>::new(vec![1.0, 0.0], &[2]).unwrap();
        let expect = 2f64.ln() + (1.0 + 2f64.exp()).ln();
        assert!((bce_with_logits(&x, &t).unwrap().item() - expect).abs() < 1e-12);
        let p = Tensor::<f64>::new(vec![0.5, 3.0], &[2]).unwrap();
        let z = Tensor::<f64>::zeros(&[2]);
        assert!((smooth_l1(&p, &z, 1.0).unwrap().item() - (0.125 + 2.5)).abs() < 1e-12);
        let m = Tensor::<f64>::new(vec![1.0, 0.0], &[2]).unwrap();
        assert_eq!(masked_l1(&p, &z, &m).unwrap().item(), 0.5);
    }

    #[test]
    fn losses_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let opts = GradCheckOptions::default();
        for _ in 0..20 {
            let n = rng.random_range(1..12);
            let x = Tensor::<f64>::from_fn(&[n], |_| rng.random_range(-3.0..3.0));
            let y = Tensor::<f64>::from_fn(&[n], |_| if rng.random_bool(0.3) { 1.0 } else { rng.random_range(0.0..0.99) });
            let t = Tensor::<f64>::from_fn(&[n], |_| rng.random_range(-3.0..3.0));
            let m = Tensor::<f64>::from_fn(&[n], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            let r = grad_check(|v| focal_loss(&v[0], &y, FocalParams::default()), &[x.clone()], &opts).unwrap();
            assert!(r.max_rel_error < 1e-4, "focal {r:?}");
            let r = grad_check(|v| bce_with_logits(&v[0], &m), &[x.clone()], &opts).unwrap();
            assert!(r.max_rel_error < 1e-4, "bce {r:?}");
            let r = grad_check(|v| smooth_l1(&v[0], &t, 1.0), &[x.clone()], &opts).unwrap();
            assert!(r.max_rel_error < 1e-4, "smooth_l1 {r:?}");
            let r = grad_check(|v| masked_l1(&v[0], &t, &m), &[x.clone()], &opts).unwrap();
            assert!(r.max_rel_error < 1e-4, "masked_l1 {r:?}");
        }
    }
}
