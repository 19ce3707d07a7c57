//! Relationship guidance between mined support features and query features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Param};
use crate::tensor::{adaptive_avg_pool, concat, depthwise_xcorr, Element, Tensor};

/// How support kernels correlate with the query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialFusion {
    /// 1×1 plus sequential 3×1 / 1×3 strip correlation, added to the query.
    #[default]
    Strip,
    /// Only the globally pooled 1×1 kernel (attention-RPN style).
    PointwiseOnly,
}

#[derive(Clone, Debug)]
pub struct SupportKernels<E: Element> {
    pub k1: Tensor<E>,
    pub k31: Tensor<E>,
    pub k13: Tensor<E>,
}

pub fn build_kernels<E: Element>(support: &Tensor<E>) -> Result<SupportKernels<E>> {
    let [c, h, w] = *support.shape() else {
        return Err(Error::shape(format!("build_kernels: expected C×H×W, got {:?}", support.shape())));
    };
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("build_kernels: support {h}×{w} smaller than 3×3")));
    }
    Ok(SupportKernels {
        k1: adaptive_avg_pool(support, 1, 1)?.reshape(&[c, 1, 1])?,
        k31: adaptive_avg_pool(support, 3, 1)?,
        k13: adaptive_avg_pool(support, 1, 3)?,
    })
}

/// `Y + xcorr(Y, k1) + xcorr(xcorr(Y, k31), k13)`.
pub fn spatial_scale_correlation<E: Element>(kernels: &SupportKernels<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    let q1 = depthwise_xcorr(y, &kernels.k1)?;
    let qs = depthwise_xcorr(&depthwise_xcorr(y, &kernels.k31)?, &kernels.k13)?;
    y.add(&q1)?.add(&qs)
}

/// 1×1 conv over `[pooled support broadcast ; y_attn]`.
pub fn channel_correlation<E: Element>(support: &Tensor<E>, y_attn: &Tensor<E>, conv: &Conv2d<E>) -> Result<Tensor<E>> {
    let [c, h, w] = *y_attn.shape() else {
        return Err(Error::shape(format!("channel_correlation: expected C×H×W, got {:?}", y_attn.shape())));
    };
    if support.dims() != 3 || support.shape()[0] != c {
        return Err(Error::shape(format!("channel_correlation: support {:?} vs query {:?}", support.shape(), y_attn.shape())));
    }
    let s = adaptive_avg_pool(support, 1, 1)?.reshape(&[c])?.broadcast_hw(h, w)?;
    conv.forward(&concat(&[s, y_attn.clone()], 0)?)
}

#[derive(Clone, Debug)]
pub struct RgBlock<E: Element> {
    pub chan_corr: Conv2d<E>,
    pub fusion: SpatialFusion,
}

impl<E: Element> RgBlock<E> {
    pub fn new(channels: usize, fusion: SpatialFusion, rng: &mut impl Rng) -> Self {
        Self { chan_corr: Conv2d::pointwise("rg.chan_corr", 2 * channels, channels, rng), fusion }
    }

    /// Attention map for one level.
    pub fn forward(&self, support: &Tensor<E>, query: &Tensor<E>) -> Result<Tensor<E>> {
        let kernels = build_kernels(support)?;
        let y_attn = match self.fusion {
            SpatialFusion::Strip => spatial_scale_correlation(&kernels, query)?,
            SpatialFusion::PointwiseOnly => depthwise_xcorr(query, &kernels.k1)?,
        };
        channel_correlation(support, &y_attn, &self.chan_corr)
    }

    /// Level-aligned guidance; `support` holds the shot-averaged mined maps.
    pub fn guide(&self, support: &FeaturePyramid<E>, query: &FeaturePyramid<E>) -> Result<FeaturePyramid<E>> {
        query.map(|i, q| self.forward(&support.levels[i], q))
    }
}

impl<E: Element> Module<E> for RgBlock<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.chan_corr.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.chan_corr.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOptions};
    use crate::tensor::stats::count_macs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn pass_through(block: &mut RgBlock<f64>, c: usize) {
        // weight [0 | I]
        let w: Vec<f64> = (0..c * 2 * c).map(|i| if i % (2 * c) == c + i / (2 * c) { 1.0 } else { 0.0 }).collect();
        block.chan_corr.weight.assign(&w);
        block.chan_corr.bias.assign(&vec![0.0; c]);
    }

    fn pool_oracle(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for ci in 0..c {
            for i in 0..oh {
                let (y0, y1) = (i * h / oh, ((i + 1) * h + oh - 1) / oh);
                for j in 0..ow {
                    let (x0, x1) = (j * w / ow, ((j + 1) * w + ow - 1) / ow);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += x[(ci * h + y) * w + xx];
                        }
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        out
    }

    #[test]
    fn kernels_match_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = rand(&mut rng, &[64, 8, 8]);
        let k = build_kernels(&s).unwrap();
        assert_eq!(k.k1.data(), pool_oracle(s.data(), 64, 8, 8, 1, 1).as_slice());
        assert_eq!(k.k31.data(), pool_oracle(s.data(), 64, 8, 8, 3, 1).as_slice());
        assert_eq!(k.k13.data(), pool_oracle(s.data(), 64, 8, 8, 1, 3).as_slice());
        assert_eq!(k.k31.shape(), &[64, 3, 1]);
        assert_eq!(k.k13.shape(), &[64, 1, 3]);
    }

    #[test]
    fn constant_support_gives_constant_kernels() {
        let k = build_kernels(&Tensor::<f64>::full(&[2, 9, 6], 0.7)).unwrap();
        for t in [&k.k1, &k.k31, &k.k13] {
            assert!(t.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = build_kernels(&rand(&mut rng, &[2, 9, 5])).unwrap();
        for c in 0..2 {
            let m = (k.k31.data()[3 * c] + k.k31.data()[3 * c + 1] + k.k31.data()[3 * c + 2]) / 3.0;
            assert!((m - k.k1.data()[c]).abs() < 1e-12);
        }
        assert!(build_kernels(&Tensor::<f64>::zeros(&[2, 2, 8])).is_err());
    }

    #[test]
    fn spatial_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand(&mut rng, &[3, 5, 6]);
        let zero = SupportKernels { k1: Tensor::zeros(&[3, 1, 1]), k31: Tensor::zeros(&[3, 3, 1]), k13: Tensor::zeros(&[3, 1, 3]) };
        assert_eq!(spatial_scale_correlation(&zero, &y).unwrap().data(), y.data());
        let ones = SupportKernels { k1: Tensor::ones(&[3, 1, 1]), ..zero };
        let out = spatial_scale_correlation(&ones, &y).unwrap();
        assert!(out.data().iter().zip(y.data()).all(|(a, b)| (a - 2.0 * b).abs() < 1e-12));
    }

    /// Explicit zero-padded loops of both correlation paths.
    fn spatial_oracle(y: &[f64], k1: &[f64], k31: &[f64], k13: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let at = |v: &[f64], ci: usize, i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                0.0
            } else {
                v[(ci * h + i as usize) * w + j as usize]
            }
        };
        let mut mid = vec![0.0; c * h * w];
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    mid[(ci * h + i) * w + j] = (0..3).map(|m| k31[ci * 3 + m] * at(y, ci, i as isize + m as isize - 1, j as isize)).sum();
                }
            }
        }
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let idx = (ci * h + i) * w + j;
                    let qs: f64 = (0..3).map(|n| k13[ci * 3 + n] * at(&mid, ci, i as isize, j as isize + n as isize - 1)).sum();
                    out[idx] = y[idx] + k1[ci] * y[idx] + qs;
                }
            }
        }
        out
    }

    #[test]
    fn spatial_matches_oracle_and_is_linear_in_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (c, h, w) = (rng.random_range(1..5), rng.random_range(3..9), rng.random_range(3..9));
            let s = rand(&mut rng, &[c, 8, 8]);
            let y = rand(&mut rng, &[c, h, w]);
            let k = build_kernels(&s).unwrap();
            let out = spatial_scale_correlation(&k, &y).unwrap();
            let o = spatial_oracle(y.data(), k.k1.data(), k.k31.data(), k.k13.data(), c, h, w);
            assert!(out.data().iter().zip(&o).all(|(a, b)| (a - b).abs() < 1e-5));

            let alpha = 2.5;
            let ks = build_kernels(&s.scale(alpha)).unwrap();
            let q1 = depthwise_xcorr(&y, &k.k1).unwrap();
            let q1s = depthwise_xcorr(&y, &ks.k1).unwrap();
            assert!(q1.data().iter().zip(q1s.data()).all(|(a, b)| (alpha * a - b).abs() < 1e-9));
            let strip = |k: &SupportKernels<f64>| depthwise_xcorr(&depthwise_xcorr(&y, &k.k31).unwrap(), &k.k13).unwrap();
            // Qs is bilinear in the kernels, hence quadratic in the support scale
            assert!(strip(&k).data().iter().zip(strip(&ks).data()).all(|(a, b)| (alpha * alpha * a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn strip_path_costs_six_macs_per_cell() {
        let (c, h, w) = (64, 20, 20);
        let y = Tensor::<f32>::ones(&[c, h, w]);
        let (_, strip) = count_macs(|| {
            depthwise_xcorr(&depthwise_xcorr(&y, &Tensor::ones(&[c, 3, 1])).unwrap(), &Tensor::ones(&[c, 1, 3])).unwrap()
        });
        let (_, dense) = count_macs(|| depthwise_xcorr(&y, &Tensor::ones(&[c, 3, 3])).unwrap());
        assert_eq!(strip, (6 * c * h * w) as u64);
        assert_eq!(dense, (9 * c * h * w) as u64);
    }

    #[test]
    fn channel_correlation_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let mut block = RgBlock::<f64>::new(c, SpatialFusion::Strip, &mut rng);
        let s = rand(&mut rng, &[c, 8, 8]);
        let y = rand(&mut rng, &[c, 5, 7]);
        pass_through(&mut block, c);
        assert_eq!(channel_correlation(&s, &y, &block.chan_corr).unwrap().data(), y.data());

        // [I | 0] with zero support leaves only the bias
        let w: Vec<f64> = (0..c * 2 * c).map(|i| if i % (2 * c) == i / (2 * c) { 1.0 } else { 0.0 }).collect();
        block.chan_corr.weight.assign(&w);
        block.chan_corr.bias.assign(&[0.1, 0.2, 0.3, 0.4]);
        let out = channel_correlation(&Tensor::zeros(&[c, 8, 8]), &y, &block.chan_corr).unwrap();
        for ci in 0..c {
            assert!(out.data()[ci * 35..(ci + 1) * 35].iter().all(|&v| (v - 0.1 * (ci + 1) as f64).abs() < 1e-12));
        }

        // random weights against a per-pixel matrix product
        let block = RgBlock::<f64>::new(c, SpatialFusion::Strip, &mut rng);
        let out = channel_correlation(&s, &y, &block.chan_corr).unwrap();
        let wt = block.chan_corr.weight.tensor.data();
        let b = block.chan_corr.bias.tensor.data();
        let mean: Vec<f64> = (0..c).map(|ci| s.data()[ci * 64..(ci + 1) * 64].iter().sum::<f64>() / 64.0).collect();
        for p in 0..35 {
            for o in 0..c {
                let mut acc = b[o];
                for i in 0..c {
                    acc += wt[o * 2 * c + i] * mean[i] + wt[o * 2 * c + c + i] * y.data()[i * 35 + p];
                }
                assert!((acc - out.data()[o * 35 + p]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_support_with_pass_through_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 3;
        let mut block = RgBlock::<f64>::new(c, SpatialFusion::Strip, &mut rng);
        pass_through(&mut block, c);
        let q = FeaturePyramid::new([rand(&mut rng, &[c, 8, 8]), rand(&mut rng, &[c, 4, 4]), rand(&mut rng, &[c, 3, 3])]);
        let s = FeaturePyramid::new([Tensor::zeros(&[c, 8, 8]), Tensor::zeros(&[c, 8, 8]), Tensor::zeros(&[c, 8, 8])]);
        let a = block.guide(&s, &q).unwrap();
        for (x, y) in a.levels.iter().zip(&q.levels) {
            assert_eq!(x.shape(), y.shape());
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn pointwise_only_ablation_skips_strips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut block = RgBlock::<f64>::new(2, SpatialFusion::PointwiseOnly, &mut rng);
        pass_through(&mut block, 2);
        let s = rand(&mut rng, &[2, 8, 8]);
        let y = rand(&mut rng, &[2, 4, 4]);
        let k = build_kernels(&s).unwrap();
        let expect = depthwise_xcorr(&y, &k.k1).unwrap();
        assert_eq!(block.forward(&s, &y).unwrap().data(), expect.data());
    }

    #[test]
    fn block_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = RgBlock::<f64>::new(3, SpatialFusion::Strip, &mut rng);
        let probe = rand(&mut rng, &[3, 5, 4]);
        let inputs = [rand(&mut rng, &[3, 6, 6]), rand(&mut rng, &[3, 5, 4]), block.chan_corr.weight.tensor.detach(), block.chan_corr.bias.tensor.detach()];
        let r = grad_check(
            |t| {
                let conv = Conv2d {
                    weight: Param { name: "w".into(), tensor: t[2].clone() },
                    bias: Param { name: "b".into(), tensor: t[3].clone() },
                    spec: Default::default(),
                };
                let k = build_kernels(&t[0])?;
                Ok(channel_correlation(&t[0], &spatial_scale_correlation(&k, &t[1])?, &conv)?.mul(&probe)?.sum())
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
