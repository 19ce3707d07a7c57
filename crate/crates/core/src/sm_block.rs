//! Support feature mining: permute-MLP encoders along height and width,
//! fused by a two-branch channel softmax.
//!
//! A `C×H×W` map is viewed as `S` segments of `G` channels. Height encoding
//! swaps the spatial height with the within-segment channel axis, mixes the
//! resulting `S·H` channels with one FC layer at every (row, column) position
//! and swaps back. This requires `H == G`; supports are pooled to `G×G` before
//! the block so the condition holds at every pyramid level.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::{adaptive_avg_pool, linear, Element, Tensor};

fn segment_view(x: &Tensor<impl Element>, segment: usize, along_width: bool) -> Result<(usize, usize, usize, usize)> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::shape(format!("sm block: expected C×H×W, got {:?}", x.shape())));
    };
    if segment == 0 || c % segment != 0 {
        return Err(Error::shape(format!("sm block: {c} channels not divisible by segment size {segment}")));
    }
    let spatial = if along_width { w } else { h };
    if spatial != segment {
        return Err(Error::shape(format!(
            "sm block: permuted extent {spatial} must equal segment size {segment} (pool supports first)"
        )));
    }
    Ok((c / segment, segment, h, w))
}

/// Height encoder. `w_h` is `C×C`.
pub fn encode_height<E: Element>(x: &Tensor<E>, w_h: &Tensor<E>, segment: usize) -> Result<Tensor<E>> {
    let (s, g, h, w) = segment_view(x, segment, false)?;
    let c = s * g;
    // [S, G, H, W] -> [G, W, S, H]: channel index (s, h), position (g, w)
    let p = x.reshape(&[s, g, h, w])?.permute(&[1, 3, 0, 2])?.reshape(&[g * w, c])?;
    let y = linear(&p, w_h, None)?.reshape(&[g, w, s, h])?;
    y.permute(&[2, 0, 3, 1])?.reshape(&[c, h, w])
}

/// Width encoder. `w_w` is `C×C`.
pub fn encode_width<E: Element>(x: &Tensor<E>, w_w: &Tensor<E>, segment: usize) -> Result<Tensor<E>> {
    let (s, g, h, w) = segment_view(x, segment, true)?;
    let c = s * g;
    // [S, G, H, W] -> [H, G, S, W]: channel index (s, w), position (h, g)
    let p = x.reshape(&[s, g, h, w])?.permute(&[2, 1, 0, 3])?.reshape(&[h * g, c])?;
    let y = linear(&p, w_w, None)?.reshape(&[h, g, s, w])?;
    y.permute(&[2, 1, 0, 3])?.reshape(&[c, h, w])
}

/// Branch weights `Z` (`2×C`, softmax over the branch axis).
pub fn branch_weights<E: Element>(x_h: &Tensor<E>, x_w: &Tensor<E>, r1: &Tensor<E>, r2: &Tensor<E>) -> Result<Tensor<E>> {
    if x_h.shape() != x_w.shape() || x_h.dims() != 3 {
        return Err(Error::shape(format!("fuse: branch shapes {:?} vs {:?}", x_h.shape(), x_w.shape())));
    }
    let c = x_h.shape()[0];
    if r1.dims() != 2 || r1.shape()[0] != c || r2.dims() != 2 || r2.shape() != [r1.shape()[1], 2 * c] {
        return Err(Error::shape(format!("fuse: R1 {:?}, R2 {:?} for {c} channels", r1.shape(), r2.shape())));
    }
    let g = adaptive_avg_pool(&x_h.add(x_w)?, 1, 1)?.reshape(&[1, c])?;
    let z = linear(&linear(&g, r1, None)?.relu(), r2, None)?;
    z.reshape(&[2, c])?.softmax(0)
}

/// `X̂ = X_h ⊙ Z[0] + X_w ⊙ Z[1]`.
pub fn fuse<E: Element>(x_h: &Tensor<E>, x_w: &Tensor<E>, r1: &Tensor<E>, r2: &Tensor<E>) -> Result<Tensor<E>> {
    let c = x_h.shape()[0];
    let z = branch_weights(x_h, x_w, r1, r2)?;
    let parts = z.split(0, &[1, 1])?;
    let a = x_h.mul_channel(&parts[0].reshape(&[c])?)?;
    let b = x_w.mul_channel(&parts[1].reshape(&[c])?)?;
    a.add(&b)
}

#[derive(Clone, Debug)]
pub struct SmBlock<E: Element> {
    pub w_h: Param<E>,
    pub w_w: Param<E>,
    pub r1: Param<E>,
    pub r2: Param<E>,
    pub segment: usize,
}

impl<E: Element> SmBlock<E> {
    pub fn new(channels: usize, segment: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if segment == 0 || channels % segment != 0 {
            return Err(Error::invalid(format!("sm block: {channels} channels not divisible by segment {segment}")));
        }
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            w_h: Param::kaiming("sm.w_h", &[channels, channels], channels, rng),
            w_w: Param::kaiming("sm.w_w", &[channels, channels], channels, rng),
            r1: Param::kaiming("sm.r1", &[channels, hidden], channels, rng),
            r2: Param::kaiming("sm.r2", &[hidden, 2 * channels], hidden, rng),
            segment,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let x_h = encode_height(x, &self.w_h.tensor, self.segment)?;
        let x_w = encode_width(x, &self.w_w.tensor, self.segment)?;
        fuse(&x_h, &x_w, &self.r1.tensor, &self.r2.tensor)
    }

    /// Mines each shot of an `N×C×G×G` batch and averages the results.
    pub fn forward_shots(&self, shots: &Tensor<E>) -> Result<Tensor<E>> {
        let [n, c, h, w] = *shots.shape() else {
            return Err(Error::shape(format!("sm block: expected N×C×H×W shots, got {:?}", shots.shape())));
        };
        let mut acc: Option<Tensor<E>> = None;
        for i in 0..n {
            let y = self.forward(&shots.narrow(0, i, 1)?.reshape(&[c, h, w])?)?;
            acc = Some(match acc {
                Some(a) => a.add(&y)?,
                None => y,
            });
        }
        Ok(acc.expect("n ≥ 1").scale(E::from_f64_lossy(1.0 / n as f64)))
    }
}

impl<E: Element> Module<E> for SmBlock<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        f(&self.w_h);
        f(&self.w_w);
        f(&self.r1);
        f(&self.r2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.w_h);
        f(&mut self.w_w);
        f(&mut self.r1);
        f(&mut self.r2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn eye(n: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Materializes the permuted tensor element by element.
    fn height_oracle(x: &[f64], wm: &[f64], c: usize, g: usize, w: usize) -> Vec<f64> {
        let (s, h) = (c / g, g);
        let mut out = vec![0.0; c * h * w];
        for gi in 0..g {
            for wi in 0..w {
                let mut v = vec![0.0; c];
                for si in 0..s {
                    for hi in 0..h {
                        v[si * h + hi] = x[((si * g + gi) * h + hi) * w + wi];
                    }
                }
                for so in 0..s {
                    for ho in 0..h {
                        let j = so * h + ho;
                        let y: f64 = (0..c).map(|i| v[i] * wm[i * c + j]).sum();
                        out[((so * g + gi) * h + ho) * w + wi] = y;
                    }
                }
            }
        }
        out
    }

    fn transpose_hw(x: &Tensor<f64>) -> Tensor<f64> {
        x.permute(&[0, 2, 1]).unwrap()
    }

    #[test]
    fn identity_weights_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand(&mut rng, &[8, 4, 4]);
        assert_eq!(encode_height(&x, &eye(8), 4).unwrap().data(), x.data());
        assert_eq!(encode_width(&x, &eye(8), 4).unwrap().data(), x.data());
    }

    #[test]
    fn encode_height_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = rand(&mut rng, &[8, 4, 4]);
            let wm = rand(&mut rng, &[8, 8]);
            let y = encode_height(&x, &wm, 4).unwrap();
            let o = height_oracle(x.data(), wm.data(), 8, 4, 4);
            assert!(y.data().iter().zip(&o).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn width_mirrors_height() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand(&mut rng, &[8, 4, 4]);
        let wm = rand(&mut rng, &[8, 8]);
        let a = encode_width(&transpose_hw(&x), &wm, 4).unwrap();
        let b = transpose_hw(&encode_height(&x, &wm, 4).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-12));
        // width oracle via the symmetry and the height oracle
        let o = height_oracle(x.data(), wm.data(), 8, 4, 4);
        let ot = transpose_hw(&Tensor::new(o, &[8, 4, 4]).unwrap());
        let y = encode_width(&transpose_hw(&x), &wm, 4).unwrap();
        assert!(y.data().iter().zip(ot.data()).all(|(p, q)| (p - q).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_segments() {
        let x = Tensor::<f64>::zeros(&[6, 4, 4]);
        assert!(encode_height(&x, &eye(6), 4).is_err());
        let x = Tensor::<f64>::zeros(&[8, 5, 4]);
        assert!(encode_height(&x, &eye(8), 4).is_err());
        assert!(encode_width(&x, &eye(8), 4).is_ok());
    }

    #[test]
    fn zero_r2_averages_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (xh, xw) = (rand(&mut rng, &[4, 3, 3]), rand(&mut rng, &[4, 3, 3]));
        let y = fuse(&xh, &xw, &rand(&mut rng, &[4, 2]), &Tensor::zeros(&[2, 8])).unwrap();
        for ((a, b), v) in xh.data().iter().zip(xw.data()).zip(y.data()) {
            assert!((0.5 * (a + b) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_branches_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand(&mut rng, &[4, 3, 3]);
        let y = fuse(&x, &x, &rand(&mut rng, &[4, 2]), &rand(&mut rng, &[2, 8])).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    /// Direct transcription: mean pool, two-layer MLP, per-channel softmax over
    /// two logits, weighted sum.
    fn fuse_oracle(xh: &[f64], xw: &[f64], r1: &[f64], r2: &[f64], c: usize, hw: usize, hid: usize) -> Vec<f64> {
        let g: Vec<f64> = (0..c).map(|ci| (0..hw).map(|i| xh[ci * hw + i] + xw[ci * hw + i]).sum::<f64>() / hw as f64).collect();
        let u: Vec<f64> = (0..hid).map(|j| (0..c).map(|i| g[i] * r1[i * hid + j]).sum::<f64>().max(0.0)).collect();
        let z: Vec<f64> = (0..2 * c).map(|j| (0..hid).map(|i| u[i] * r2[i * 2 * c + j]).sum()).collect();
        let mut out = vec![0.0; c * hw];
        for ci in 0..c {
            let (a, b) = (z[ci], z[c + ci]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let (wa, wb) = (ea / (ea + eb), eb / (ea + eb));
            for i in 0..hw {
                out[ci * hw + i] = wa * xh[ci * hw + i] + wb * xw[ci * hw + i];
            }
        }
        out
    }

    #[test]
    fn fuse_matches_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (xh, xw) = (rand(&mut rng, &[4, 3, 2]), rand(&mut rng, &[4, 3, 2]));
            let (r1, r2) = (rand(&mut rng, &[4, 3]), rand(&mut rng, &[3, 8]));
            let y = fuse(&xh, &xw, &r1, &r2).unwrap();
            let o = fuse_oracle(xh.data(), xw.data(), r1.data(), r2.data(), 4, 6, 3);
            assert!(y.data().iter().zip(&o).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn branch_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (xh, xw) = (rand(&mut rng, &[8, 4, 4]), rand(&mut rng, &[8, 4, 4]));
        let z = branch_weights(&xh, &xw, &rand(&mut rng, &[8, 2]), &rand(&mut rng, &[2, 16])).unwrap();
        for c in 0..8 {
            let (a, b) = (z.data()[c], z.data()[8 + c]);
            assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
            assert!((a + b - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn block_preserves_shape_and_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = SmBlock::<f64>::new(8, 4, 4, &mut rng).unwrap();
        let x = rand(&mut rng, &[8, 4, 4]);
        assert_eq!(block.forward(&x).unwrap().shape(), &[8, 4, 4]);
        let probe = rand(&mut rng, &[8, 4, 4]);
        let inputs = [x, block.w_h.tensor.detach(), block.w_w.tensor.detach(), block.r1.tensor.detach(), block.r2.tensor.detach()];
        let r = grad_check(
            |t| {
                let y = fuse(&encode_height(&t[0], &t[1], 4)?, &encode_width(&t[0], &t[2], 4)?, &t[3], &t[4])?;
                Ok(y.mul(&probe)?.sum())
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn shots_are_averaged_after_mining() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = SmBlock::<f64>::new(8, 4, 4, &mut rng).unwrap();
        let a = rand(&mut rng, &[8, 4, 4]);
        let b = rand(&mut rng, &[8, 4, 4]);
        let both = crate::tensor::concat(&[a.reshape(&[1, 8, 4, 4]).unwrap(), b.reshape(&[1, 8, 4, 4]).unwrap()], 0).unwrap();
        let m = block.forward_shots(&both).unwrap();
        let (ya, yb) = (block.forward(&a).unwrap(), block.forward(&b).unwrap());
        for ((p, q), v) in ya.data().iter().zip(yb.data()).zip(m.data()) {
            assert!((0.5 * (p + q) - v).abs() < 1e-12);
        }
    }
}
