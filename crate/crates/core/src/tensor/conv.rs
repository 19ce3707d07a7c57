//! Spatial kernels: convolution, depthwise cross-correlation, pooling and
//! bilinear resizing.

use super::element::{gemm, MatMut, MatRef};
use super::{stats, Element, Tensor};
use crate::error::{Error, Result};

/// `(N, C, H, W, batched)` view of a `C×H×W` or `N×C×H×W` shape.
fn nchw(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(Error::shape(format!("{op}: expected C×H×W or N×C×H×W, got {shape:?}"))),
    }
}

fn out_shape(n: usize, c: usize, h: usize, w: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds every image into columns: `[Cin·kh·kw, N·Ho·Wo]`.
fn im2col<E: Element>(x: &[E], g: &Geometry) -> Vec<E> {
    let l = g.spatial_out();
    let cols = g.n * l;
    let mut col = vec![E::zero(); g.col_rows() * cols];
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut col[row * cols + n * l..][..l];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im<E: Element>(col: &[E], g: &Geometry) -> Vec<E> {
    let l = g.spatial_out();
    let cols = g.n * l;
    let mut x = vec![E::zero(); g.n * g.cin * g.h * g.w];
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &mut x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &col[row * cols + n * l..][..l];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[C, N·L]` (column-batched) to `[N, C, L]`.
fn unbatch_cols<E: Element>(m: &[E], c: usize, n: usize, l: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m.len()];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * l..][..l].copy_from_slice(&m[ci * n * l + ni * l..][..l]);
        }
    }
    out
}

/// `[N, C, L]` to `[C, N·L]`.
fn batch_cols<E: Element>(m: &[E], c: usize, n: usize, l: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m.len()];
    for ci in 0..c {
        for ni in 0..n {
            out[ci * n * l + ni * l..][..l].copy_from_slice(&m[(ni * c + ci) * l..][..l]);
        }
    }
    out
}

/// Standard 2-D convolution (cross-correlation), weight `Cout×Cin×kh×kw`,
/// zero padding.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: Conv2dSpec,
) -> Result<Tensor<E>> {
    let (n, cin, h, w, batched) = nchw(x.shape(), "conv2d")?;
    let [cout, wcin, kh, kw] = *weight.shape() else {
        return Err(Error::shape(format!("conv2d: weight must be 4-D, got {:?}", weight.shape())));
    };
    if wcin != cin {
        return Err(Error::shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
    }
    if spec.stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
        return Err(Error::shape(format!("conv2d: kernel {kh}×{kw} larger than padded input {h}×{w}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(format!("conv2d: bias {:?} vs {cout} outputs", b.shape())));
        }
    }
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
    let g = Geometry { n, cin, h, w, kh, kw, ho, wo, stride: spec.stride, pad: spec.padding };
    let l = g.spatial_out();
    let k = g.col_rows();
    stats::add_macs((n * cout * k * l) as u64);

    // Pointwise convs on a single image need no unfolding.
    let col_owned;
    let col: &[E] = if g.is_pointwise() && n == 1 {
        x.data()
    } else if g.is_pointwise() {
        col_owned = batch_cols(x.data(), cin, n, l);
        &col_owned
    } else {
        col_owned = im2col(x.data(), &g);
        &col_owned
    };
    let mut y = vec![E::zero(); cout * n * l];
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate() {
            y[co * n * l..(co + 1) * n * l].fill(bv);
        }
    }
    gemm(
        E::one(),
        MatRef::row_major(weight.data(), cout, k),
        MatRef::row_major(col, k, n * l),
        if bias.is_some() { E::one() } else { E::zero() },
        MatMut::row_major(&mut y, cout, n * l),
    );
    let y = if n == 1 { y } else { unbatch_cols(&y, cout, n, l) };

    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        "conv2d",
        y,
        out_shape(n, cout, ho, wo, batched),
        inputs,
        Box::new(move |ctx| {
            let gy_owned;
            let gy: &[E] = if n == 1 {
                ctx.grad
            } else {
                gy_owned = batch_cols(ctx.grad, cout, n, l);
                &gy_owned
            };
            let gy_m = MatRef::row_major(gy, cout, n * l);
            let x = ctx.inputs[0].data();
            let gw = ctx.needs(1).then(|| {
                let col_owned;
                let col: &[E] = if g.is_pointwise() && n == 1 {
                    x
                } else if g.is_pointwise() {
                    col_owned = batch_cols(x, cin, n, l);
                    &col_owned
                } else {
                    col_owned = im2col(x, &g);
                    &col_owned
                };
                let mut gw = vec![E::zero(); cout * k];
                gemm(
                    E::one(),
                    gy_m,
                    MatRef::row_major(col, k, n * l).t(),
                    E::zero(),
                    MatMut::row_major(&mut gw, cout, k),
                );
                gw
            });
            let gx = ctx.needs(0).then(|| {
                let mut gcol = vec![E::zero(); k * n * l];
                gemm(
                    E::one(),
                    MatRef::row_major(ctx.inputs[1].data(), cout, k).t(),
                    gy_m,
                    E::zero(),
                    MatMut::row_major(&mut gcol, k, n * l),
                );
                if g.is_pointwise() {
                    if n == 1 {
                        gcol
                    } else {
                        unbatch_cols(&gcol, cin, n, l)
                    }
                } else {
                    col2im(&gcol, &g)
                }
            });
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    (0..cout).map(|co| gy[co * n * l..(co + 1) * n * l].iter().copied().sum()).collect()
                }));
            }
            grads
        }),
    ))
}

/// Depthwise cross-correlation with same padding: every query channel is
/// correlated only with its own kernel slice.
///
/// `out[c,h,w] = Σ_m Σ_n kernel[c,m,n] · query_padded[c, h+m, w+n]`
pub fn depthwise_xcorr<E: Element>(query: &Tensor<E>, kernel: &Tensor<E>) -> Result<Tensor<E>> {
    let [c, h, w] = *query.shape() else {
        return Err(Error::shape(format!("depthwise_xcorr: query must be C×H×W, got {:?}", query.shape())));
    };
    let [kc, ph, pw] = *kernel.shape() else {
        return Err(Error::shape(format!("depthwise_xcorr: kernel must be C×Ph×Pw, got {:?}", kernel.shape())));
    };
    if kc != c {
        return Err(Error::shape(format!("depthwise_xcorr: query has {c} channels, kernel {kc}")));
    }
    if ph % 2 == 0 || pw % 2 == 0 {
        return Err(Error::shape(format!("depthwise_xcorr: kernel extent {ph}×{pw} must be odd")));
    }
    let (oh, ow) = (ph / 2, pw / 2);
    stats::add_macs((c * h * w * ph * pw) as u64);
    let (q, k) = (query.data(), kernel.data());
    let mut out = vec![E::zero(); c * h * w];
    for ci in 0..c {
        let qp = &q[ci * h * w..][..h * w];
        let kp = &k[ci * ph * pw..][..ph * pw];
        let op = &mut out[ci * h * w..][..h * w];
        for m in 0..ph {
            for nn in 0..pw {
                let kv = kp[m * pw + nn];
                let dy = m as isize - oh as isize;
                let dx = nn as isize - ow as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    let src = &qp[sy as usize * w..][..w];
                    let dst = &mut op[y * w..][..w];
                    for x in x0..x1 {
                        dst[x] += kv * src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        "depthwise_xcorr",
        out,
        vec![c, h, w],
        vec![query.clone(), kernel.clone()],
        Box::new(move |ctx| {
            let (q, k, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut gq = ctx.needs(0).then(|| vec![E::zero(); c * h * w]);
            let mut gk = ctx.needs(1).then(|| vec![E::zero(); c * ph * pw]);
            for ci in 0..c {
                for m in 0..ph {
                    for nn in 0..pw {
                        let ki = ci * ph * pw + m * pw + nn;
                        let kv = k[ki];
                        let dy = m as isize - oh as isize;
                        let dx = nn as isize - ow as isize;
                        let mut acc = E::zero();
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                            let grow = ci * h * w + y * w;
                            let srow = ci * h * w + sy as usize * w;
                            for x in x0..x1 {
                                let s = (x as isize + dx) as usize;
                                if let Some(gq) = gq.as_mut() {
                                    gq[srow + s] += g[grow + x] * kv;
                                }
                                acc += g[grow + x] * q[srow + s];
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[ki] = acc;
                        }
                    }
                }
            }
            vec![gq, gk]
        }),
    ))
}

/// Max pooling with `-inf` padding; the first maximal element receives the
/// gradient.
pub fn max_pool2d<E: Element>(x: &Tensor<E>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<E>> {
    let (n, c, h, w, batched) = nchw(x.shape(), "max_pool2d")?;
    if kernel == 0 || stride == 0 || padding * 2 > kernel {
        return Err(Error::invalid(format!("max_pool2d: kernel {kernel}, stride {stride}, padding {padding}")));
    }
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(Error::shape("max_pool2d: window larger than padded input"));
    }
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = E::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best || best_i == usize::MAX {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    let total = x.numel();
    Ok(Tensor::from_op(
        "max_pool2d",
        out,
        out_shape(n, c, ho, wo, batched),
        vec![x.clone()],
        Box::new(move |ctx| {
            let mut gx = vec![E::zero(); total];
            for (&i, &g) in argmax.iter().zip(ctx.grad) {
                gx[i] += g;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Adaptive-pooling window `[floor(i·n/out), ceil((i+1)·n/out))`.
pub(crate) fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling to `out_h × out_w`.
pub fn adaptive_avg_pool<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let (n, c, h, w, batched) = nchw(x.shape(), "adaptive_avg_pool")?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::shape(format!(
            "adaptive_avg_pool: output {out_h}×{out_w} must be non-empty and within input {h}×{w}"
        )));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..out_h {
            let (y0, y1) = adaptive_window(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1) = adaptive_window(j, w, out_w);
                let mut acc = E::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += xd[base + y * w + xx];
                    }
                }
                out.push(acc / E::from_usize((y1 - y0) * (x1 - x0)).unwrap());
            }
        }
    }
    let total = x.numel();
    Ok(Tensor::from_op(
        "adaptive_avg_pool",
        out,
        out_shape(n, c, out_h, out_w, batched),
        vec![x.clone()],
        Box::new(move |ctx| {
            let mut gx = vec![E::zero(); total];
            for plane in 0..n * c {
                let base = plane * h * w;
                for i in 0..out_h {
                    let (y0, y1) = adaptive_window(i, h, out_h);
                    for j in 0..out_w {
                        let (x0, x1) = adaptive_window(j, w, out_w);
                        let g = ctx.grad[(plane * out_h + i) * out_w + j]
                            / E::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                gx[base + y * w + xx] += g;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Source taps for half-pixel bilinear resampling of one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn bilinear_resize<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let (n, c, h, w, batched) = nchw(x.shape(), "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize: empty output"));
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &xd[plane * h * w..][..h * w];
        for a in &ty {
            let fy = E::from_f64_lossy(a.frac);
            for b in &tx {
                let fx = E::from_f64_lossy(b.frac);
                let top = p[a.lo * w + b.lo] * (E::one() - fx) + p[a.lo * w + b.hi] * fx;
                let bot = p[a.hi * w + b.lo] * (E::one() - fx) + p[a.hi * w + b.hi] * fx;
                out.push(top * (E::one() - fy) + bot * fy);
            }
        }
    }
    let total = x.numel();
    Ok(Tensor::from_op(
        "bilinear_resize",
        out,
        out_shape(n, c, out_h, out_w, batched),
        vec![x.clone()],
        Box::new(move |ctx| {
            let mut gx = vec![E::zero(); total];
            let mut gi = ctx.grad.iter();
            for plane in 0..n * c {
                let p = &mut gx[plane * h * w..][..h * w];
                for a in &ty {
                    let fy = E::from_f64_lossy(a.frac);
                    for b in &tx {
                        let fx = E::from_f64_lossy(b.frac);
                        let g = *gi.next().unwrap();
                        p[a.lo * w + b.lo] += g * (E::one() - fy) * (E::one() - fx);
                        p[a.lo * w + b.hi] += g * (E::one() - fy) * fx;
                        p[a.hi * w + b.lo] += g * fy * (E::one() - fx);
                        p[a.hi * w + b.hi] += g * fy * fx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}
