//! Elementwise, shape, reduction and dense-algebra ops.

use super::element::{gemm, MatMut, MatRef};
use super::{numel_of, BackwardFn, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn unary<E: Element>(
    x: &Tensor<E>,
    op: &'static str,
    f: impl Fn(E) -> E,
    backward: BackwardFn<E>,
) -> Tensor<E> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(op, data, x.shape().to_vec(), vec![x.clone()], backward)
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|&g| -g).collect())]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs(0).then(|| ctx.grad.iter().zip(b).map(|(&g, &v)| g * v).collect());
                let gb = ctx.needs(1).then(|| ctx.grad.iter().zip(a).map(|(&g, &v)| g * v).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, s: E) -> Tensor<E> {
        unary(self, "scale", |v| v * s, Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|&g| g * s).collect())]))
    }

    pub fn add_scalar(&self, s: E) -> Tensor<E> {
        unary(self, "add_scalar", |v| v + s, Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    pub fn relu(&self) -> Tensor<E> {
        unary(
            self,
            "relu",
            |v| if v > E::zero() { v } else { E::zero() },
            Box::new(|ctx| {
                let x = ctx.inputs[0].data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > E::zero() { g } else { E::zero() })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        unary(
            self,
            "sigmoid",
            sigmoid_scalar,
            Box::new(|ctx| {
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(ctx.output)
                        .map(|(&g, &s)| g * s * (E::one() - s))
                        .collect(),
                )]
            }),
        )
    }

    pub fn sum(&self) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = E::from_usize(self.numel()).expect("numel fits");
        self.sum().scale(E::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel_of(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(self.share_with_shape(shape.to_vec(), "reshape"))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let nd = self.dims();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("invalid permutation {axes:?} for {nd} axes")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(permute_data(ctx.grad, &out_shape_c, &inverse))]),
        ))
    }

    /// Slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![E::zero(); total];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    let src = &ctx.grad[o * len * inner..(o + 1) * len * inner];
                    g[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<E>>> {
        if axis >= self.dims() || sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape()
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let t = self.narrow(axis, start, len);
                start += len;
                t
            })
            .collect()
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| x[idx(k)]).fold(E::neg_infinity(), E::max);
                let mut z = E::zero();
                for k in 0..n {
                    let e = (x[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                let (y, g) = (ctx.output, ctx.grad);
                let mut gx = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: E = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `x[c, ...] * s[c]` for `C×…` or `N×C×…` inputs.
    pub fn mul_channel(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        let (batch, channels, spatial) = channel_layout(self.shape(), s, "mul_channel")?;
        let (x, sv) = (self.data(), s.data());
        let mut out = vec![E::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for i in base..base + spatial {
                    out[i] = x[i] * sv[c];
                }
            }
        }
        Ok(Tensor::from_op(
            "mul_channel",
            out,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(move |ctx| {
                let (x, sv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let gx = ctx.needs(0).then(|| {
                    let mut gx = vec![E::zero(); x.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            for i in base..base + spatial {
                                gx[i] = g[i] * sv[c];
                            }
                        }
                    }
                    gx
                });
                let gs = ctx.needs(1).then(|| {
                    let mut gs = vec![E::zero(); channels];
                    for b in 0..batch {
                        for (c, acc) in gs.iter_mut().enumerate() {
                            let base = (b * channels + c) * spatial;
                            *acc += (base..base + spatial).map(|i| g[i] * x[i]).sum();
                        }
                    }
                    gs
                });
                vec![gx, gs]
            }),
        ))
    }

    /// Broadcasts a length-`C` vector to `C×h×w`.
    pub fn broadcast_hw(&self, h: usize, w: usize) -> Result<Tensor<E>> {
        if self.dims() != 1 || h == 0 || w == 0 {
            return Err(Error::shape(format!("broadcast_hw expects a vector, got {:?}", self.shape())));
        }
        let c = self.numel();
        let hw = h * w;
        let mut out = Vec::with_capacity(c * hw);
        for &v in self.data() {
            out.extend(std::iter::repeat_n(v, hw));
        }
        Ok(Tensor::from_op(
            "broadcast_hw",
            out,
            vec![c, h, w],
            vec![self.clone()],
            Box::new(move |ctx| {
                vec![Some((0..c).map(|i| ctx.grad[i * hw..(i + 1) * hw].iter().copied().sum()).collect())]
            }),
        ))
    }
}

pub(crate) fn sigmoid_scalar<E: Element>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

fn channel_layout<E: Element>(shape: &[usize], s: &Tensor<E>, op: &str) -> Result<(usize, usize, usize)> {
    let (batch, channels, rest) = match shape.len() {
        0 => return Err(Error::shape(format!("{op}: scalar input"))),
        4 => (shape[0], shape[1], &shape[2..]),
        _ => (1, shape[0], &shape[1..]),
    };
    if s.dims() != 1 || s.numel() != channels {
        return Err(Error::shape(format!(
            "{op}: scale vector {:?} does not match channels of {shape:?}",
            s.shape()
        )));
    }
    Ok((batch, channels, rest.iter().product()))
}

fn permute_data<E: Copy>(src: &[E], shape: &[usize], axes: &[usize]) -> Vec<E> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<E: Element>(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
    let nd = first.dims();
    if axis >= nd {
        return Err(Error::shape(format!("concat axis {axis} out of range")));
    }
    for p in parts {
        let ok = p.dims() == nd
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(format!(
                "concat: {:?} incompatible with {:?} on axis {axis}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &e) in parts.iter().zip(&extents) {
            data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        "concat",
        data,
        shape,
        parts.to_vec(),
        Box::new(move |ctx| {
            let mut grads: Vec<Vec<E>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &e) in grads.iter_mut().zip(&extents) {
                    g.extend_from_slice(&ctx.grad[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads.into_iter().enumerate().map(|(i, g)| ctx.needs(i).then_some(g)).collect()
        }),
    ))
}

/// `[M,K] · [K,N] → [M,N]`.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.dims() != 2 || b.dims() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(format!("matmul: {:?} · {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![E::zero(); m * n];
    gemm(
        E::one(),
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, n),
        E::zero(),
        MatMut::row_major(&mut out, m, n),
    );
    Ok(Tensor::from_op(
        "matmul",
        out,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let g = MatRef::row_major(ctx.grad, m, n);
            let ga = ctx.needs(0).then(|| {
                let mut ga = vec![E::zero(); m * k];
                let bt = MatRef::row_major(ctx.inputs[1].data(), k, n).t();
                gemm(E::one(), g, bt, E::zero(), MatMut::row_major(&mut ga, m, k));
                ga
            });
            let gb = ctx.needs(1).then(|| {
                let mut gb = vec![E::zero(); k * n];
                let at = MatRef::row_major(ctx.inputs[0].data(), m, k).t();
                gemm(E::one(), at, g, E::zero(), MatMut::row_major(&mut gb, k, n));
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// Affine map over the last axis: `x[…, In] · W[In, Out] + b[Out]`.
pub fn linear<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: Option<&Tensor<E>>) -> Result<Tensor<E>> {
    if w.dims() != 2 || x.dims() == 0 || *x.shape().last().unwrap() != w.shape()[0] {
        return Err(Error::shape(format!("linear: input {:?} vs weight {:?}", x.shape(), w.shape())));
    }
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = b {
        if b.dims() != 1 || b.numel() != fan_out {
            return Err(Error::shape(format!("linear: bias {:?} vs {fan_out} outputs", b.shape())));
        }
    }
    let rows = x.numel() / fan_in;
    let mut out = vec![E::zero(); rows * fan_out];
    if let Some(b) = b {
        for r in 0..rows {
            out[r * fan_out..(r + 1) * fan_out].copy_from_slice(b.data());
        }
    }
    gemm(
        E::one(),
        MatRef::row_major(x.data(), rows, fan_in),
        MatRef::row_major(w.data(), fan_in, fan_out),
        if b.is_some() { E::one() } else { E::zero() },
        MatMut::row_major(&mut out, rows, fan_out),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = fan_out;
    let mut inputs = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        "linear",
        out,
        shape,
        inputs,
        Box::new(move |ctx| {
            let g = MatRef::row_major(ctx.grad, rows, fan_out);
            let gx = ctx.needs(0).then(|| {
                let mut gx = vec![E::zero(); rows * fan_in];
                let wt = MatRef::row_major(ctx.inputs[1].data(), fan_in, fan_out).t();
                gemm(E::one(), g, wt, E::zero(), MatMut::row_major(&mut gx, rows, fan_in));
                gx
            });
            let gw = ctx.needs(1).then(|| {
                let mut gw = vec![E::zero(); fan_in * fan_out];
                let xt = MatRef::row_major(ctx.inputs[0].data(), rows, fan_in).t();
                gemm(E::one(), xt, g, E::zero(), MatMut::row_major(&mut gw, fan_in, fan_out));
                gw
            });
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut gb = vec![E::zero(); fan_out];
                    for r in 0..rows {
                        for (acc, &v) in gb.iter_mut().zip(&ctx.grad[r * fan_out..(r + 1) * fan_out]) {
                            *acc += v;
                        }
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}
