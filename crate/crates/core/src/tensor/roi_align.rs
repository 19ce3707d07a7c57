//! Bilinear RoI-align over a single `C×H×W` feature map.

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Axis-aligned box `(x1, y1, x2, y2)` in input-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl RoiBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn clip(&self, width: f32, height: f32) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn scale(&self, sx: f32, sy: f32) -> Self {
        Self { x1: self.x1 * sx, y1: self.y1 * sy, x2: self.x2 * sx, y2: self.y2 * sy }
    }
}

const SAMPLING: usize = 2;

/// Bilinear weights of one sample point, or nothing when it falls outside.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, out: &mut Vec<(usize, f64)>, scale: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let (y_lo, y_hi) = if y as usize >= h - 1 {
        y = (h - 1) as f64;
        (h - 1, h - 1)
    } else {
        (y as usize, y as usize + 1)
    };
    let (x_lo, x_hi) = if x as usize >= w - 1 {
        x = (w - 1) as f64;
        (w - 1, w - 1)
    } else {
        (x as usize, x as usize + 1)
    };
    let (ly, lx) = (y - y_lo as f64, x - x_lo as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y_lo * w + x_lo, hy * hx * scale));
    out.push((y_lo * w + x_hi, hy * lx * scale));
    out.push((y_hi * w + x_lo, ly * hx * scale));
    out.push((y_hi * w + x_hi, ly * lx * scale));
}

/// RoI-align with 2×2 bilinear samples per output cell, averaged.
///
/// Feature cell `(i, j)` is centred at image position
/// `((j + 0.5)·stride, (i + 0.5)·stride)`; boxes are given in image pixels and
/// mapped with `spatial_scale = 1/stride`. Output is `N×C×res×res`.
pub fn roi_align<E: Element>(feature: &Tensor<E>, boxes: &[RoiBox], spatial_scale: f32, res: usize) -> Result<Tensor<E>> {
    let [c, h, w] = *feature.shape() else {
        return Err(Error::shape(format!("roi_align: feature must be C×H×W, got {:?}", feature.shape())));
    };
    if boxes.is_empty() || res == 0 {
        return Err(Error::invalid("roi_align: needs at least one box and a positive resolution"));
    }
    let cells = res * res;
    // taps[b][cell] = list of (spatial index, weight) shared by all channels
    let mut taps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(boxes.len() * cells);
    for (bi, b) in boxes.iter().enumerate() {
        if !b.is_valid() {
            return Err(Error::invalid(format!("roi_align: degenerate box #{bi}: {b:?}")));
        }
        let s = spatial_scale as f64;
        let (x0, y0) = (b.x1 as f64 * s - 0.5, b.y1 as f64 * s - 0.5);
        let (bin_w, bin_h) = ((b.x2 - b.x1) as f64 * s / res as f64, (b.y2 - b.y1) as f64 * s / res as f64);
        let wt = 1.0 / (SAMPLING * SAMPLING) as f64;
        for py in 0..res {
            for px in 0..res {
                let mut cell = Vec::with_capacity(4 * SAMPLING * SAMPLING);
                for iy in 0..SAMPLING {
                    let y = y0 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / SAMPLING as f64;
                    for ix in 0..SAMPLING {
                        let x = x0 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / SAMPLING as f64;
                        bilinear_taps(y, x, h, w, &mut cell, wt);
                    }
                }
                taps.push(cell);
            }
        }
    }
    let f = feature.data();
    let n = boxes.len();
    let mut out = vec![E::zero(); n * c * cells];
    for bi in 0..n {
        for cell in 0..cells {
            let tl = &taps[bi * cells + cell];
            for ci in 0..c {
                let plane = &f[ci * h * w..][..h * w];
                let mut acc = E::zero();
                for &(idx, wgt) in tl {
                    acc += plane[idx] * E::from_f64_lossy(wgt);
                }
                out[(bi * c + ci) * cells + cell] = acc;
            }
        }
    }
    let total = feature.numel();
    Ok(Tensor::from_op(
        "roi_align",
        out,
        vec![n, c, res, res],
        vec![feature.clone()],
        Box::new(move |ctx| {
            let mut gf = vec![E::zero(); total];
            for bi in 0..n {
                for cell in 0..cells {
                    let tl = &taps[bi * cells + cell];
                    for ci in 0..c {
                        let g = ctx.grad[(bi * c + ci) * cells + cell];
                        let plane = &mut gf[ci * h * w..][..h * w];
                        for &(idx, wgt) in tl {
                            plane[idx] += g * E::from_f64_lossy(wgt);
                        }
                    }
                }
            }
            vec![Some(gf)]
        }),
    ))
}
