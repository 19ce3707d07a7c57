//! Second stage: dual-resolution RoI features fused with the support
//! prototype, a single 128-wide head, and `p1·p2` scoring.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, STRIDES};
use crate::error::{Error, Result};
use crate::eval::{iou_unchecked, nms};
use crate::nn::{Conv2d, Linear, Module, Param};
use crate::proposal::Proposal;
use crate::tensor::{adaptive_avg_pool, bce_with_logits, bilinear_resize, concat, roi_align, smooth_l1, Element, RoiBox, Tensor};

pub const DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
const MAX_DLOG: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: RoiBox,
    /// `p1 · p2`.
    pub score: f32,
    pub p1: f32,
    pub p2: f32,
    pub class: u32,
}

/// FPN level index (0 for P3) for a box of this area.
pub fn roi_level(b: &RoiBox) -> usize {
    let s = (b.area() as f64).max(1e-6).sqrt();
    let k = (4.0 + (s / 224.0).log2()).floor();
    (k.clamp(3.0, 5.0) as usize) - 3
}

/// Deltas `(dx, dy, dw, dh)` taking `from` to `to`.
pub fn encode_deltas(from: &RoiBox, to: &RoiBox) -> [f64; 4] {
    let (fw, fh) = (from.width() as f64, from.height() as f64);
    let (fx, fy) = (from.x1 as f64 + 0.5 * fw, from.y1 as f64 + 0.5 * fh);
    let (tw, th) = (to.width() as f64, to.height() as f64);
    let (tx, ty) = (to.x1 as f64 + 0.5 * tw, to.y1 as f64 + 0.5 * th);
    let [wx, wy, ww, wh] = DELTA_WEIGHTS;
    [wx * (tx - fx) / fw, wy * (ty - fy) / fh, ww * (tw / fw).ln(), wh * (th / fh).ln()]
}

pub fn apply_deltas(from: &RoiBox, d: [f64; 4]) -> RoiBox {
    let (fw, fh) = (from.width() as f64, from.height() as f64);
    let (fx, fy) = (from.x1 as f64 + 0.5 * fw, from.y1 as f64 + 0.5 * fh);
    let [wx, wy, ww, wh] = DELTA_WEIGHTS;
    let (cx, cy) = (fx + d[0] / wx * fw, fy + d[1] / wy * fh);
    let w = fw * (d[2] / ww).min(MAX_DLOG).exp();
    let h = fh * (d[3] / wh).min(MAX_DLOG).exp();
    RoiBox::new((cx - 0.5 * w) as f32, (cy - 0.5 * h) as f32, (cx + 0.5 * w) as f32, (cy + 0.5 * h) as f32)
}

fn repeat_batch<E: Element>(t: &Tensor<E>, n: usize) -> Result<Tensor<E>> {
    if n == 1 {
        return Ok(t.clone());
    }
    concat(&vec![t.clone(); n], 0)
}

#[derive(Clone, Debug)]
pub struct Dsa<E: Element> {
    pub conv1: Conv2d<E>,
    pub conv2: Conv2d<E>,
    pub conv3: Conv2d<E>,
}

/// `Conv3(cat(X, Y)) + cat(Conv1(X), Conv2(Y))` for matching shapes.
pub fn dsa_fuse<E: Element>(x: &Tensor<E>, y: &Tensor<E>, dsa: &Dsa<E>) -> Result<Tensor<E>> {
    if x.shape() != y.shape() || !(x.dims() == 3 || x.dims() == 4) {
        return Err(Error::shape(format!("dsa_fuse: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let axis = x.dims() - 3;
    let a = dsa.conv3.forward(&concat(&[x.clone(), y.clone()], axis)?)?;
    let b = concat(&[dsa.conv1.forward(x)?, dsa.conv2.forward(y)?], axis)?;
    a.add(&b)
}

impl<E: Element> Dsa<E> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::pointwise("roi.dsa.conv1", channels, channels / 2, rng),
            conv2: Conv2d::pointwise("roi.dsa.conv2", channels, channels - channels / 2, rng),
            conv3: Conv2d::same3("roi.dsa.conv3", 2 * channels, channels, rng),
        }
    }

    /// One support prototype `C×r×r` against `N×C×r×r` query RoIs. Conv3 is
    /// split along its input channels so the support half runs once.
    pub fn fuse_batched(&self, x: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
        let [n, c, r, r2] = *y.shape() else {
            return Err(Error::shape(format!("dsa: expected N×C×r×r query RoIs, got {:?}", y.shape())));
        };
        if x.shape() != [c, r, r2] {
            return Err(Error::shape(format!("dsa: prototype {:?} vs RoIs {:?}", x.shape(), y.shape())));
        }
        let x1 = x.reshape(&[1, c, r, r2])?;
        let w = &self.conv3.weight.tensor;
        let (wx, wy) = (w.narrow(1, 0, c)?, w.narrow(1, c, c)?);
        let spec = self.conv3.spec;
        let xa = crate::tensor::conv2d(&x1, &wx, None, spec)?;
        let ya = crate::tensor::conv2d(y, &wy, Some(&self.conv3.bias.tensor), spec)?;
        let a = ya.add(&repeat_batch(&xa, n)?)?;
        let b = concat(&[repeat_batch(&self.conv1.forward(&x1)?, n)?, self.conv2.forward(y)?], 1)?;
        a.add(&b)
    }
}

impl<E: Element> Module<E> for Dsa<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        for c in [&self.conv1, &self.conv2, &self.conv3] {
            c.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for c in [&mut self.conv1, &mut self.conv2, &mut self.conv3] {
            c.visit_mut(f);
        }
    }
}

/// `resize(g4 → 8×8) + g8`; works batched or not.
pub fn dual_scale_aggregate<E: Element>(g4: &Tensor<E>, g8: &Tensor<E>) -> Result<Tensor<E>> {
    let s = g8.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    bilinear_resize(g4, h, w)?.add(g8)
}

/// Classifier logits `N×1` and deltas `N×4`.
#[derive(Clone, Debug)]
pub struct HeadOutput<E: Element> {
    pub logits: Tensor<E>,
    pub deltas: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct RoiHead<E: Element> {
    pub dsa: Dsa<E>,
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
    pub cls: Linear<E>,
    pub reg: Linear<E>,
    /// Low and high RoI resolutions.
    pub res: [usize; 2],
}

impl<E: Element> RoiHead<E> {
    pub fn new(channels: usize, width: usize, res: [usize; 2], rng: &mut impl Rng) -> Self {
        let flat = channels * res[1] * res[1];
        Self {
            dsa: Dsa::new(channels, rng),
            fc1: Linear::new("roi.fc1", flat, width, rng),
            fc2: Linear::new("roi.fc2", width, width, rng),
            cls: Linear { weight: Param::uniform("roi.cls.weight", &[width, 1], 0.01, rng), bias: Param::zeros("roi.cls.bias", &[1]) },
            reg: Linear { weight: Param::uniform("roi.reg.weight", &[width, 4], 0.001, rng), bias: Param::zeros("roi.reg.bias", &[4]) },
            res,
        }
    }

    /// Flattened aggregate → FC → ReLU → FC → ReLU → (logit, deltas).
    pub fn head_forward(&self, agg: &Tensor<E>) -> Result<HeadOutput<E>> {
        let n = agg.shape()[0];
        let flat = agg.reshape(&[n, agg.numel() / n])?;
        let h = self.fc2.forward(&self.fc1.forward(&flat)?.relu())?.relu();
        Ok(HeadOutput { logits: self.cls.forward(&h)?, deltas: self.reg.forward(&h)? })
    }

    /// Runs the head over `boxes` (image pixels) and returns outputs in the
    /// same order. `support` holds the mined `C×G×G` prototype per level.
    pub fn forward(&self, query: &FeaturePyramid<E>, support: &FeaturePyramid<E>, boxes: &[RoiBox]) -> Result<HeadOutput<E>> {
        if boxes.is_empty() {
            return Err(Error::invalid("roi head: no boxes"));
        }
        let mut groups: [Vec<usize>; 3] = Default::default();
        for (i, b) in boxes.iter().enumerate() {
            groups[roi_level(b)].push(i);
        }
        let mut aggs = Vec::new();
        let mut order = Vec::with_capacity(boxes.len());
        for (level, idx) in groups.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let lb: Vec<RoiBox> = idx.iter().map(|&i| boxes[i]).collect();
            let feat = &query.levels[level];
            let scale = 1.0 / STRIDES[level] as f32;
            let mut fused = Vec::with_capacity(2);
            for &r in &self.res {
                let y = roi_align(feat, &lb, scale, r)?;
                let x = adaptive_avg_pool(&support.levels[level], r, r)?;
                fused.push(self.dsa.fuse_batched(&x, &y)?);
            }
            aggs.push(dual_scale_aggregate(&fused[0], &fused[1])?);
            order.extend_from_slice(idx);
        }
        let agg = if aggs.len() == 1 { aggs.pop().expect("one group") } else { concat(&aggs, 0)? };
        let out = self.head_forward(&agg)?;
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            return Ok(out);
        }
        // undo the level grouping
        let mut inv = vec![0; order.len()];
        for (pos, &o) in order.iter().enumerate() {
            inv[o] = pos;
        }
        let pick = |t: &Tensor<E>| -> Result<Tensor<E>> {
            let rows: Vec<Tensor<E>> = inv.iter().map(|&p| t.narrow(0, p, 1)).collect::<Result<_>>()?;
            concat(&rows, 0)
        };
        Ok(HeadOutput { logits: pick(&out.logits)?, deltas: pick(&out.deltas)? })
    }

    /// Scores, refines, suppresses and keeps the best `max_dets`.
    pub fn detect(
        &self,
        query: &FeaturePyramid<E>,
        support: &FeaturePyramid<E>,
        proposals: &[Proposal],
        image_size: (usize, usize),
        nms_thr: f64,
        max_dets: usize,
    ) -> Result<Vec<Detection>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<RoiBox> = proposals.iter().map(|p| p.bbox).collect();
        let out = self.forward(query, support, &boxes)?;
        let (img_h, img_w) = (image_size.0 as f32, image_size.1 as f32);
        let mut dets = Vec::with_capacity(proposals.len());
        for (i, p) in proposals.iter().enumerate() {
            let p2 = sigmoid(out.logits.data()[i].to_f64_lossy()) as f32;
            let d: [f64; 4] = std::array::from_fn(|k| out.deltas.data()[4 * i + k].to_f64_lossy());
            let bbox = apply_deltas(&p.bbox, d).clip(img_w, img_h);
            if bbox.is_valid() {
                dets.push(Detection { bbox, score: p.p1 * p2, p1: p.p1, p2, class: 1 });
            }
        }
        let keep = nms(&dets.iter().map(|d| d.bbox).collect::<Vec<_>>(), &dets.iter().map(|d| d.score).collect::<Vec<_>>(), nms_thr);
        Ok(keep.into_iter().take(max_dets).map(|i| dets[i]).collect())
    }
}

impl<E: Element> Module<E> for RoiHead<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.dsa.visit(f);
        for l in [&self.fc1, &self.fc2, &self.cls, &self.reg] {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.dsa.visit_mut(f);
        for l in [&mut self.fc1, &mut self.fc2, &mut self.cls, &mut self.reg] {
            l.visit_mut(f);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Proposals chosen for the second-stage loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Sample {
    pub boxes: Vec<RoiBox>,
    /// 1 for foreground.
    pub labels: Vec<f32>,
    /// Regression targets (zero for background).
    pub targets: Vec<[f32; 4]>,
}

impl Stage2Sample {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0.0).count()
    }
}

/// Labels proposals (plus the ground-truth boxes themselves) by max IoU and
/// samples up to `batch` of them with at most `pos_fraction` positives.
pub fn sample_proposals(
    proposals: &[Proposal],
    gt: &[RoiBox],
    iou_thr: f64,
    batch: usize,
    pos_fraction: f64,
    rng: &mut impl Rng,
) -> Stage2Sample {
    let cands: Vec<RoiBox> = proposals.iter().map(|p| p.bbox).chain(gt.iter().copied()).filter(|b| b.is_valid()).collect();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, b) in cands.iter().enumerate() {
        let best = gt.iter().enumerate().map(|(g, t)| (iou_unchecked(b, t), g)).fold((0.0, usize::MAX), |a, x| if x.0 > a.0 { x } else { a });
        if best.0 >= iou_thr {
            pos.push((i, best.1));
        } else {
            neg.push(i);
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = ((batch as f64 * pos_fraction).floor() as usize).min(pos.len());
    pos.truncate(max_pos);
    neg.truncate(batch - pos.len());
    let mut s = Stage2Sample { boxes: Vec::new(), labels: Vec::new(), targets: Vec::new() };
    for (i, g) in pos {
        s.boxes.push(cands[i]);
        s.labels.push(1.0);
        s.targets.push(encode_deltas(&cands[i], &gt[g]).map(|v| v as f32));
    }
    for i in neg {
        s.boxes.push(cands[i]);
        s.labels.push(0.0);
        s.targets.push([0.0; 4]);
    }
    s
}

/// `(Σ BCE + Σ_pos smoothL1(β=1)) / n_sampled`.
pub fn stage2_loss<E: Element>(out: &HeadOutput<E>, sample: &Stage2Sample) -> Result<Tensor<E>> {
    let n = sample.labels.len();
    if n == 0 || out.logits.shape() != [n, 1] || out.deltas.shape() != [n, 4] {
        return Err(Error::shape(format!("stage2_loss: {n} samples vs logits {:?}", out.logits.shape())));
    }
    let c = |v: f32| E::from_f64_lossy(v as f64);
    let labels = Tensor::new(sample.labels.iter().map(|&l| c(l)).collect(), &[n, 1])?;
    let mask = Tensor::new(sample.labels.iter().flat_map(|&l| [c(l); 4]).collect(), &[n, 4])?;
    let targets = Tensor::new(sample.targets.iter().flatten().map(|&t| c(t)).collect(), &[n, 4])?;
    let cls = bce_with_logits(&out.logits, &labels)?;
    let reg = smooth_l1(&out.deltas.mul(&mask)?, &targets.mul(&mask)?, 1.0)?;
    Ok(cls.add(&reg)?.scale(E::from_f64_lossy(1.0 / n as f64)))
}
