//! First stage: center heatmaps and log-size regression over the attention
//! pyramid, decoded into likelihood-scored proposals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, STRIDES};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Param};
use crate::tensor::{focal_loss, masked_l1, Element, FocalParams, RoiBox, Tensor};

/// Prior probability 0.1 for the heatmap bias.
pub const HEATMAP_BIAS: f64 = -2.19;
pub const SIZE_LOSS_WEIGHT: f64 = 0.1;
const OUT_INIT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: RoiBox,
    pub p1: f32,
    /// 0, 1, 2 for P3, P4, P5.
    pub level: usize,
}

/// Raw outputs for one level: logits `1×H×W` and log sizes `2×H×W` (width,
/// height, in units of the level stride).
#[derive(Clone, Debug)]
pub struct LevelPrediction<E: Element> {
    pub heatmap: Tensor<E>,
    pub size: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct ProposalHead<E: Element> {
    pub hm_conv: Conv2d<E>,
    pub hm_out: Conv2d<E>,
    pub size_conv: Conv2d<E>,
    pub size_out: Conv2d<E>,
}

impl<E: Element> ProposalHead<E> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let hm_conv = Conv2d::same3("proposal.heatmap.conv", channels, channels, rng);
        let size_conv = Conv2d::same3("proposal.size.conv", channels, channels, rng);
        // small output weights keep initial logits near the bias
        let mut hm_out = Conv2d::pointwise("proposal.heatmap.out", channels, 1, rng);
        hm_out.weight = Param::uniform("proposal.heatmap.out.weight", &[1, channels, 1, 1], OUT_INIT, rng);
        hm_out.bias.tensor.update_data(|d| d.fill(E::from_f64_lossy(HEATMAP_BIAS)));
        let mut size_out = Conv2d::pointwise("proposal.size.out", channels, 2, rng);
        size_out.weight = Param::uniform("proposal.size.out.weight", &[2, channels, 1, 1], OUT_INIT, rng);
        Self { hm_conv, hm_out, size_conv, size_out }
    }

    pub fn predict(&self, attn: &FeaturePyramid<E>) -> Result<Vec<LevelPrediction<E>>> {
        attn.levels
            .iter()
            .map(|x| {
                Ok(LevelPrediction {
                    heatmap: self.hm_out.forward(&self.hm_conv.forward(x)?.relu())?,
                    size: self.size_out.forward(&self.size_conv.forward(x)?.relu())?,
                })
            })
            .collect()
    }
}

impl<E: Element> Module<E> for ProposalHead<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        for c in [&self.hm_conv, &self.hm_out, &self.size_conv, &self.size_out] {
            c.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for c in [&mut self.hm_conv, &mut self.hm_out, &mut self.size_conv, &mut self.size_out] {
            c.visit_mut(f);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Local 3×3 maxima of the sigmoid heatmap above `score_floor`, merged over
/// levels, sorted by `p1` descending (ties: level, then row-major cell), capped.
pub fn decode<E: Element>(
    preds: &[LevelPrediction<E>],
    image_size: (usize, usize),
    max_proposals: usize,
    score_floor: f64,
) -> Vec<Proposal> {
    let (img_h, img_w) = (image_size.0 as f32, image_size.1 as f32);
    // (p1, level, cell, box)
    let mut cands: Vec<(f64, usize, usize, RoiBox)> = Vec::new();
    for (level, pred) in preds.iter().enumerate() {
        let s = pred.heatmap.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let p: Vec<f64> = pred.heatmap.data().iter().map(|&v| sigmoid(v.to_f64_lossy())).collect();
        let size = pred.size.data();
        let stride = STRIDES[level] as f64;
        for r in 0..h {
            for c in 0..w {
                let v = p[r * w + c];
                if v <= score_floor || v.is_nan() {
                    continue;
                }
                let mut is_max = true;
                'nb: for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        if p[rr as usize * w + cc as usize] > v {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                let bw = size[r * w + c].to_f64_lossy().clamp(-10.0, 10.0).exp() * stride;
                let bh = size[h * w + r * w + c].to_f64_lossy().clamp(-10.0, 10.0).exp() * stride;
                let (cx, cy) = ((c as f64 + 0.5) * stride, (r as f64 + 0.5) * stride);
                let b = RoiBox::new((cx - bw / 2.0) as f32, (cy - bh / 2.0) as f32, (cx + bw / 2.0) as f32, (cy + bh / 2.0) as f32)
                    .clip(img_w, img_h);
                if b.is_valid() {
                    cands.push((v, level, r * w + c, b));
                }
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.truncate(max_proposals);
    cands.into_iter().map(|(p1, level, _, bbox)| Proposal { bbox, p1: p1 as f32, level }).collect()
}

/// Ground truth for one level, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub height: usize,
    pub width: usize,
    /// `H×W`, values in [0, 1], 1 exactly at assigned centers.
    pub heatmap: Vec<f32>,
    /// `2×H×W` log (width, height) over stride at center cells.
    pub size: Vec<f32>,
    /// `H×W`, 1 at center cells.
    pub mask: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Targets {
    pub levels: Vec<LevelTargets>,
}

impl Stage1Targets {
    pub fn num_centers(&self) -> usize {
        self.levels.iter().map(|l| l.mask.iter().filter(|&&m| m > 0.0).count()).sum()
    }
}

/// Pyramid level by the box's longer side.
pub fn assign_level(b: &RoiBox) -> usize {
    let side = b.width().max(b.height());
    if side <= 64.0 {
        0
    } else if side <= 128.0 {
        1
    } else {
        2
    }
}

/// Gaussian radius (in cells) such that a corner shift keeps IoU ≥ `min_overlap`.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

pub fn assign_targets(gt: &[RoiBox], image_size: (usize, usize)) -> Result<Stage1Targets> {
    let (img_h, img_w) = image_size;
    let mut levels: Vec<LevelTargets> = STRIDES
        .iter()
        .map(|&s| {
            let (h, w) = (img_h.div_ceil(s), img_w.div_ceil(s));
            LevelTargets { height: h, width: w, heatmap: vec![0.0; h * w], size: vec![0.0; 2 * h * w], mask: vec![0.0; h * w] }
        })
        .collect();
    for (i, b) in gt.iter().enumerate() {
        if !b.is_valid() || b.area() <= 0.0 {
            return Err(Error::invalid(format!("assign_targets: degenerate box #{i}: {b:?}")));
        }
        let level = assign_level(b);
        let stride = STRIDES[level] as f64;
        let t = &mut levels[level];
        let (cx, cy) = b.center();
        let col = ((cx as f64 / stride).floor().max(0.0) as usize).min(t.width - 1);
        let row = ((cy as f64 / stride).floor().max(0.0) as usize).min(t.height - 1);
        let (bw, bh) = (b.width() as f64 / stride, b.height() as f64 / stride);
        let radius = gaussian_radius(bh, bw, 0.7).floor().max(0.0) as isize;
        let sigma = (2 * radius + 1) as f64 / 6.0;
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let (r, c) = (row as isize + dr, col as isize + dc);
                if r < 0 || c < 0 || r >= t.height as isize || c >= t.width as isize {
                    continue;
                }
                let g = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp() as f32;
                let idx = r as usize * t.width + c as usize;
                t.heatmap[idx] = t.heatmap[idx].max(g);
            }
        }
        let idx = row * t.width + col;
        t.heatmap[idx] = 1.0;
        t.mask[idx] = 1.0;
        t.size[idx] = bw.ln() as f32;
        t.size[t.height * t.width + idx] = bh.ln() as f32;
    }
    Ok(Stage1Targets { levels })
}

fn to_tensor<E: Element>(v: &[f32], shape: &[usize]) -> Result<Tensor<E>> {
    Tensor::new(v.iter().map(|&x| E::from_f64_lossy(x as f64)).collect(), shape)
}

/// Focal heatmap loss plus 0.1 × L1 size loss, both divided by `max(centers, 1)`.
pub fn stage1_loss<E: Element>(preds: &[LevelPrediction<E>], targets: &Stage1Targets) -> Result<Tensor<E>> {
    if preds.len() != targets.levels.len() {
        return Err(Error::shape("stage1_loss: level count mismatch"));
    }
    let norm = E::from_f64_lossy(1.0 / targets.num_centers().max(1) as f64);
    let mut total: Option<Tensor<E>> = None;
    for (p, t) in preds.iter().zip(&targets.levels) {
        let (h, w) = (t.height, t.width);
        if p.heatmap.shape() != [1, h, w] || p.size.shape() != [2, h, w] {
            return Err(Error::shape(format!(
                "stage1_loss: predictions {:?}/{:?} vs targets {h}×{w}",
                p.heatmap.shape(),
                p.size.shape()
            )));
        }
        let heat = focal_loss(&p.heatmap, &to_tensor(&t.heatmap, &[1, h, w])?, FocalParams::default())?;
        let mask2: Vec<f32> = t.mask.iter().chain(&t.mask).copied().collect();
        let size = masked_l1(&p.size, &to_tensor(&t.size, &[2, h, w])?, &to_tensor(&mask2, &[2, h, w])?)?;
        let level = heat.add(&size.scale(E::from_f64_lossy(SIZE_LOSS_WEIGHT)))?;
        total = Some(match total {
            Some(a) => a.add(&level)?,
            None => level,
        });
    }
    Ok(total.ok_or_else(|| Error::invalid("stage1_loss: no levels"))?.scale(norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_preds(image: (usize, usize), fill: f64) -> Vec<LevelPrediction<f64>> {
        STRIDES
            .iter()
            .map(|&s| {
                let (h, w) = (image.0.div_ceil(s), image.1.div_ceil(s));
                LevelPrediction { heatmap: Tensor::full(&[1, h, w], fill), size: Tensor::zeros(&[2, h, w]) }
            })
            .collect()
    }

    /// Turns targets into ideal predictions: logit ±30 and exact sizes.
    fn ideal_preds(t: &Stage1Targets) -> Vec<LevelPrediction<f64>> {
        t.levels
            .iter()
            .map(|l| LevelPrediction {
                heatmap: Tensor::new(l.heatmap.iter().map(|&v| if v == 1.0 { 30.0 } else { -30.0 }).collect(), &[1, l.height, l.width])
                    .unwrap(),
                size: Tensor::new(l.size.iter().map(|&v| v as f64).collect(), &[2, l.height, l.width]).unwrap(),
            })
            .collect()
    }

    #[test]
    fn very_negative_logits_decode_to_nothing() {
        assert!(decode(&empty_preds((320, 320), -1e4), (320, 320), 256, 0.01).is_empty());
    }

    #[test]
    fn single_peak_decodes_by_hand() {
        let mut preds = empty_preds((320, 320), -50.0);
        let (r, c) = (7, 11);
        preds[0].heatmap.update_data(|d| d[r * 40 + c] = 3.0);
        preds[0].size.update_data(|d| {
            d[r * 40 + c] = 4f64.ln();
            d[1600 + r * 40 + c] = 4f64.ln();
        });
        let out = decode(&preds, (320, 320), 256, 0.01);
        assert_eq!(out.len(), 1);
        let b = out[0].bbox;
        let (cx, cy) = ((c as f32 + 0.5) * 8.0, (r as f32 + 0.5) * 8.0);
        assert!((b.center().0 - cx).abs() < 1e-4 && (b.center().1 - cy).abs() < 1e-4);
        assert!((b.width() - 32.0).abs() < 1e-3 && (b.height() - 32.0).abs() < 1e-3);
        assert_eq!(out[0].level, 0);
        assert!((out[0].p1 as f64 - sigmoid(3.0)).abs() < 1e-6);
    }

    #[test]
    fn centered_box_lands_on_expected_cell() {
        let t = assign_targets(&[RoiBox::new(144.0, 144.0, 176.0, 176.0)], (320, 320)).unwrap();
        assert_eq!(t.levels[0].heatmap[20 * 40 + 20], 1.0);
        assert_eq!(t.num_centers(), 1);
        let out = decode(&ideal_preds(&t), (320, 320), 256, 0.01);
        assert_eq!(out.len(), 1);
        assert!((out[0].bbox.center().0 - 160.0).abs() <= 8.0);
        assert!((out[0].bbox.width() - 32.0).abs() < 1e-3);
    }

    #[test]
    fn target_edge_cases() {
        let t = assign_targets(&[], (320, 320)).unwrap();
        assert!(t.levels.iter().all(|l| l.heatmap.iter().all(|&v| v == 0.0)));
        let t = assign_targets(&[RoiBox::new(10.0, 10.0, 40.0, 40.0), RoiBox::new(250.0, 250.0, 290.0, 290.0)], (320, 320)).unwrap();
        assert_eq!(t.levels[0].heatmap.iter().filter(|&&v| v == 1.0).count(), 2);
        assert!(assign_targets(&[RoiBox::new(5.0, 5.0, 5.0, 9.0)], (320, 320)).is_err());
        assert_eq!(assign_level(&RoiBox::new(0.0, 0.0, 100.0, 20.0)), 1);
        assert_eq!(assign_level(&RoiBox::new(0.0, 0.0, 129.0, 20.0)), 2);
    }

    #[test]
    fn perfect_and_empty_losses() {
        let t = assign_targets(&[RoiBox::new(20.0, 30.0, 60.0, 90.0), RoiBox::new(150.0, 100.0, 300.0, 220.0)], (320, 320)).unwrap();
        assert!(stage1_loss(&ideal_preds(&t), &t).unwrap().item() < 1e-3);
        let t0 = assign_targets(&[], (320, 320)).unwrap();
        let l = stage1_loss(&empty_preds((320, 320), 0.3), &t0).unwrap().item();
        assert!(l.is_finite() && l > 0.0);
    }

    fn loss_oracle(preds: &[LevelPrediction<f64>], t: &Stage1Targets) -> f64 {
        let mut focal = 0.0;
        let mut l1 = 0.0;
        for (p, l) in preds.iter().zip(&t.levels) {
            let hw = l.height * l.width;
            for i in 0..hw {
                let x = p.heatmap.data()[i];
                let y = l.heatmap[i] as f64;
                let q = 1.0 / (1.0 + (-x).exp());
                focal += if y == 1.0 { -(1.0 - q).powi(2) * q.ln() } else { -(1.0 - y).powi(4) * q.powi(2) * (1.0 - q).ln() };
                if l.mask[i] > 0.0 {
                    l1 += (p.size.data()[i] - l.size[i] as f64).abs() + (p.size.data()[hw + i] - l.size[hw + i] as f64).abs();
                }
            }
        }
        (focal + 0.1 * l1) / t.num_centers().max(1) as f64
    }

    #[test]
    fn loss_matches_transcription_and_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let img = (64 + 32 * rng.random_range(0..3), 64 + 32 * rng.random_range(0..3));
            let n = rng.random_range(0..4);
            let boxes: Vec<RoiBox> = (0..n)
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..img.1 as f32 - 20.0), rng.random_range(0.0..img.0 as f32 - 20.0));
                    RoiBox::new(x, y, (x + rng.random_range(8.0..80.0)).min(img.1 as f32), (y + rng.random_range(8.0..80.0)).min(img.0 as f32))
                })
                .collect();
            let t = assign_targets(&boxes, img).unwrap();
            let preds: Vec<LevelPrediction<f64>> = t
                .levels
                .iter()
                .map(|l| LevelPrediction {
                    heatmap: Tensor::from_fn(&[1, l.height, l.width], |_| rng.random_range(-4.0..4.0)),
                    size: Tensor::from_fn(&[2, l.height, l.width], |_| rng.random_range(-1.0..2.0)),
                })
                .collect();
            let l = stage1_loss(&preds, &t).unwrap().item();
            assert!((l - loss_oracle(&preds, &t)).abs() < 1e-6);
            assert!(l >= 0.0);
        }
        let t = assign_targets(&[RoiBox::new(4.0, 6.0, 30.0, 40.0)], (64, 64)).unwrap();
        let inputs: Vec<Tensor<f64>> = t
            .levels
            .iter()
            .flat_map(|l| {
                [
                    Tensor::from_fn(&[1, l.height, l.width], |_| rng.random_range(-2.0..2.0)),
                    Tensor::from_fn(&[2, l.height, l.width], |_| rng.random_range(-1.0..1.0)),
                ]
            })
            .collect();
        let r = grad_check(
            |v| {
                let preds: Vec<_> = v.chunks(2).map(|c| LevelPrediction { heatmap: c[0].clone(), size: c[1].clone() }).collect();
                stage1_loss(&preds, &t)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn heatmap_bias_starts_at_prior() {
        let head = ProposalHead::<f32>::new(8, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(head.hm_out.bias.tensor.data().iter().all(|&b| (b as f64 - HEATMAP_BIAS).abs() < 1e-6));
        let attn = FeaturePyramid::new([Tensor::ones(&[8, 8, 8]), Tensor::ones(&[8, 4, 4]), Tensor::ones(&[8, 2, 2])]);
        let p = head.predict(&attn).unwrap();
        assert_eq!(p[1].heatmap.shape(), &[1, 4, 4]);
        assert_eq!(p[2].size.shape(), &[2, 2, 2]);
        let per_tower = 8 * 8 * 9 + 8;
        assert_eq!(head.count_parameters(), 2 * per_tower + (8 + 1) + (8 * 2 + 2));
    }
}
