//! COCO-style average precision for a single foreground class.

use serde::{Deserialize, Serialize};

use super::nms::iou_unchecked;
use crate::tensor::RoiBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: RoiBox,
    pub score: f32,
}

/// Half-open area interval `(lo, hi]` in square pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: Self = Self { lo: 0.0, hi: f64::INFINITY };
    pub const SMALL: Self = Self { lo: 0.0, hi: 32.0 * 32.0 };
    pub const MEDIUM: Self = Self { lo: 32.0 * 32.0, hi: 96.0 * 96.0 };
    pub const LARGE: Self = Self { lo: 96.0 * 96.0, hi: f64::INFINITY };

    pub fn contains(&self, area: f64) -> bool {
        area > self.lo && area <= self.hi
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-image matching. Returns, for each detection in descending score order,
/// `(score, is_true_positive, ignored)`.
fn match_image(dets: &[ScoredBox], gts: &[RoiBox], thr: f64, range: AreaRange) -> Vec<(f32, bool, bool)> {
    // gts in range first; an out-of-range gt only absorbs a detection that
    // found no in-range partner
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| !range.contains(gts[g].area() as f64));
    let gt_ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g.area() as f64)).collect();
    let mut det_order: Vec<usize> = (0..dets.len()).collect();
    det_order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for &d in &det_order {
        let mut best = thr.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for &g in &gt_order {
            if taken[g] {
                continue;
            }
            if let Some(mm) = m {
                if !gt_ignored[mm] && gt_ignored[g] {
                    break;
                }
            }
            let v = iou_unchecked(&dets[d].bbox, &gts[g]);
            if v < best {
                continue;
            }
            best = v;
            m = Some(g);
        }
        match m {
            Some(g) => {
                taken[g] = true;
                out.push((dets[d].score, true, gt_ignored[g]));
            }
            None => out.push((dets[d].score, false, !range.contains(dets[d].bbox.area() as f64))),
        }
    }
    out
}

/// 101-point interpolated AP at one IoU threshold, or `None` when no ground
/// truth falls inside `range`.
pub fn compute_ap(dets: &[Vec<ScoredBox>], gts: &[Vec<RoiBox>], thr: f64, range: AreaRange) -> Option<f64> {
    assert_eq!(dets.len(), gts.len(), "compute_ap: image count mismatch");
    let npos: usize = gts.iter().flatten().filter(|g| range.contains(g.area() as f64)).count();
    if npos == 0 {
        return None;
    }
    let mut all: Vec<(f32, bool, bool)> = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        all.extend(match_image(d, g, thr, range));
    }
    // stable: equal scores keep image order
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for &(_, is_tp, ignored) in &all {
        if ignored {
            continue;
        }
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// AP at each threshold plus their mean over defined values.
pub fn ap_sweep(dets: &[Vec<ScoredBox>], gts: &[Vec<RoiBox>], thrs: &[f64], range: AreaRange) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = thrs.iter().map(|&t| compute_ap(dets, gts, t, range)).collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sb(b: RoiBox, s: f32) -> ScoredBox {
        ScoredBox { bbox: b, score: s }
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gts = vec![vec![RoiBox::new(0.0, 0.0, 50.0, 50.0), RoiBox::new(60.0, 60.0, 160.0, 170.0)], vec![RoiBox::new(5.0, 5.0, 45.0, 45.0)]];
        let dets: Vec<Vec<ScoredBox>> = gts.iter().map(|g| g.iter().map(|&b| sb(b, 1.0)).collect()).collect();
        for t in coco_thresholds() {
            assert_eq!(compute_ap(&dets, &gts, t, AreaRange::ALL), Some(1.0));
        }
        let none = vec![vec![], vec![]];
        assert_eq!(compute_ap(&none, &gts, 0.5, AreaRange::ALL), Some(0.0));
        assert_eq!(compute_ap(&dets, &gts, 0.5, AreaRange::SMALL), None);
    }

    #[test]
    fn half_precision_example() {
        // one gt, a false positive ranked above the true positive
        let g = RoiBox::new(0.0, 0.0, 40.0, 40.0);
        let dets = vec![vec![sb(RoiBox::new(100.0, 100.0, 140.0, 140.0), 0.9), sb(g, 0.8)]];
        let ap = compute_ap(&dets, &[vec![g]], 0.5, AreaRange::ALL).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    /// Independent evaluation: explicit greedy assignment in global score
    /// order with the full COCO priority rules, then the maximum precision at
    /// recall ≥ r for each of the 101 grid points.
    fn oracle(dets: &[Vec<ScoredBox>], gts: &[Vec<RoiBox>], thr: f64, range: AreaRange) -> Option<f64> {
        let inr = |b: &RoiBox| range.contains(b.area() as f64);
        let npos = gts.iter().flatten().filter(|g| inr(g)).count();
        if npos == 0 {
            return None;
        }
        let mut flags: Vec<(f32, usize, usize, bool, bool)> = Vec::new(); // score, image, rank, tp, ignored
        for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.sort_by(|&a, &b| d[b].score.partial_cmp(&d[a].score).unwrap().then(a.cmp(&b)));
            let mut used = vec![false; g.len()];
            for (rank, &di) in idx.iter().enumerate() {
                // in-range gts first, then out-of-range ones, each by best IoU
                let mut pick: Option<usize> = None;
                for want_in in [true, false] {
                    let mut best_v = -1.0;
                    for (gi, gb) in g.iter().enumerate() {
                        if used[gi] || inr(gb) != want_in {
                            continue;
                        }
                        let v = iou_unchecked(&d[di].bbox, gb);
                        // later candidates win exact ties
                        if v >= thr.min(1.0 - 1e-10) && v >= best_v {
                            best_v = v;
                            pick = Some(gi);
                        }
                    }
                    if pick.is_some() {
                        break;
                    }
                }
                match pick {
                    Some(gi) => {
                        used[gi] = true;
                        flags.push((d[di].score, img, rank, true, !inr(&g[gi])));
                    }
                    None => flags.push((d[di].score, img, rank, false, !inr(&d[di].bbox))),
                }
            }
        }
        flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let kept: Vec<bool> = flags.iter().filter(|f| !f.4).map(|f| f.3).collect();
        let mut pr = Vec::new();
        let mut tp = 0;
        for (i, &t) in kept.iter().enumerate() {
            tp += t as usize;
            pr.push((tp as f64 / (i + 1) as f64, tp as f64 / npos as f64));
        }
        let mut s = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            s += pr.iter().filter(|p| p.1 >= r).map(|p| p.0).fold(0.0, f64::max);
        }
        Some(s / 101.0)
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<ScoredBox>>, Vec<Vec<RoiBox>>) {
        let images = rng.random_range(1..4);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..images {
            let ng = rng.random_range(0..4);
            let g: Vec<RoiBox> = (0..ng)
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..150.0f32), rng.random_range(0.0..150.0f32));
                    let s = rng.random_range(10.0..140.0f32);
                    RoiBox::new(x, y, x + s, y + s * rng.random_range(0.6..1.4))
                })
                .collect();
            let nd = rng.random_range(0..4);
            let d: Vec<ScoredBox> = (0..nd)
                .map(|_| {
                    let score = rng.random_range(0..5) as f32 / 5.0;
                    if !g.is_empty() && rng.random_bool(0.7) {
                        let b = g[rng.random_range(0..g.len())];
                        let mut j = |v: f32| v + rng.random_range(-8.0..8.0);
                        let (x1, y1) = (j(b.x1), j(b.y1));
                        sb(RoiBox::new(x1, y1, j(b.x2).max(x1 + 2.0), j(b.y2).max(y1 + 2.0)), score)
                    } else {
                        let (x, y) = (rng.random_range(0.0..150.0f32), rng.random_range(0.0..150.0f32));
                        sb(RoiBox::new(x, y, x + rng.random_range(10.0..120.0), y + rng.random_range(10.0..120.0)), score)
                    }
                })
                .collect();
            dets.push(d);
            gts.push(g);
        }
        (dets, gts)
    }

    #[test]
    fn matches_oracle_on_small_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..600 {
            let (dets, gts) = random_case(&mut rng);
            for &t in &[0.5, 0.75, 0.9] {
                for range in [AreaRange::ALL, AreaRange::MEDIUM, AreaRange::LARGE] {
                    let (a, b) = (compute_ap(&dets, &gts, t, range), oracle(&dets, &gts, t, range));
                    match (a, b) {
                        (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                        (a, b) => assert_eq!(a, b),
                    }
                }
            }
        }
    }

    #[test]
    fn threshold_monotone_and_mean_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..300 {
            let (dets, gts) = random_case(&mut rng);
            let (per, mean) = ap_sweep(&dets, &gts, &coco_thresholds(), AreaRange::ALL);
            let Some(mean) = mean else { continue };
            let per: Vec<f64> = per.into_iter().flatten().collect();
            assert!(per[0] >= per[5] && per[5] >= 0.0);
            let lo = per.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = per.iter().copied().fold(0.0, f64::max);
            assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
            assert!((0.0..=1.0).contains(&mean));
        }
    }

    #[test]
    fn adding_a_correct_top_detection_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..300 {
            let (mut dets, gts) = random_case(&mut rng);
            let Some(img) = gts.iter().position(|g| !g.is_empty()) else { continue };
            let before = compute_ap(&dets, &gts, 0.5, AreaRange::ALL).unwrap();
            // an exact copy of some gt, above every existing score
            let g = gts[img][rng.random_range(0..gts[img].len())];
            if dets[img].iter().any(|d| iou_unchecked(&d.bbox, &g) >= 0.5) {
                continue;
            }
            dets[img].push(sb(g, 2.0));
            let after = compute_ap(&dets, &gts, 0.5, AreaRange::ALL).unwrap();
            assert!(after >= before - 1e-12, "{before} -> {after}");
        }
    }
}
