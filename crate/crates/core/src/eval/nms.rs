use crate::error::{Error, Result};
use crate::tensor::RoiBox;

fn intersection(a: &RoiBox, b: &RoiBox) -> f64 {
    let w = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let h = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    w * h
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &RoiBox, b: &RoiBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::invalid(format!("iou: degenerate box {a:?} / {b:?}")));
    }
    Ok(iou_unchecked(a, b))
}

/// IoU without validation; 0 when the union is empty.
pub fn iou_unchecked(a: &RoiBox, b: &RoiBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy suppression. Returns kept indices in descending score order; equal
/// scores keep input order. A box is dropped when its IoU with a kept box
/// exceeds `thr`.
pub fn nms(boxes: &[RoiBox], scores: &[f32], thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou_unchecked(&boxes[k], &boxes[i]) <= thr) {
            keep.push(i);
        }
    }
    keep
}
