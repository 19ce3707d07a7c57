//! Detection metrics and the text/JSON report.

mod ap;
mod bench;
mod nms;

pub use ap::{ap_sweep, coco_thresholds, compute_ap, AreaRange, ScoredBox};
pub use bench::{bench, BenchResult};
pub use nms::{iou, iou_unchecked, nms};

use serde::{Deserialize, Serialize};

use crate::tensor::RoiBox;

/// Accuracy and cost figures for one evaluated model. Absent APs (no ground
/// truth in the area bucket) serialize as `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub fps: Option<f64>,
    pub params: Option<usize>,
    pub ckpt_bytes: Option<u64>,
}

impl MetricsReport {
    /// Accuracy fields from per-image detections and ground truth.
    pub fn from_detections(dets: &[Vec<ScoredBox>], gts: &[Vec<RoiBox>]) -> Self {
        let thrs = coco_thresholds();
        let (per, ap) = ap_sweep(dets, gts, &thrs, AreaRange::ALL);
        Self {
            ap,
            ap50: per[0],
            ap75: per[5],
            ap_s: ap_sweep(dets, gts, &thrs, AreaRange::SMALL).1,
            ap_m: ap_sweep(dets, gts, &thrs, AreaRange::MEDIUM).1,
            ap_l: ap_sweep(dets, gts, &thrs, AreaRange::LARGE).1,
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table; APs in percent.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let cols = [
            ("AP", pct(self.ap)),
            ("AP50", pct(self.ap50)),
            ("AP75", pct(self.ap75)),
            ("AP_s", pct(self.ap_s)),
            ("AP_m", pct(self.ap_m)),
            ("AP_l", pct(self.ap_l)),
            ("FPS", self.fps.map_or("-".into(), |f| format!("{f:.2}"))),
            ("Params", self.params.map_or("-".into(), |p| p.to_string())),
            ("Size(MB)", self.ckpt_bytes.map_or("-".into(), |b| format!("{:.2}", b as f64 / (1 << 20) as f64))),
        ];
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let mut head = String::new();
        let mut row = String::new();
        for ((h, v), w) in cols.iter().zip(&widths) {
            head.push_str(&format!("{h:>w$}  "));
            row.push_str(&format!("{v:>w$}  "));
        }
        format!("{}\n{}\n", head.trim_end(), row.trim_end())
    }
}
