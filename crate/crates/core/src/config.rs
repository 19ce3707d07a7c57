//! Run configuration. Every field has a default; a partial JSON file
//! overrides only what it names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Density, SynthParams};
use crate::error::{Error, Result};
use crate::rg_block::SpatialFusion;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// FPN width.
    pub channels: usize,
    /// Channels per segment in the height/width encoders.
    pub segment: usize,
    /// Support maps are pooled to `support_grid × support_grid` before mining.
    pub support_grid: usize,
    /// Hidden width of the branch-weight MLP is `channels / reduction`.
    pub reduction: usize,
    pub head_width: usize,
    pub cascade_stages: usize,
    /// Foreground IoU for second-stage sampling.
    pub iou_thr: f64,
    pub proposals: usize,
    pub roi_res: [usize; 2],
    pub score_floor: f64,
    pub fusion: SpatialFusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            segment: 8,
            support_grid: 8,
            reduction: 4,
            head_width: 128,
            cascade_stages: 1,
            iou_thr: 0.6,
            proposals: 256,
            roi_res: [4, 8],
            score_floor: 0.01,
            fusion: SpatialFusion::Strip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Iterations per phase (the reference schedule uses 20000).
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub momentum: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Learning-rate warmup iterations (linear from 0).
    pub warmup: usize,
    /// Proposals sampled per image for the second stage.
    pub roi_batch: usize,
    pub pos_fraction: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            iters: 2000,
            batch: 1,
            seed: 0,
            freeze_backbone: false,
            momentum: 0.9,
            grad_clip: 10.0,
            warmup: 100,
            roi_batch: 64,
            pos_fraction: 0.5,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// COCO-style annotation file; synthetic scenes are generated when absent.
    pub annotations: Option<PathBuf>,
    /// Class that is held out of base training and used for few-shot episodes.
    pub novel_class: u32,
    pub base_scenes: usize,
    pub base: SynthParams,
    /// Scenes the K-shot set is drawn from.
    pub novel: SynthParams,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            annotations: None,
            novel_class: crate::data::synth::ORE,
            base_scenes: 400,
            base: SynthParams::new(Density::Medium, crate::data::synth::BASE_CLASSES.to_vec()),
            novel: SynthParams::new(Density::Medium, vec![crate::data::synth::ORE]),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub nms_thr: f64,
    pub max_dets: usize,
    pub scenes: usize,
    pub density: Density,
    /// Seed offset separating held-out scenes from training scenes.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { nms_thr: 0.5, max_dets: 100, scenes: 100, density: Density::Medium, seed: 1_000_000 }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.cascade_stages != 1 {
            return Err(Error::invalid(format!("cascade_stages = {} (only a single stage is built)", m.cascade_stages)));
        }
        if m.segment == 0 || m.channels % m.segment != 0 {
            return Err(Error::invalid(format!("channels {} not divisible by segment {}", m.channels, m.segment)));
        }
        if m.support_grid == 0 || m.support_grid > 8 {
            return Err(Error::invalid("support_grid must be in 1..=8 (smallest support level is 8×8)"));
        }
        if m.roi_res[0] == 0 || m.roi_res[0] > m.roi_res[1] {
            return Err(Error::invalid(format!("roi_res {:?} must be increasing and positive", m.roi_res)));
        }
        if m.proposals == 0 || !(0.0..1.0).contains(&m.score_floor) {
            return Err(Error::invalid("proposals must be positive and score_floor in [0, 1)"));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::invalid("lr must be positive and momentum in [0, 1)"));
        }
        if t.batch != 1 {
            return Err(Error::invalid("only batch = 1 is supported"));
        }
        if t.roi_batch == 0 || !(0.0..=1.0).contains(&t.pos_fraction) {
            return Err(Error::invalid("roi_batch must be positive and pos_fraction in [0, 1]"));
        }
        Ok(())
    }

    /// Dotted paths whose values differ from the defaults.
    pub fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(Config::default()).expect("config serializes");
        diff("", &a, &b, &mut out);
        out
    }
}

fn diff(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, v) in x {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match y.get(k) {
                    Some(w) => diff(&p, v, w, out),
                    None => out.push(p),
                }
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_values() {
        let c = Config::default();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.batch, 1);
        assert_eq!(c.model.head_width, 128);
        assert_eq!(c.model.proposals, 256);
        assert_eq!(c.model.roi_res, [4, 8]);
        assert_eq!(c.model.iou_thr, 0.6);
        assert!(c.validate().is_ok());
        assert!(c.overrides().is_empty());
    }

    #[test]
    fn partial_file_overrides_named_fields() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"lr": 0.02, "iters": 10}, "model": {"fusion": "pointwise_only"}}"#).unwrap();
        let c = Config::load(&p).unwrap();
        assert_eq!(c.train.lr, 0.02);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.model.fusion, SpatialFusion::PointwiseOnly);
        assert_eq!(c.overrides(), vec!["model.fusion", "train.iters", "train.lr"]);
    }

    #[test]
    fn rejects_unsupported_cascade() {
        let mut c = Config::default();
        c.model.cascade_stages = 2;
        assert!(c.validate().is_err());
    }
}
