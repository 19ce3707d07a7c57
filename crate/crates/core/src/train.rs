//! Base training on synthetic base classes, few-shot fine-tuning on the
//! novel class, and held-out evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::config::Config;
use crate::data::{sample_episode, support_set, synth_scene, Dataset, Scene, SynthParams};
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ScoredBox};
use crate::model::OreFsDet;
use crate::nn::Module;
use crate::tensor::{no_grad, RoiBox, Tensor};

/// SplitMix64 over a sequence of words; stable stream separation.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const BASE_STREAM: u64 = 1;
const SHOT_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const FINETUNE_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: String,
    pub iter: usize,
    pub loss: f64,
    pub stage1: f64,
    pub stage2: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// SGD with momentum and global-norm clipping over trainable parameters.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip: f64) -> Self {
        Self { lr, momentum, clip, velocity: Vec::new() }
    }

    /// Applies one update at learning rate `lr` and clears gradients.
    /// Returns the pre-clipping gradient norm.
    pub fn step(&mut self, model: &mut impl Module<f32>, lr: f64) -> f64 {
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        model.visit(&mut |p| grads.push(if p.tensor.requires_grad() { p.tensor.grad() } else { None }));
        let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        if self.velocity.len() != grads.len() {
            self.velocity = vec![None; grads.len()];
        }
        let (mu, lr32, scale32) = (self.momentum as f32, lr as f32, scale as f32);
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit_mut(&mut |p| {
            if let Some(g) = &grads[i] {
                let v = velocity[i].get_or_insert_with(|| vec![0.0; g.len()]);
                for (vj, &gj) in v.iter_mut().zip(g) {
                    *vj = mu * *vj + scale32 * gj;
                }
                p.tensor.update_data(|d| d.iter_mut().zip(v.iter()).for_each(|(w, &vj)| *w -= lr32 * vj));
                p.tensor.zero_grad();
            }
            i += 1;
        });
        norm
    }
}

fn lr_at(cfg: &Config, iter: usize) -> f64 {
    let w = cfg.train.warmup;
    if w > 0 && iter < w {
        cfg.train.lr * (iter + 1) as f64 / w as f64
    } else {
        cfg.train.lr
    }
}

/// In-memory base-class training scenes.
pub fn base_dataset(cfg: &Config) -> Dataset {
    let d = &cfg.data;
    let scenes = (0..d.base_scenes as u64).into_par_iter().map(|i| synth_scene(derive_seed(&[d.seed, BASE_STREAM, i]), &d.base)).collect();
    Dataset::from_scenes(scenes)
}

/// The K annotated novel-class images; the first K of one fixed sequence, so
/// larger shot sets contain smaller ones.
pub fn shot_dataset(cfg: &Config, shots: usize) -> Dataset {
    let d = &cfg.data;
    let p = SynthParams { classes: vec![d.novel_class], ..d.novel.clone() };
    Dataset::from_scenes((0..shots as u64).map(|i| synth_scene(derive_seed(&[d.seed, SHOT_STREAM, i]), &p)).collect())
}

/// Held-out scenes; they depend only on the eval seed.
pub fn eval_scenes(cfg: &Config) -> Vec<Scene> {
    let e = &cfg.eval;
    let p = SynthParams { classes: vec![cfg.data.novel_class], ..SynthParams::new(e.density, vec![]) };
    (0..e.scenes as u64).into_par_iter().map(|i| synth_scene(derive_seed(&[e.seed, EVAL_STREAM, i]), &p)).collect()
}

/// One support instance per shot image, chosen by seed.
pub fn shot_instances(ds: &Dataset, class_id: u32, seed: u64) -> Result<Vec<(usize, usize)>> {
    (0..ds.len())
        .map(|i| {
            let boxes: Vec<usize> = (0..ds.records[i].classes.len()).filter(|&j| ds.records[i].classes[j] == class_id).collect();
            if boxes.is_empty() {
                return Err(Error::Data(format!("shot image {} has no instance of class {class_id}", ds.records[i].id)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
            Ok((i, boxes[rng.random_range(0..boxes.len())]))
        })
        .collect()
}

/// Loss of base-training step `iter` on the current weights.
pub fn base_step_loss(model: &OreFsDet, cfg: &Config, ds: &Dataset, classes: &[u32], iter: usize) -> Result<crate::model::StepLoss<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.train.seed, BASE_STREAM, iter as u64]));
    let class = classes[rng.random_range(0..classes.len())];
    let ep = sample_episode(ds, class, 1, rng.random())?;
    let proto = model.prototype(&model.support_features(&ep.supports)?)?;
    let query = model.query_features(&ep.query.tensor())?;
    let size = (ep.query.height(), ep.query.width());
    model.step_loss(&query, &proto, &ep.query.boxes, size, cfg.train.roi_batch, cfg.train.pos_fraction, &mut rng)
}

fn base_classes(cfg: &Config, ds: &Dataset) -> Vec<u32> {
    let mut classes: Vec<u32> =
        ds.records.iter().flat_map(|r| r.classes.iter().copied()).filter(|&c| c != cfg.data.novel_class).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Trains every parameter for `cfg.train.iters` iterations starting at
/// `start`. Returns the last iteration index run plus one.
pub fn base_train(model: &mut OreFsDet, cfg: &Config, ds: &Dataset, start: usize, log: &mut dyn FnMut(&LogEntry)) -> Result<usize> {
    let classes = base_classes(cfg, ds);
    if classes.is_empty() {
        return Err(Error::Data("base dataset holds no base-class instances".into()));
    }
    model.set_trainable(true);
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum, cfg.train.grad_clip);
    for iter in start..cfg.train.iters {
        let loss = base_step_loss(model, cfg, ds, &classes, iter)?;
        loss.total.backward()?;
        let lr = lr_at(cfg, iter);
        let grad_norm = opt.step(model, lr);
        if should_log(cfg, iter) {
            log(&LogEntry { phase: "base".into(), iter, loss: loss.stage1 + loss.stage2, stage1: loss.stage1, stage2: loss.stage2, lr, grad_norm });
        }
    }
    Ok(cfg.train.iters.max(start))
}

fn should_log(cfg: &Config, iter: usize) -> bool {
    let every = cfg.train.log_every;
    iter == 0 || (every > 0 && (iter + 1) % every == 0) || iter + 1 == cfg.train.iters
}

/// Frozen-extractor features of the shot set, computed once.
pub struct ShotCache {
    pub queries: Vec<FeaturePyramid>,
    pub gts: Vec<Vec<RoiBox>>,
    pub sizes: Vec<(usize, usize)>,
    /// Pooled support maps, K×C×G×G per level.
    pub support: FeaturePyramid,
}

impl ShotCache {
    pub fn build(model: &OreFsDet, ds: &Dataset, class_id: u32, instances: &[(usize, usize)]) -> Result<Self> {
        no_grad(|| {
            let supports = support_set(ds, instances)?;
            let support = model.support_features(&supports)?;
            let mut queries = Vec::new();
            let mut gts = Vec::new();
            let mut sizes = Vec::new();
            for i in 0..ds.len() {
                let q = crate::data::episode_query(ds, i, class_id)?;
                queries.push(model.query_features(&q.tensor())?);
                sizes.push((q.height(), q.width()));
                gts.push(q.boxes);
            }
            Ok(Self { queries, gts, sizes, support })
        })
    }
}

/// Loss of fine-tuning step `iter`: one shot image as query against the
/// prototype mined from all K support crops.
pub fn finetune_step_loss(model: &OreFsDet, cfg: &Config, cache: &ShotCache, iter: usize) -> Result<crate::model::StepLoss<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.train.seed, FINETUNE_STREAM, iter as u64]));
    let i = rng.random_range(0..cache.queries.len());
    let proto = model.prototype(&cache.support)?;
    model.step_loss(&cache.queries[i], &proto, &cache.gts[i], cache.sizes[i], cfg.train.roi_batch, cfg.train.pos_fraction, &mut rng)
}

/// Fine-tunes with the backbone and FPN frozen.
pub fn finetune(model: &mut OreFsDet, cfg: &Config, cache: &ShotCache, start: usize, log: &mut dyn FnMut(&LogEntry)) -> Result<usize> {
    model.set_trainable(true);
    model.set_extractor_trainable(false);
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum, cfg.train.grad_clip);
    for iter in start..cfg.train.iters {
        let loss = finetune_step_loss(model, cfg, cache, iter)?;
        loss.total.backward()?;
        let lr = lr_at(cfg, iter);
        let grad_norm = opt.step(model, lr);
        if should_log(cfg, iter) {
            log(&LogEntry { phase: "finetune".into(), iter, loss: loss.stage1 + loss.stage2, stage1: loss.stage1, stage2: loss.stage2, lr, grad_norm });
        }
    }
    Ok(cfg.train.iters.max(start))
}

/// A fine-tuned model with the support crops it was tuned against.
pub struct FewShot {
    pub model: OreFsDet,
    pub supports: Tensor,
    pub iterations: usize,
}

/// Fine-tunes a copy of `base` on the K-shot set `shots` (one support crop
/// per image).
pub fn few_shot(base: &OreFsDet, cfg: &Config, shots: &Dataset, log: &mut dyn FnMut(&LogEntry)) -> Result<FewShot> {
    let class = cfg.data.novel_class;
    let instances = shot_instances(shots, class, cfg.train.seed)?;
    let supports = support_set(shots, &instances)?;
    let mut model = base.clone();
    let cache = ShotCache::build(&model, shots, class, &instances)?;
    let iterations = finetune(&mut model, cfg, &cache, 0, log)?;
    Ok(FewShot { model, supports, iterations })
}

/// Detections on each scene against one prototype, in scene order.
pub fn detect_all(model: &OreFsDet, proto: &FeaturePyramid, scenes: &[Scene], cfg: &Config) -> Result<Vec<Vec<ScoredBox>>> {
    scenes
        .par_iter()
        .map(|s| {
            let q = crate::data::resize_query(s);
            let dets = model.detect(&q.tensor(), proto, cfg.eval.nms_thr, cfg.eval.max_dets)?;
            let (fx, fy) = (s.width() as f32 / q.width() as f32, s.height() as f32 / q.height() as f32);
            Ok(dets
                .iter()
                .map(|d| ScoredBox { bbox: RoiBox::new(d.bbox.x1 * fx, d.bbox.y1 * fy, d.bbox.x2 * fx, d.bbox.y2 * fy), score: d.score })
                .collect())
        })
        .collect()
}

/// Accuracy fields of the report on held-out scenes.
pub fn evaluate(model: &OreFsDet, supports: &Tensor, scenes: &[Scene], cfg: &Config) -> Result<MetricsReport> {
    let proto = model.encode_supports(supports)?;
    let dets = detect_all(model, &proto, scenes, cfg)?;
    let gts: Vec<Vec<RoiBox>> = scenes.iter().map(|s| s.boxes_of(cfg.data.novel_class)).collect();
    let mut report = MetricsReport::from_detections(&dets, &gts);
    report.params = Some(model.count_parameters());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    #[test]
    fn seeds_are_order_sensitive() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }

    #[test]
    fn sgd_momentum_matches_hand_update() {
        struct One(Param<f32>);
        impl Module<f32> for One {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f32>)) {
                f(&self.0)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
                f(&mut self.0)
            }
        }
        let mut m = One(Param::new("w", vec![1.0, 2.0], &[2]));
        let mut opt = Sgd::new(0.1, 0.5, 0.0);
        for _ in 0..2 {
            m.0.tensor.scale(3.0).sum().backward().unwrap();
            opt.step(&mut m, 0.1);
        }
        // v1 = 3, w1 = w0 - 0.3; v2 = 1.5 + 3 = 4.5, w2 = w1 - 0.45
        let w = m.0.tensor.data();
        assert!((w[0] - 0.25).abs() < 1e-6 && (w[1] - 1.25).abs() < 1e-6, "{w:?}");
        assert!(m.0.tensor.grad().is_none());
    }

    #[test]
    fn clipping_caps_the_update() {
        struct One(Param<f32>);
        impl Module<f32> for One {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f32>)) {
                f(&self.0)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
                f(&mut self.0)
            }
        }
        let mut m = One(Param::new("w", vec![0.0, 0.0], &[2]));
        m.0.tensor.scale(100.0).sum().backward().unwrap();
        let norm = Sgd::new(1.0, 0.0, 1.0).step(&mut m, 1.0);
        assert!((norm - 100.0 * 2f64.sqrt()).abs() < 1e-3);
        let w = m.0.tensor.data();
        assert!(((w[0] * w[0] + w[1] * w[1]).sqrt() - 1.0).abs() < 1e-5);
    }
}
