//! The assembled detector: shared extractor, support mining, relationship
//! guidance, centre-heatmap proposals and the dual-scale RoI head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeatureExtractor, FeaturePyramid};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::proposal::{assign_targets, decode, stage1_loss, Proposal, ProposalHead};
use crate::rg_block::RgBlock;
use crate::roi_head::{sample_proposals, stage2_loss, Detection, RoiHead};
use crate::sm_block::SmBlock;
use crate::tensor::{adaptive_avg_pool, no_grad, Element, RoiBox, Tensor};

#[derive(Clone, Debug)]
pub struct OreFsDet<E: Element = f32> {
    pub extractor: FeatureExtractor<E>,
    pub sm: SmBlock<E>,
    pub rg: RgBlock<E>,
    pub proposal: ProposalHead<E>,
    pub roi: RoiHead<E>,
    pub config: ModelConfig,
}

/// Scalar losses of one step plus the differentiable total.
pub struct StepLoss<E: Element> {
    pub total: Tensor<E>,
    pub stage1: f64,
    pub stage2: f64,
    pub proposals: usize,
}

impl<E: Element> OreFsDet<E> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        Ok(Self {
            extractor: FeatureExtractor::new(c, &mut rng),
            sm: SmBlock::new(c, config.segment, config.reduction, &mut rng)?,
            rg: RgBlock::new(c, config.fusion, &mut rng),
            proposal: ProposalHead::new(c, &mut rng),
            roi: RoiHead::new(c, config.head_width, config.roi_res, &mut rng),
            config: config.clone(),
        })
    }

    /// Extracts K support crops (K×3×S×S) and pools every level to G×G.
    pub fn support_features(&self, supports: &Tensor<E>) -> Result<FeaturePyramid<E>> {
        if supports.dims() != 4 {
            return Err(Error::shape(format!("supports must be K×3×S×S, got {:?}", supports.shape())));
        }
        let g = self.config.support_grid;
        self.extractor.extract(supports)?.map(|_, t| adaptive_avg_pool(t, g, g))
    }

    /// Mined, shot-averaged prototype (C×G×G per level).
    pub fn prototype(&self, pooled: &FeaturePyramid<E>) -> Result<FeaturePyramid<E>> {
        pooled.map(|_, t| self.sm.forward_shots(t))
    }

    pub fn query_features(&self, image: &Tensor<E>) -> Result<FeaturePyramid<E>> {
        self.extractor.extract(image)
    }

    /// Stage-one loss on the guided maps plus stage-two loss on sampled
    /// proposals decoded from the current predictions.
    pub fn step_loss(
        &self,
        query: &FeaturePyramid<E>,
        proto: &FeaturePyramid<E>,
        gt: &[RoiBox],
        image_size: (usize, usize),
        roi_batch: usize,
        pos_fraction: f64,
        rng: &mut impl Rng,
    ) -> Result<StepLoss<E>> {
        let attn = self.rg.guide(proto, query)?;
        let preds = self.proposal.predict(&attn)?;
        let targets = assign_targets(gt, image_size)?;
        let l1 = stage1_loss(&preds, &targets)?;
        let props = decode(&preds, image_size, self.config.proposals, self.config.score_floor);
        let sample = sample_proposals(&props, gt, self.config.iou_thr, roi_batch, pos_fraction, rng);
        let (total, stage2) = if sample.boxes.is_empty() {
            (l1.clone(), 0.0)
        } else {
            let out = self.roi.forward(query, proto, &sample.boxes)?;
            let l2 = stage2_loss(&out, &sample)?;
            let v = l2.item().to_f64_lossy();
            (l1.add(&l2)?, v)
        };
        let stage1 = l1.item().to_f64_lossy();
        if !total.all_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok(StepLoss { total, stage1, stage2, proposals: props.len() })
    }

    /// Guided proposals for one query.
    pub fn propose(&self, query: &FeaturePyramid<E>, proto: &FeaturePyramid<E>, image_size: (usize, usize)) -> Result<Vec<Proposal>> {
        let attn = self.rg.guide(proto, query)?;
        let preds = self.proposal.predict(&attn)?;
        Ok(decode(&preds, image_size, self.config.proposals, self.config.score_floor))
    }

    /// Full inference on one `3×H×W` query against a prototype.
    pub fn detect(&self, image: &Tensor<E>, proto: &FeaturePyramid<E>, nms_thr: f64, max_dets: usize) -> Result<Vec<Detection>> {
        no_grad(|| {
            let s = image.shape();
            let size = (s[1], s[2]);
            let query = self.query_features(image)?;
            let props = self.propose(&query, proto, size)?;
            self.roi.detect(&query, proto, &props, size, nms_thr, max_dets)
        })
    }

    /// Prototype straight from support crops, without gradients.
    pub fn encode_supports(&self, supports: &Tensor<E>) -> Result<FeaturePyramid<E>> {
        no_grad(|| self.prototype(&self.support_features(supports)?))
    }

    pub fn set_extractor_trainable(&mut self, trainable: bool) {
        self.extractor.set_trainable(trainable);
    }
}

impl<E: Element> Module<E> for OreFsDet<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.extractor.visit(f);
        self.sm.visit(f);
        self.rg.visit(f);
        self.proposal.visit(f);
        self.roi.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.extractor.visit_mut(f);
        self.sm.visit_mut(f);
        self.rg.visit_mut(f);
        self.proposal.visit_mut(f);
        self.roi.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{support_crop, synth_scene, Density, SynthParams};

    #[test]
    fn end_to_end_shapes_and_budget() {
        let m: OreFsDet = OreFsDet::new(&ModelConfig::default(), 1).unwrap();
        assert!(m.count_parameters() <= 5_000_000, "{}", m.count_parameters());
        let mut names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n, "parameter names must be unique");

        let scene = synth_scene(3, &SynthParams::new(Density::Medium, vec![1]));
        let sup = support_crop(&scene.image, &scene.boxes[0]).reshape(&[1, 3, 240, 240]).unwrap();
        let proto = m.encode_supports(&sup).unwrap();
        assert_eq!(proto.p3().shape(), &[64, 8, 8]);
        let dets = m.detect(&scene.tensor(), &proto, 0.5, 100).unwrap();
        assert!(dets.len() <= 100);
        for d in &dets {
            assert_eq!(d.score, d.p1 * d.p2);
        }
    }

    #[test]
    fn step_loss_backpropagates_to_every_trainable_block() {
        let m: OreFsDet = OreFsDet::new(&ModelConfig::default(), 2).unwrap();
        let scene = synth_scene(4, &SynthParams::new(Density::Sparse, vec![1]));
        let sup = support_crop(&scene.image, &scene.boxes[0]).reshape(&[1, 3, 240, 240]).unwrap();
        let proto = m.prototype(&m.support_features(&sup).unwrap()).unwrap();
        let q = m.query_features(&scene.tensor()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = m.step_loss(&q, &proto, &scene.boxes, (320, 320), 64, 0.5, &mut rng).unwrap();
        assert!(loss.stage1 > 0.0 && loss.stage2 > 0.0);
        loss.total.backward().unwrap();
        for name in ["backbone.stem0.weight", "sm.w_h", "rg.chan_corr.weight", "roi.fc1.weight"] {
            let p = m.params().into_iter().find(|p| p.name == name).unwrap_or_else(|| panic!("{name}"));
            let g = p.tensor.grad().unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(g.iter().any(|&v| v != 0.0), "{name}");
        }
    }
}
