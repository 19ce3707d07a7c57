//! Small VoV-style backbone and a three-level FPN.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Param};
use crate::tensor::{bilinear_resize, concat, max_pool2d, Conv2dSpec, Element, Tensor};

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const LEVEL_NAMES: [&str; 3] = ["p3", "p4", "p5"];

/// P3/P4/P5 for one image (`C×H×W`) or a batch (`N×C×H×W`).
#[derive(Clone, Debug)]
pub struct FeaturePyramid<E: Element = f32> {
    pub levels: [Tensor<E>; 3],
}

impl<E: Element> FeaturePyramid<E> {
    pub fn new(levels: [Tensor<E>; 3]) -> Self {
        Self { levels }
    }

    pub fn p3(&self) -> &Tensor<E> {
        &self.levels[0]
    }

    pub fn p4(&self) -> &Tensor<E> {
        &self.levels[1]
    }

    pub fn p5(&self) -> &Tensor<E> {
        &self.levels[2]
    }

    pub fn channels(&self) -> usize {
        let s = self.levels[0].shape();
        s[s.len() - 3]
    }

    pub fn batch(&self) -> Option<usize> {
        (self.levels[0].dims() == 4).then(|| self.levels[0].shape()[0])
    }

    /// Item `i` of a batched pyramid as `C×H×W` maps.
    pub fn item(&self, i: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(3);
        for l in &self.levels {
            let s = l.shape();
            if s.len() != 4 {
                return Err(Error::shape("FeaturePyramid::item on an unbatched pyramid"));
            }
            out.push(l.narrow(0, i, 1)?.reshape(&s[1..])?);
        }
        Ok(Self::new(out.try_into().expect("three levels")))
    }

    pub fn map(&self, mut f: impl FnMut(usize, &Tensor<E>) -> Result<Tensor<E>>) -> Result<Self> {
        let a = f(0, &self.levels[0])?;
        let b = f(1, &self.levels[1])?;
        let c = f(2, &self.levels[2])?;
        Ok(Self::new([a, b, c]))
    }

    pub fn detach(&self) -> Self {
        Self::new(self.levels.clone().map(|t| t.detach()))
    }
}

/// Expected `(H_i, W_i)` of each level for an input of `h×w`.
pub fn level_sizes(h: usize, w: usize) -> [(usize, usize); 3] {
    STRIDES.map(|s| (h.div_ceil(s), w.div_ceil(s)))
}

/// Three chained 3×3 convs whose outputs are concatenated with the input and
/// reduced by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct VovBlock<E: Element> {
    pub convs: [Conv2d<E>; 3],
    pub reduce: Conv2d<E>,
}

impl<E: Element> VovBlock<E> {
    pub fn new(name: &str, cin: usize, mid: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let convs = [
            Conv2d::same3(&format!("{name}.conv0"), cin, mid, rng),
            Conv2d::same3(&format!("{name}.conv1"), mid, mid, rng),
            Conv2d::same3(&format!("{name}.conv2"), mid, mid, rng),
        ];
        let reduce = Conv2d::pointwise(&format!("{name}.reduce"), cin + 3 * mid, cout, rng);
        Self { convs, reduce }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let axis = x.dims() - 3;
        let mut parts = vec![x.clone()];
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu();
            parts.push(h.clone());
        }
        Ok(self.reduce.forward(&concat(&parts, axis)?)?.relu())
    }
}

impl<E: Element> Module<E> for VovBlock<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.convs.iter().for_each(|c| c.visit(f));
        self.reduce.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.convs.iter_mut().for_each(|c| c.visit_mut(f));
        self.reduce.visit_mut(f);
    }
}

/// Stem of two stride-2 convs, then three max-pool + VoV stages.
#[derive(Clone, Debug)]
pub struct Backbone<E: Element> {
    pub stem: [Conv2d<E>; 2],
    pub stages: [VovBlock<E>; 3],
}

/// (input, mid, output) widths of the three stages.
pub const STAGE_WIDTHS: [(usize, usize, usize); 3] = [(32, 32, 64), (64, 48, 96), (96, 64, 128)];

impl<E: Element> Backbone<E> {
    pub fn new(rng: &mut impl Rng) -> Self {
        let s2 = Conv2dSpec { stride: 2, padding: 1 };
        let stem = [
            Conv2d::new("backbone.stem0", 3, 16, 3, s2, rng),
            Conv2d::new("backbone.stem1", 16, STAGE_WIDTHS[0].0, 3, s2, rng),
        ];
        let stages = [0, 1, 2].map(|i| {
            let (cin, mid, cout) = STAGE_WIDTHS[i];
            VovBlock::new(&format!("backbone.stage{}", i + 1), cin, mid, cout, rng)
        });
        Self { stem, stages }
    }

    pub fn out_channels(&self) -> [usize; 3] {
        STAGE_WIDTHS.map(|w| w.2)
    }

    /// C3/C4/C5 at strides 8/16/32.
    pub fn forward(&self, image: &Tensor<E>) -> Result<[Tensor<E>; 3]> {
        let mut x = image.clone();
        for c in &self.stem {
            x = c.forward(&x)?.relu();
        }
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            x = stage.forward(&max_pool2d(&x, 3, 2, 1)?)?;
            outs.push(x.clone());
        }
        Ok(outs.try_into().expect("three stages"))
    }
}

impl<E: Element> Module<E> for Backbone<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.stem.iter().for_each(|c| c.visit(f));
        self.stages.iter().for_each(|s| s.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.stem.iter_mut().for_each(|c| c.visit_mut(f));
        self.stages.iter_mut().for_each(|s| s.visit_mut(f));
    }
}

#[derive(Clone, Debug)]
pub struct Fpn<E: Element> {
    pub lateral: [Conv2d<E>; 3],
    pub smooth: [Conv2d<E>; 3],
}

impl<E: Element> Fpn<E> {
    pub fn new(in_channels: [usize; 3], channels: usize, rng: &mut impl Rng) -> Self {
        let lateral =
            [0, 1, 2].map(|i| Conv2d::pointwise(&format!("fpn.lateral.{}", LEVEL_NAMES[i]), in_channels[i], channels, rng));
        let smooth = [0, 1, 2].map(|i| Conv2d::same3(&format!("fpn.smooth.{}", LEVEL_NAMES[i]), channels, channels, rng));
        Self { lateral, smooth }
    }

    /// Top-down pathway. The coarser map is bilinearly resized to the finer
    /// lateral's exact extent, which is ×2 except after odd-sized rounding.
    pub fn forward(&self, c: &[Tensor<E>; 3]) -> Result<FeaturePyramid<E>> {
        let lat: Vec<Tensor<E>> = self.lateral.iter().zip(c).map(|(l, x)| l.forward(x)).collect::<Result<_>>()?;
        let mut merged = vec![lat[2].clone()];
        for i in (0..2).rev() {
            let s = lat[i].shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let up = bilinear_resize(merged.last().expect("non-empty"), h, w)?;
            merged.push(lat[i].add(&up)?);
        }
        merged.reverse();
        let out: Vec<Tensor<E>> = self.smooth.iter().zip(&merged).map(|(s, x)| s.forward(x)).collect::<Result<_>>()?;
        Ok(FeaturePyramid::new(out.try_into().expect("three levels")))
    }
}

impl<E: Element> Module<E> for Fpn<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.lateral.iter().chain(&self.smooth).for_each(|c| c.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.lateral.iter_mut().chain(&mut self.smooth).for_each(|c| c.visit_mut(f));
    }
}

/// Backbone + FPN, shared by query and support images.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<E: Element> {
    pub backbone: Backbone<E>,
    pub fpn: Fpn<E>,
}

impl<E: Element> FeatureExtractor<E> {
    pub fn new(fpn_channels: usize, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::new(rng);
        let fpn = Fpn::new(backbone.out_channels(), fpn_channels, rng);
        Self { backbone, fpn }
    }

    /// `3×H×W` or `N×3×H×W` image(s) to a pyramid; H, W ≥ 32.
    pub fn extract(&self, image: &Tensor<E>) -> Result<FeaturePyramid<E>> {
        let s = image.shape();
        if !(s.len() == 3 || s.len() == 4) || s[s.len() - 3] != 3 {
            return Err(Error::shape(format!("extract: expected 3×H×W image(s), got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h < 32 || w < 32 {
            return Err(Error::shape(format!("extract: image {h}×{w} is smaller than 32×32")));
        }
        self.fpn.forward(&self.backbone.forward(image)?)
    }
}

impl<E: Element> Module<E> for FeatureExtractor<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.backbone.visit(f);
        self.fpn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.backbone.visit_mut(f);
        self.fpn.visit_mut(f);
    }
}
