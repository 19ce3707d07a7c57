//! Shared fixtures for the criterion benches.

use orefsdet::backbone::FeaturePyramid;
use orefsdet::data::{resize_query, support_set, Scene};
use orefsdet::train::{eval_scenes, shot_dataset, shot_instances};
use orefsdet::{Config, OreFsDet, Tensor};

/// Deterministic pseudo-random values in [-1, 1).
pub fn filled(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    })
}

/// Default-config model with a 1-shot prototype and `n` resized queries.
pub struct InferenceFixture {
    pub config: Config,
    pub model: OreFsDet,
    pub proto: FeaturePyramid,
    pub queries: Vec<Tensor>,
    pub scenes: Vec<Scene>,
}

impl InferenceFixture {
    pub fn new(n: usize) -> Self {
        let mut config = Config::default();
        config.eval.scenes = n;
        let model = OreFsDet::new(&config.model, 0).expect("default model");
        let shots = shot_dataset(&config, 1);
        let inst = shot_instances(&shots, config.data.novel_class, 0).expect("shot instance");
        let proto = model.encode_supports(&support_set(&shots, &inst).expect("supports")).expect("prototype");
        let scenes = eval_scenes(&config);
        let queries = scenes.iter().map(|s| resize_query(s).tensor()).collect();
        Self { config, model, proto, queries, scenes }
    }
}
