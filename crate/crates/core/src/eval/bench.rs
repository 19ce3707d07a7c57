use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::checkpoint;
use crate::config::Config;
use crate::data::{resize_query, Scene};
use crate::error::{Error, Result};
use crate::model::OreFsDet;
use crate::nn::Module;
use crate::tensor::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub fps: f64,
    pub median_secs: f64,
    pub params: usize,
    pub ckpt_bytes: u64,
    /// High-water mark of tensor buffer bytes during the timed runs.
    pub peak_alloc_bytes: usize,
}

/// Median wall-clock of full single-query inference (extract, guide, decode,
/// detect) on the calling thread, cycling through `scenes`.
pub fn bench(
    model: &OreFsDet,
    config: &Config,
    proto: &FeaturePyramid,
    scenes: &[Scene],
    warmup: usize,
    iters: usize,
) -> Result<BenchResult> {
    if scenes.is_empty() || iters == 0 {
        return Err(Error::invalid("bench needs at least one scene and one iteration"));
    }
    let inputs: Vec<_> = scenes.iter().map(|s| resize_query(s).tensor()).collect();
    let run = |i: usize| model.detect(&inputs[i % inputs.len()], proto, config.eval.nms_thr, config.eval.max_dets);
    for i in 0..warmup {
        run(i)?;
    }
    stats::reset_peak();
    let mut times = Vec::with_capacity(iters);
    for i in 0..iters {
        let t = Instant::now();
        run(i)?;
        times.push(t.elapsed().as_secs_f64());
    }
    let peak = stats::peak_bytes();
    times.sort_by(f64::total_cmp);
    let median = if iters % 2 == 1 { times[iters / 2] } else { 0.5 * (times[iters / 2 - 1] + times[iters / 2]) };
    Ok(BenchResult {
        fps: 1.0 / median.max(1e-12),
        median_secs: median,
        params: model.count_parameters(),
        ckpt_bytes: checkpoint::to_bytes(model, config, 0).len() as u64,
        peak_alloc_bytes: peak,
    })
}
