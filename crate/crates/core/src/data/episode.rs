use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{image_tensor, Dataset, Scene};
use crate::error::{Error, Result};
use crate::tensor::{RoiBox, Tensor};

pub const QUERY_SHORT: usize = 320;
pub const QUERY_LONG_MAX: usize = 1000;
pub const SUPPORT_SIZE: usize = 240;
pub const SUPPORT_MARGIN: f32 = 16.0;

/// One few-shot task: a resized query with its boxes of `class_id` and K
/// zero-padded support crops stacked as K×3×240×240.
#[derive(Clone, Debug)]
pub struct Episode {
    pub query: Scene,
    pub supports: Tensor,
    pub class_id: u32,
    pub query_index: usize,
}

impl Episode {
    pub fn k_shot(&self) -> usize {
        self.supports.shape()[0]
    }
}

/// Output size for the query resize rule.
pub fn query_size(h: usize, w: usize) -> (usize, usize) {
    let (short, long) = (h.min(w) as f64, h.max(w) as f64);
    let mut s = QUERY_SHORT as f64 / short;
    if long * s > QUERY_LONG_MAX as f64 {
        s = QUERY_LONG_MAX as f64 / long;
    }
    let r = |v: usize| ((v as f64 * s).round() as usize).max(1);
    (r(h), r(w))
}

/// Resizes to short side 320 (long side capped at 1000) and rescales boxes
/// with the per-axis factors actually applied.
pub fn resize_query(scene: &Scene) -> Scene {
    let (h, w) = (scene.height(), scene.width());
    let (nh, nw) = query_size(h, w);
    let image = if (nh, nw) == (h, w) {
        scene.image.clone()
    } else {
        imageops::resize(&scene.image, nw as u32, nh as u32, FilterType::Triangle)
    };
    let (sx, sy) = (nw as f32 / w as f32, nh as f32 / h as f32);
    let boxes = scene.boxes.iter().map(|b| RoiBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)).collect();
    Scene { image, boxes, classes: scene.classes.clone(), seed: scene.seed }
}

/// Box plus context margin, clipped, scaled to fit 240×240 and centered on a
/// zero canvas.
pub fn support_crop(img: &RgbImage, bbox: &RoiBox) -> Tensor {
    let (w, h) = (img.width() as f32, img.height() as f32);
    let x0 = (bbox.x1 - SUPPORT_MARGIN).floor().clamp(0.0, w - 1.0) as u32;
    let y0 = (bbox.y1 - SUPPORT_MARGIN).floor().clamp(0.0, h - 1.0) as u32;
    let x1 = ((bbox.x2 + SUPPORT_MARGIN).ceil().clamp(0.0, w) as u32).max(x0 + 1);
    let y1 = ((bbox.y2 + SUPPORT_MARGIN).ceil().clamp(0.0, h) as u32).max(y0 + 1);
    let crop = imageops::crop_imm(img, x0, y0, x1 - x0, y1 - y0).to_image();
    pad_support(&crop)
}

/// Scales an image to fit 240×240 and centers it on a zero canvas.
pub fn pad_support(crop: &RgbImage) -> Tensor {
    let (cw, ch) = (crop.width(), crop.height());
    let s = SUPPORT_SIZE as f64 / cw.max(ch) as f64;
    let tw = ((cw as f64 * s).round() as u32).clamp(1, SUPPORT_SIZE as u32);
    let th = ((ch as f64 * s).round() as u32).clamp(1, SUPPORT_SIZE as u32);
    let scaled = if (tw, th) == (cw, ch) { crop.clone() } else { imageops::resize(crop, tw, th, FilterType::Triangle) };
    let patch = image_tensor(&scaled);
    let (tw, th) = (tw as usize, th as usize);
    let (ox, oy) = ((SUPPORT_SIZE - tw) / 2, (SUPPORT_SIZE - th) / 2);
    let n = SUPPORT_SIZE * SUPPORT_SIZE;
    let mut out = vec![0f32; 3 * n];
    let src = patch.data();
    for c in 0..3 {
        for y in 0..th {
            let d = c * n + (oy + y) * SUPPORT_SIZE + ox;
            let s = c * th * tw + y * tw;
            out[d..d + tw].copy_from_slice(&src[s..s + tw]);
        }
    }
    Tensor::new(out, &[3, SUPPORT_SIZE, SUPPORT_SIZE]).expect("support shape")
}

/// Stacks crops of the given `(record, box)` instances into K×3×240×240.
pub fn support_set(ds: &Dataset, instances: &[(usize, usize)]) -> Result<Tensor> {
    if instances.is_empty() {
        return Err(Error::invalid("support set needs at least one instance"));
    }
    let mut data = Vec::with_capacity(instances.len() * 3 * SUPPORT_SIZE * SUPPORT_SIZE);
    for &(i, j) in instances {
        let img = ds.image(i)?;
        let b = ds.records[i].boxes.get(j).ok_or_else(|| Error::invalid(format!("record {i} has no box {j}")))?;
        data.extend_from_slice(support_crop(&img, b).data());
    }
    Tensor::new(data, &[instances.len(), 3, SUPPORT_SIZE, SUPPORT_SIZE])
}

/// Query with only `class_id` boxes kept, resized per the query rule.
pub fn episode_query(ds: &Dataset, index: usize, class_id: u32) -> Result<Scene> {
    let mut s = ds.scene(index)?;
    let keep: Vec<usize> = (0..s.boxes.len()).filter(|&j| s.classes[j] == class_id).collect();
    s.boxes = keep.iter().map(|&j| s.boxes[j]).collect();
    s.classes = vec![class_id; keep.len()];
    Ok(resize_query(&s))
}

/// Picks a query holding `class_id` and `k_shot` support instances from
/// other images. Pure in `(dataset, class_id, k_shot, seed)`.
pub fn sample_episode(ds: &Dataset, class_id: u32, k_shot: usize, seed: u64) -> Result<Episode> {
    if k_shot == 0 {
        return Err(Error::invalid("k_shot must be at least 1"));
    }
    let queries = ds.images_with(class_id);
    if queries.is_empty() {
        return Err(Error::Data(format!("no image contains class {class_id}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = queries[rng.random_range(0..queries.len())];
    let mut pool: Vec<(usize, usize)> = ds.instances(class_id).into_iter().filter(|&(i, _)| i != q).collect();
    if pool.len() < k_shot {
        return Err(Error::Data(format!(
            "class {class_id} has {} instances outside the query image, {k_shot} shots requested",
            pool.len()
        )));
    }
    pool.shuffle(&mut rng);
    pool.truncate(k_shot);
    Ok(Episode { query: episode_query(ds, q, class_id)?, supports: support_set(ds, &pool)?, class_id, query_index: q })
}
