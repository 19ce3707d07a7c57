//! Scenes, datasets and few-shot episodes.

mod coco;
mod episode;
pub mod synth;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use coco::{export_coco, ingest_coco, to_coco_document, write_dataset};
pub use episode::{episode_query, pad_support, query_size, resize_query, sample_episode, support_crop, support_set, Episode, QUERY_LONG_MAX, QUERY_SHORT, SUPPORT_MARGIN, SUPPORT_SIZE};
pub use synth::{synth_scene, Density, SynthParams};

use crate::error::{Error, Result};
use crate::tensor::{RoiBox, Tensor};

/// An image with its boxes. Pixels are kept as 8-bit RGB so in-memory and
/// PNG-materialized scenes are identical.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub boxes: Vec<RoiBox>,
    pub classes: Vec<u32>,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    /// 3×H×W in [0, 1].
    pub fn tensor(&self) -> Tensor {
        image_tensor(&self.image)
    }

    pub fn boxes_of(&self, class_id: u32) -> Vec<RoiBox> {
        self.boxes.iter().zip(&self.classes).filter(|(_, &c)| c == class_id).map(|(b, _)| *b).collect()
    }
}

pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0f32; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(data, &[3, h, w]).expect("shape matches buffer")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

pub fn default_categories() -> Vec<Category> {
    [synth::ORE, synth::RECTANGLE, synth::TRIANGLE, synth::RING]
        .into_iter()
        .map(|id| Category { id, name: synth::class_name(id).to_string() })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<RoiBox>,
    pub classes: Vec<u32>,
    pub ann_ids: Vec<u64>,
}

/// Read-only after construction. Images come from memory or are decoded
/// lazily from `root/file_name` and cached.
#[derive(Debug)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub categories: Vec<Category>,
    root: Option<PathBuf>,
    cache: Mutex<HashMap<usize, Arc<RgbImage>>>,
}

impl Dataset {
    pub(crate) fn from_parts(records: Vec<Record>, categories: Vec<Category>, root: Option<PathBuf>) -> Self {
        Self { records, categories, root, cache: Mutex::new(HashMap::new()) }
    }

    /// In-memory dataset; file names follow the materialized layout.
    pub fn from_scenes(scenes: Vec<Scene>) -> Self {
        let mut records = Vec::with_capacity(scenes.len());
        let mut cache = HashMap::new();
        let mut next_ann = 1;
        for (i, s) in scenes.into_iter().enumerate() {
            let n = s.boxes.len() as u64;
            records.push(Record {
                id: i as u64 + 1,
                file_name: format!("images/{i:06}.png"),
                width: s.image.width(),
                height: s.image.height(),
                boxes: s.boxes,
                classes: s.classes,
                ann_ids: (next_ann..next_ann + n).collect(),
            });
            next_ann += n;
            cache.insert(i, Arc::new(s.image));
        }
        Self { records, categories: default_categories(), root: None, cache: Mutex::new(cache) }
    }

    /// Records at `indices`, in that order, sharing decoded images.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let cache = self.cache.lock().expect("cache lock");
        let mut sub = HashMap::new();
        for (k, &i) in indices.iter().enumerate() {
            if let Some(img) = cache.get(&i) {
                sub.insert(k, img.clone());
            }
        }
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            categories: self.categories.clone(),
            root: self.root.clone(),
            cache: Mutex::new(sub),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn image(&self, index: usize) -> Result<Arc<RgbImage>> {
        let rec = self.records.get(index).ok_or_else(|| Error::invalid(format!("image index {index} out of range")))?;
        if let Some(img) = self.cache.lock().expect("cache lock").get(&index) {
            return Ok(img.clone());
        }
        let path = match &self.root {
            Some(r) => r.join(&rec.file_name),
            None => PathBuf::from(&rec.file_name),
        };
        let img = image::open(&path).map_err(|e| Error::Image { path: path.clone(), message: e.to_string() })?.to_rgb8();
        if img.width() != rec.width || img.height() != rec.height {
            return Err(Error::Image {
                path,
                message: format!("decoded {}×{}, annotation says {}×{}", img.width(), img.height(), rec.width, rec.height),
            });
        }
        let img = Arc::new(img);
        self.cache.lock().expect("cache lock").insert(index, img.clone());
        Ok(img)
    }

    pub fn scene(&self, index: usize) -> Result<Scene> {
        let img = self.image(index)?;
        let rec = &self.records[index];
        Ok(Scene { image: (*img).clone(), boxes: rec.boxes.clone(), classes: rec.classes.clone(), seed: rec.id })
    }

    /// Indices of records holding at least one instance of `class_id`.
    pub fn images_with(&self, class_id: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].classes.contains(&class_id)).collect()
    }

    /// `(record, box)` pairs for every instance of `class_id`.
    pub fn instances(&self, class_id: u32) -> Vec<(usize, usize)> {
        self.records
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.classes.iter().enumerate().filter(move |(_, &c)| c == class_id).map(move |(j, _)| (i, j)))
            .collect()
    }
}
