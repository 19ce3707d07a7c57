use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Category, Dataset, Record};
use crate::error::{Error, Result};
use crate::tensor::RoiBox;

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<Category>,
}

fn bad(record: Option<u64>, message: impl Into<String>) -> Error {
    Error::Annotation { record, message: message.into() }
}

fn records<T: serde::de::DeserializeOwned>(doc: &Value, key: &str) -> Result<Vec<T>> {
    let arr = doc.get(key).and_then(Value::as_array).ok_or_else(|| bad(None, format!("missing `{key}` array")))?;
    arr.iter()
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| bad(v.get("id").and_then(Value::as_u64), format!("{key}: {e}"))))
        .collect()
}

/// Parses a COCO-style document. Images are resolved relative to the
/// document's directory when first accessed.
pub fn ingest_coco(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| bad(None, e.to_string()))?;
    let images: Vec<CocoImage> = records(&doc, "images")?;
    let anns: Vec<CocoAnnotation> = records(&doc, "annotations")?;
    let categories: Vec<Category> = records(&doc, "categories")?;

    let mut index = HashMap::new();
    let mut recs = Vec::with_capacity(images.len());
    for im in images {
        if im.width == 0 || im.height == 0 {
            return Err(bad(Some(im.id), "image has zero extent"));
        }
        if index.insert(im.id, recs.len()).is_some() {
            return Err(bad(Some(im.id), "duplicate image id"));
        }
        recs.push(Record {
            id: im.id,
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            boxes: vec![],
            classes: vec![],
            ann_ids: vec![],
        });
    }
    for a in anns {
        let [x, y, w, h] = a.bbox;
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(bad(Some(a.id), "non-finite bbox"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(bad(Some(a.id), format!("bbox width and height must be positive, got {w}×{h}")));
        }
        if !categories.iter().any(|c| c.id == a.category_id) {
            return Err(bad(Some(a.id), format!("unknown category {}", a.category_id)));
        }
        let &i = index.get(&a.image_id).ok_or_else(|| bad(Some(a.id), format!("unknown image {}", a.image_id)))?;
        let r = &mut recs[i];
        r.boxes.push(RoiBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32));
        r.classes.push(a.category_id);
        r.ann_ids.push(a.id);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Dataset::from_parts(recs, categories, Some(root)))
}

/// Serializes annotations as a COCO-style JSON string.
pub fn to_coco_document(ds: &Dataset) -> String {
    let doc = CocoDocument {
        images: ds
            .records
            .iter()
            .map(|r| CocoImage { id: r.id, file_name: r.file_name.clone(), width: r.width, height: r.height })
            .collect(),
        annotations: ds
            .records
            .iter()
            .flat_map(|r| {
                r.boxes.iter().zip(&r.classes).zip(&r.ann_ids).map(move |((b, &c), &id)| {
                    let (x1, y1) = (b.x1 as f64, b.y1 as f64);
                    let (w, h) = (b.x2 as f64 - x1, b.y2 as f64 - y1);
                    CocoAnnotation { id, image_id: r.id, category_id: c, bbox: [x1, y1, w, h], area: w * h, iscrowd: 0 }
                })
            })
            .collect(),
        categories: ds.categories.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("document serializes")
}

pub fn export_coco(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_coco_document(ds)).map_err(|e| Error::io(path, e))
}

/// Writes every image as PNG under `dir` plus `dir/annotations.json`.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (i, r) in ds.records.iter().enumerate() {
        let p = dir.join(&r.file_name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        ds.image(i)?.save(&p).map_err(|e| Error::Image { path: p.clone(), message: e.to_string() })?;
    }
    export_coco(ds, dir.join("annotations.json"))
}
