//! COCO-style annotation and prediction files.
//!
//! Boxes are stored as `[x, y, w, h]` with `(x, y)` the top-left corner.
//! Category ids are one-based (`1 = table`); image ids are page indices.

use std::collections::BTreeMap;
use std::path::Path;

use cdecnet_core::geometry::{BBox, Detection};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CATEGORY_NAMES: [&str; 1] = ["table"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn to_xywh(b: &BBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1]
}

pub fn from_xywh(v: &[f64; 4]) -> Option<BBox> {
    BBox::new(v[0], v[1], v[0] + v[2], v[1] + v[3]).ok()
}

/// Ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageGt {
    pub image: Option<ImageRecord>,
    pub boxes: Vec<BBox>,
    /// Zero-based.
    pub classes: Vec<usize>,
}

/// One image entry per `(record, boxes, zero-based classes)`.
pub fn build_annotations<'a>(items: impl IntoIterator<Item = (ImageRecord, &'a [BBox], &'a [usize])>) -> AnnotationFile {
    let mut file = AnnotationFile {
        categories: CATEGORY_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| CategoryRecord {
                id: i as u64 + 1,
                name: (*n).into(),
            })
            .collect(),
        ..Default::default()
    };
    for (rec, boxes, classes) in items {
        for (b, &c) in boxes.iter().zip(classes) {
            file.annotations.push(AnnotationRecord {
                id: file.annotations.len() as u64 + 1,
                image_id: rec.id,
                category_id: c as u64 + 1,
                bbox: to_xywh(b),
            });
        }
        file.images.push(rec);
    }
    file
}

impl AnnotationFile {
    /// Ground truth per image id, checking the cross references.
    pub fn ground_truth(&self) -> std::result::Result<BTreeMap<u64, ImageGt>, String> {
        let mut out: BTreeMap<u64, ImageGt> = BTreeMap::new();
        for im in &self.images {
            if out.insert(im.id, ImageGt { image: Some(im.clone()), ..Default::default() }).is_some() {
                return Err(format!("images: duplicate id {}", im.id));
            }
        }
        for (k, a) in self.annotations.iter().enumerate() {
            let gt = out
                .get_mut(&a.image_id)
                .ok_or_else(|| format!("annotations[{k}].image_id: no image {}", a.image_id))?;
            if !self.categories.iter().any(|c| c.id == a.category_id) || a.category_id == 0 {
                return Err(format!("annotations[{k}].category_id: unknown category {}", a.category_id));
            }
            let b = from_xywh(&a.bbox).ok_or_else(|| format!("annotations[{k}].bbox: degenerate {:?}", a.bbox))?;
            gt.boxes.push(b);
            gt.classes.push(a.category_id as usize - 1);
        }
        Ok(out)
    }
}

/// Records for one image's detections.
pub fn prediction_records(image_id: u64, dets: &[Detection]) -> Vec<PredictionRecord> {
    dets.iter()
        .map(|d| PredictionRecord {
            image_id,
            category_id: d.class_id as u64 + 1,
            bbox: to_xywh(&d.bbox),
            score: d.score,
        })
        .collect()
}

/// Canonical order: by image id, then descending score, then box.
pub fn sort_predictions(recs: &mut [PredictionRecord]) {
    recs.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(b.score.total_cmp(&a.score))
            .then_with(|| {
                a.bbox
                    .iter()
                    .zip(&b.bbox)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
}

/// Detections per image id; records with a degenerate box are rejected.
pub fn group_predictions(recs: &[PredictionRecord]) -> std::result::Result<BTreeMap<u64, Vec<Detection>>, String> {
    let mut out: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for (k, r) in recs.iter().enumerate() {
        let b = from_xywh(&r.bbox).ok_or_else(|| format!("[{k}].bbox: degenerate {:?}", r.bbox))?;
        if r.category_id == 0 {
            return Err(format!("[{k}].category_id: ids are one-based"));
        }
        if !(0.0..=1.0).contains(&r.score) {
            return Err(format!("[{k}].score: {} outside [0, 1]", r.score));
        }
        out.entry(r.image_id)
            .or_default()
            .push(Detection::new(b, r.score, r.category_id as usize - 1));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    s.push('\n');
    std::fs::write(path, s).map_err(Error::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&s).map_err(Error::json(path))
}
