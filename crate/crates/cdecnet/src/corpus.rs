//! On-disk corpus layout:
//!
//! ```text
//! splits.json                  train/val/test page ids
//! images/<id>.pgm
//! annotations/<split>.json     one annotation file per split
//! ```

use std::path::{Path, PathBuf};

use cdecnet_core::geometry::BBox;
use cdecnet_core::image::GrayImage;
use cdecnet_core::synth::{generate_page, make_split, page_index, SplitManifest};

use crate::coco::{build_annotations, read_json, write_json, AnnotationFile, ImageRecord};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pgm;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub file_name: String,
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSummary {
    pub pages: [usize; 3],
    pub tables: [usize; 3],
}

pub fn annotation_path(dir: &Path, split: &str) -> PathBuf {
    dir.join("annotations").join(format!("{split}.json"))
}

fn split_ids<'a>(m: &'a SplitManifest, split: &str) -> &'a [String] {
    match split {
        "train" => &m.train,
        "val" => &m.val,
        _ => &m.test,
    }
}

pub fn write_corpus(cfg: &RunConfig, dir: &Path) -> Result<CorpusSummary> {
    let spec = cfg.corpus.page_spec(cfg.seed);
    let images = dir.join("images");
    for d in [&images, &dir.join("annotations")] {
        std::fs::create_dir_all(d).map_err(Error::io(d))?;
    }
    let manifest = make_split(cfg.corpus.train, cfg.corpus.val, cfg.corpus.test);
    write_json(&dir.join("splits.json"), &manifest)?;
    let mut summary = CorpusSummary {
        pages: [0; 3],
        tables: [0; 3],
    };
    for (k, split) in SPLITS.iter().enumerate() {
        let mut pages = Vec::new();
        for id in split_ids(&manifest, split) {
            let index = page_index(id).expect("manifest ids are page ids");
            let page = generate_page(&spec, index)?;
            let file_name = format!("{id}.pgm");
            pgm::write(&images.join(&file_name), &page.image)?;
            summary.tables[k] += page.gt_boxes.len();
            pages.push((
                ImageRecord {
                    id: index as u64,
                    file_name,
                    width: page.image.width,
                    height: page.image.height,
                },
                page,
            ));
        }
        summary.pages[k] = pages.len();
        let file = build_annotations(
            pages
                .iter()
                .map(|(r, p)| (r.clone(), &p.gt_boxes[..], &p.gt_classes[..])),
        );
        write_json(&annotation_path(dir, split), &file)?;
    }
    Ok(summary)
}

/// Images and ground truth of one split, ordered by image id.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    if !SPLITS.contains(&split) {
        return Err(Error::Config(format!("unknown split {split:?}")));
    }
    let path = annotation_path(dir, split);
    let file: AnnotationFile = read_json(&path)?;
    let gts = file
        .ground_truth()
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    let mut out = Vec::with_capacity(gts.len());
    for (id, gt) in gts {
        let rec = gt.image.expect("ground_truth keeps the image record");
        let img_path = dir.join("images").join(&rec.file_name);
        let image = pgm::read(&img_path)?;
        if (image.width, image.height) != (rec.width, rec.height) {
            return Err(Error::Corpus(format!(
                "{}: {}×{} on disk, {}×{} in {}",
                img_path.display(),
                image.width,
                image.height,
                rec.width,
                rec.height,
                path.display()
            )));
        }
        if let Some(b) = gt
            .boxes
            .iter()
            .find(|b| b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > rec.width as f64 || b.y2 > rec.height as f64)
        {
            return Err(Error::Corpus(format!("image {id}: box {b:?} outside the page")));
        }
        out.push(Sample {
            image_id: id,
            file_name: rec.file_name,
            image,
            boxes: gt.boxes,
            classes: gt.classes,
        });
    }
    Ok(out)
}
