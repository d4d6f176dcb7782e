//! Training loop, prediction and checkpoint files.

use std::io::Write;
use std::path::Path;

use cdecnet_core::checkpoint;
use cdecnet_core::detector::{DetectorModel, StepLosses};
use cdecnet_core::geometry::{BBox, Detection};
use cdecnet_core::image::GrayImage;
use cdecnet_core::msvote::{detect_multiscale, VoteMode};
use cdecnet_core::optim::{Optimizer, Sgd};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::Sample;
use crate::error::{Error, Result};

const ORDER_STREAM: u64 = 100;
const SAMPLING_STREAM: u64 = 101;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Letterbox to `[height, width]`; returns the image and its scale.
pub fn fit(img: &GrayImage, input_size: [usize; 2]) -> (GrayImage, f64) {
    img.letterbox(input_size[1], input_size[0])
}

fn scale_box(b: &BBox, k: f64) -> BBox {
    BBox {
        x1: b.x1 * k,
        y1: b.y1 * k,
        x2: b.x2 * k,
        y2: b.y2 * k,
    }
}

/// One `key=value` line per iteration.
pub fn log_line(iter: usize, epoch: usize, image_id: u64, lr: f64, l: &StepLosses) -> String {
    let mut s = format!(
        "iter={iter} epoch={epoch} image={image_id} lr={lr} total={} rpn_cls={} rpn_box={}",
        l.total, l.rpn_cls, l.rpn_box
    );
    for (t, ((c, b), n)) in l.stage_cls.iter().zip(&l.stage_box).zip(&l.stage_positives).enumerate() {
        s.push_str(&format!(" s{0}_cls={c} s{0}_box={b} s{0}_pos={n}", t + 1));
    }
    s.push_str(&format!(" grad_norm={}", l.grad_norm));
    s
}

/// Parse the `total=` field of a log line.
pub fn logged_total(line: &str) -> Option<f64> {
    line.split(' ')
        .find_map(|kv| kv.strip_prefix("total="))
        .and_then(|v| v.parse().ok())
}

/// Train a fresh model on `samples`, one image per step, writing a log
/// line per iteration.
pub fn train_model(cfg: &RunConfig, samples: &[Sample], log: &mut dyn Write) -> Result<DetectorModel> {
    if samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut model = DetectorModel::new(cfg.model.clone(), cfg.seed)?;
    let inputs: Vec<_> = samples
        .iter()
        .map(|s| {
            let (img, k) = fit(&s.image, cfg.train.input_size);
            let boxes: Vec<BBox> = s.boxes.iter().map(|b| scale_box(b, k)).collect();
            (img.to_input(), boxes)
        })
        .collect();
    let t = &cfg.train;
    let mut opt = match t.optimizer {
        cdecnet_core::optim::OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(t.momentum)),
        kind => Optimizer::new(kind),
    };
    let sched = t.schedule();
    let mut order_rng = rng(cfg.seed, ORDER_STREAM);
    let mut sample_rng = rng(cfg.seed, SAMPLING_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut iter = 0;
    for epoch in 0..t.epochs {
        if t.shuffle {
            order.shuffle(&mut order_rng);
        }
        for &i in &order {
            let lr = sched.at(iter, epoch);
            let (x, boxes) = &inputs[i];
            let l = model.train_step(x, boxes, &samples[i].classes, &mut opt, lr, t.clip_grad_norm, &mut sample_rng)?;
            iter += 1;
            if !l.total.is_finite() {
                return Err(Error::Config(format!("loss diverged at iteration {iter}")));
            }
            writeln!(log, "{}", log_line(iter, epoch + 1, samples[i].image_id, lr, &l))
                .map_err(Error::io("<train log>"))?;
        }
    }
    Ok(model)
}

/// Detections in the original page frame.
pub fn predict(model: &DetectorModel, cfg: &RunConfig, image: &GrayImage, multiscale: bool) -> Result<Vec<Detection>> {
    let (img, k) = fit(image, cfg.train.input_size);
    let dets = if multiscale {
        detect_multiscale(model, &img, &cfg.multiscale, VoteMode::Fuse)?
    } else {
        model.detect(&img.to_input())?
    };
    let (w, h) = (image.width as f64, image.height as f64);
    Ok(dets
        .into_iter()
        .filter_map(|d| {
            let bbox = scale_box(&d.bbox, 1.0 / k).clip(w, h)?;
            Some(Detection { bbox, ..d })
        })
        .collect())
}

pub fn save_checkpoint(model: &DetectorModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint::encode(&model.store)).map_err(Error::io(path))
}

/// Build the configured architecture and fill it from `path`.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<DetectorModel> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let store = checkpoint::decode(&bytes)?;
    let mut model = DetectorModel::new(cfg.model.clone(), cfg.seed)?;
    if store.len() != model.store.len() {
        return Err(Error::Config(format!(
            "{}: {} parameters, the configured model has {}",
            path.display(),
            store.len(),
            model.store.len()
        )));
    }
    model.store.load_from(&store)?;
    Ok(model)
}
