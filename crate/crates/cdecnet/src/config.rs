//! Run configuration.
//!
//! Resolution order, later wins: preset defaults, the JSON config file,
//! command-line flags. The file may set any subset of keys; unknown keys
//! are rejected.

use std::path::Path;

use cdecnet_core::detector::CascadeConfig;
use cdecnet_core::metrics::{Aggregation, ApMode};
use cdecnet_core::msvote::ScaleSet;
use cdecnet_core::optim::{LrSchedule, OptimizerKind};
use cdecnet_core::synth::PageSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Desk-scale schedule that overfits the synthetic corpus on one core.
    #[default]
    Toy,
    /// The published schedule and input size.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub width: usize,
    pub height: usize,
    pub tables: (usize, usize),
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub ruling_prob: f64,
    pub figures: (usize, usize),
    pub noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let p = PageSpec::default();
        Self {
            train: 20,
            val: 5,
            test: 5,
            width: p.width,
            height: p.height,
            tables: p.tables,
            rows: p.rows,
            cols: p.cols,
            ruling_prob: p.ruling_prob,
            figures: p.figures,
            noise: p.noise,
        }
    }
}

impl CorpusConfig {
    pub fn page_spec(&self, seed: u64) -> PageSpec {
        PageSpec {
            width: self.width,
            height: self.height,
            tables: self.tables,
            rows: self.rows,
            cols: self.cols,
            ruling_prob: self.ruling_prob,
            figures: self.figures,
            noise: self.noise,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `[height, width]` the pages are letterboxed to.
    pub input_size: [usize; 2],
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_iters: usize,
    /// Starting fraction of `lr` during warmup.
    pub warmup_ratio: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_grad_norm: Option<f64>,
    /// Reshuffle the page order every epoch.
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            input_size: [256, 192],
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            momentum: 0.9,
            warmup_iters: 30,
            warmup_ratio: 0.1,
            decay_epochs: vec![13],
            decay_gamma: 0.1,
            epochs: 15,
            batch_size: 1,
            clip_grad_norm: Some(10.0),
            shuffle: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            input_size: [1200, 800],
            optimizer: OptimizerKind::Sgd,
            lr: 0.00125,
            momentum: 0.9,
            warmup_iters: 500,
            warmup_ratio: 0.0033,
            decay_epochs: vec![25, 40],
            decay_gamma: 0.1,
            epochs: 50,
            batch_size: 1,
            clip_grad_norm: None,
            shuffle: true,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warmup_iters: self.warmup_iters,
            warmup_ratio: self.warmup_ratio,
            decay_epochs: self.decay_epochs.clone(),
            gamma: self.decay_gamma,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thr: f64,
    /// `[lo, hi, step]` of `eval --sweep`.
    pub sweep: [f64; 3],
    pub aggregation: Aggregation,
    pub ap_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thr: 0.5,
            sweep: [0.5, 0.9, 0.1],
            aggregation: Aggregation::Micro,
            ap_mode: ApMode::AllPoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: CascadeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub multiscale: ScaleSet,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            preset: p,
            seed: 0,
            corpus: CorpusConfig::default(),
            model: CascadeConfig::default(),
            train: TrainConfig::toy(),
            eval: EvalConfig::default(),
            multiscale: ScaleSet::default(),
        };
        match p {
            Preset::Toy => Self {
                model: CascadeConfig {
                    nms_thr: 0.3,
                    ..base.model
                },
                ..base
            },
            Preset::Paper => Self {
                train: TrainConfig::paper(),
                ..base
            },
        }
    }

    /// Overlay `file` (a JSON object, possibly partial) on the preset it
    /// names, or on `fallback` when it names none.
    pub fn from_value(file: Value, fallback: Preset) -> std::result::Result<Self, String> {
        let preset = match file.get("preset") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| format!("preset: {e}"))?,
            None => fallback,
        };
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("config serialises");
        merge(&mut merged, file);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, fallback: Preset) -> Result<Self> {
        let value = match path {
            Some(p) => {
                let s = std::fs::read_to_string(p).map_err(Error::io(p))?;
                serde_json::from_str(&s).map_err(Error::json(p))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(value, fallback).map_err(Error::Config)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.multiscale.validate().map_err(|e| e.to_string())?;
        self.corpus.page_spec(self.seed).validate().map_err(|e| e.to_string())?;
        let t = &self.train;
        if t.batch_size != 1 {
            return Err(format!("batch_size {} unsupported: training runs one image per step", t.batch_size));
        }
        if !(t.lr > 0.0) || t.epochs == 0 {
            return Err("lr and epochs must be positive".into());
        }
        if t.input_size.contains(&0) {
            return Err("input_size must be positive".into());
        }
        if t.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err("decay_epochs must increase".into());
        }
        if !(0.0..=1.0).contains(&t.warmup_ratio) || !(0.0..1.0).contains(&t.momentum) {
            return Err("warmup_ratio must lie in [0, 1] and momentum in [0, 1)".into());
        }
        if t.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err("clip_grad_norm must be positive".into());
        }
        let e = &self.eval;
        if !(e.iou_thr > 0.0 && e.iou_thr <= 1.0) {
            return Err("eval.iou_thr must lie in (0, 1]".into());
        }
        if !(e.sweep[2] > 0.0) || e.sweep[0] > e.sweep[1] {
            return Err("eval.sweep must be [lo, hi, step] with lo ≤ hi and step > 0".into());
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
