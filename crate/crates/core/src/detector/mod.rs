//! The cascade detector: anchors and proposals, RoI align, and a chain of
//! classification/regression heads trained at rising IoU thresholds.

pub mod anchors;
pub mod cascade;
pub mod head;
pub mod roi;
pub mod rpn;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{default_stages, CompositeBackbone, FeaturePyramid, Fpn, StageSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub use anchors::{gen_anchors, AnchorSpec};
pub use cascade::{CascadeTrace, StepLosses, TrainPlan};
pub use head::{CascadeHead, HeadOutput, Linear};
pub use roi::{cell_centres, roi_level};
pub use rpn::{rpn_proposals, ProposalParams, RpnHead, RpnOutput, RpnTrainParams};

/// Every architectural and training-time knob of the detector.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CascadeConfig {
    /// Foreground classes (background is implicit).
    pub num_classes: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    /// First backbone stage fed to the pyramid.
    pub pyramid_from: usize,
    pub fpn_width: usize,
    pub composite_enabled: bool,
    pub deformable_enabled: bool,
    pub anchors: AnchorSpec,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_rescue_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub proposals_pre: usize,
    pub proposals_post: usize,
    pub proposal_nms: f64,
    pub stage_ious: Vec<f64>,
    pub stage_stds: Vec<[f64; 4]>,
    pub roi_out: usize,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub head_hidden: usize,
    pub smooth_l1_beta: f64,
    pub score_thr: f64,
    pub nms_thr: f64,
    pub max_detections: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            in_channels: 1,
            stem_channels: 16,
            stages: default_stages(),
            pyramid_from: 1,
            fpn_width: 32,
            composite_enabled: true,
            deformable_enabled: true,
            anchors: AnchorSpec::default(),
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_rescue_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            proposals_pre: 200,
            proposals_post: 50,
            proposal_nms: 0.7,
            stage_ious: vec![0.5, 0.6, 0.7],
            stage_stds: vec![[0.1, 0.1, 0.2, 0.2], [0.05, 0.05, 0.1, 0.1], [0.033, 0.033, 0.067, 0.067]],
            roi_out: 4,
            roi_batch: 64,
            roi_pos_fraction: 0.25,
            head_hidden: 128,
            smooth_l1_beta: 1.0,
            score_thr: 0.5,
            nms_thr: 0.5,
            max_detections: 100,
        }
    }
}

fn unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_ious.is_empty() {
            return Err(Error::Config("at least one cascade stage is required".into()));
        }
        for &u in &self.stage_ious {
            unit_open("stage IoU", u)?;
        }
        if self.stage_ious.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("stage IoUs must increase strictly: {:?}", self.stage_ious)));
        }
        if self.stage_stds.len() != self.stage_ious.len() {
            return Err(Error::Config("one std vector per cascade stage".into()));
        }
        if self.stage_stds.iter().flatten().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("delta stds must be positive".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if self.stages.len() < self.pyramid_from + 2 {
            return Err(Error::Config("the pyramid needs at least two backbone stages".into()));
        }
        self.anchors.validate()?;
        unit_open("rpn_pos_iou", self.rpn_pos_iou)?;
        if !(self.rpn_neg_iou > 0.0 && self.rpn_neg_iou <= self.rpn_pos_iou) {
            return Err(Error::Config("rpn_neg_iou must lie in (0, rpn_pos_iou]".into()));
        }
        unit_open("proposal_nms", self.proposal_nms)?;
        unit_open("nms_thr", self.nms_thr)?;
        if self.proposals_pre < self.proposals_post || self.proposals_post == 0 {
            return Err(Error::Config("need proposals_pre ≥ proposals_post > 0".into()));
        }
        if self.num_classes == 0 || self.roi_out == 0 || self.head_hidden == 0 || self.fpn_width == 0 {
            return Err(Error::Config("class count and layer widths must be positive".into()));
        }
        if self.rpn_batch == 0 || self.roi_batch == 0 {
            return Err(Error::Config("sample batches must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.score_thr) {
            return Err(Error::Config("score_thr must lie in [0, 1]".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be positive".into()));
        }
        Ok(())
    }

    /// Stage specs with the deformable toggle applied.
    pub fn effective_stages(&self) -> Vec<StageSpec> {
        self.stages
            .iter()
            .map(|s| StageSpec {
                deformable: s.deformable && self.deformable_enabled,
                ..*s
            })
            .collect()
    }
}

/// Independent RNG stream per component, so toggling one part of the
/// architecture leaves the initial weights of every other part unchanged.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Backbone, pyramid, proposal network and cascade heads, with all weights
/// in one parameter store.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub cfg: CascadeConfig,
    pub store: ParamStore,
    pub backbone: CompositeBackbone,
    pub fpn: Fpn,
    pub rpn: RpnHead,
    pub heads: Vec<CascadeHead>,
}

impl DetectorModel {
    pub fn new(cfg: CascadeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let stages = cfg.effective_stages();
        let backbone = CompositeBackbone::new(
            &mut store,
            cfg.in_channels,
            cfg.stem_channels,
            &stages,
            cfg.composite_enabled,
            &mut stream(seed, 1),
            &mut stream(seed, 2),
        )?;
        let chans = &backbone.lead.channels()[cfg.pyramid_from..];
        let fpn = Fpn::new(&mut store, chans, cfg.fpn_width, &mut stream(seed, 3))?;
        let rpn = RpnHead::new(&mut store, cfg.fpn_width, cfg.anchors.per_location(), &mut stream(seed, 4));
        let d_in = cfg.fpn_width * cfg.roi_out * cfg.roi_out;
        let heads = (0..cfg.stage_ious.len())
            .map(|t| {
                CascadeHead::new(
                    &mut store,
                    &format!("stage{}", t + 1),
                    d_in,
                    cfg.head_hidden,
                    cfg.num_classes,
                    &mut stream(seed, 5 + t as u64),
                )
            })
            .collect();
        Ok(Self {
            cfg,
            store,
            backbone,
            fpn,
            rpn,
            heads,
        })
    }

    /// Strides of the pyramid levels.
    pub fn strides(&self) -> Vec<usize> {
        self.backbone.strides()[self.cfg.pyramid_from..].to_vec()
    }

    /// Box side that RoI align maps onto the finest pyramid level.
    pub fn canonical_roi(&self) -> f64 {
        self.cfg.anchors.scale * self.strides()[0] as f64
    }

    pub fn features(&self, g: &mut Graph, image: &Tensor) -> Result<FeaturePyramid> {
        if image.shape().len() != 3 || image.shape()[0] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "detector input",
                lhs: vec![self.cfg.in_channels],
                rhs: image.shape().to_vec(),
            });
        }
        let x = g.constant(image.clone());
        let stages = self.backbone.forward(g, &self.store, x)?;
        self.fpn
            .forward(g, &self.store, &stages[self.cfg.pyramid_from..], &self.strides())
    }

    pub fn rpn_output(&self, g: &mut Graph, pyr: &FeaturePyramid) -> Result<RpnOutput> {
        let levels = self.rpn.forward(g, &self.store, pyr)?;
        self.rpn.flatten(g, &levels, &pyr.strides, &self.cfg.anchors)
    }

    pub fn proposal_params(&self) -> ProposalParams {
        ProposalParams {
            k_pre: self.cfg.proposals_pre,
            k_post: self.cfg.proposals_post,
            nms_thr: self.cfg.proposal_nms,
        }
    }

    pub fn rpn_train_params(&self) -> RpnTrainParams {
        RpnTrainParams {
            assign: crate::geometry::AssignParams {
                pos_thr: self.cfg.rpn_pos_iou,
                neg_thr: self.cfg.rpn_neg_iou,
                min_rescue_iou: self.cfg.rpn_rescue_iou,
            },
            batch: self.cfg.rpn_batch,
            pos_fraction: self.cfg.rpn_pos_fraction,
            beta: self.cfg.smooth_l1_beta,
        }
    }

    pub(crate) fn roi_features(&self, g: &mut Graph, pyr: &FeaturePyramid, rois: &[crate::geometry::BBox]) -> Result<Var> {
        g.roi_align(&pyr.levels, &pyr.strides, rois, self.cfg.roi_out, self.canonical_roi())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(CascadeConfig::default().validate().is_ok());
        let bad = CascadeConfig {
            stage_ious: vec![0.5, 0.5, 0.7],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CascadeConfig {
            stage_ious: vec![0.5, 1.0],
            stage_stds: vec![[1.0; 4]; 2],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CascadeConfig {
            stage_stds: vec![[1.0; 4]],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CascadeConfig {
            proposals_pre: 10,
            proposals_post: 20,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn model_has_one_head_per_stage() {
        let cfg = CascadeConfig {
            stage_ious: vec![0.5, 0.6],
            stage_stds: vec![[0.1, 0.1, 0.2, 0.2]; 2],
            ..Default::default()
        };
        let m = DetectorModel::new(cfg, 0).unwrap();
        assert_eq!(m.heads.len(), 2);
        assert_eq!(m.strides(), [8, 16, 32]);
        assert_eq!(m.canonical_roi(), 64.0);
    }

    #[test]
    fn toggles_share_initial_weights() {
        let full = DetectorModel::new(CascadeConfig::default(), 7).unwrap();
        let base = DetectorModel::new(
            CascadeConfig {
                composite_enabled: false,
                deformable_enabled: false,
                ..Default::default()
            },
            7,
        )
        .unwrap();
        for (name, t) in base.store.iter() {
            let id = full.store.find(name).unwrap();
            assert_eq!(full.store.get(id).data(), t.data(), "{name}");
        }
        assert!(full.store.len() > base.store.len());
    }
}
