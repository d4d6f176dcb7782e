//! Multi-scale test-time voting: detect at several image scales and keep
//! only boxes that enough distinct scales agree on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::geometry::{iou, score_order, BBox, Detection};
use crate::image::GrayImage;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ScaleSet {
    /// Ascending resize factors; one of them is 1.
    pub factors: Vec<f64>,
    /// Distinct scales a cluster must span to survive.
    pub quorum: usize,
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self {
            factors: vec![0.7, 0.8, 0.9, 1.0, 1.15, 1.3, 1.5],
            quorum: 4,
        }
    }
}

impl ScaleSet {
    pub fn new(factors: Vec<f64>, quorum: usize) -> Result<Self> {
        let s = Self { factors, quorum };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.factors;
        if f.is_empty() || f.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("scale factors must be positive".into()));
        }
        if f.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("scale factors must ascend strictly: {f:?}")));
        }
        if !f.contains(&1.0) {
            return Err(Error::Config("scale factors must include 1.0".into()));
        }
        if self.quorum == 0 || self.quorum > f.len() {
            return Err(Error::Config(format!("quorum {} outside 1..={}", self.quorum, f.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VoteMode {
    /// Score-weighted mean of member boxes.
    #[default]
    Fuse,
    /// The seed's box.
    KeepSeed,
}

/// A seed detection and the agreeing detections from other scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCluster {
    /// The seed comes first.
    pub members: Vec<Detection>,
}

impl DetectionCluster {
    pub fn seed(&self) -> &Detection {
        &self.members[0]
    }

    pub fn distinct_scales(&self) -> usize {
        let mut tags: Vec<Option<usize>> = self.members.iter().map(|d| d.scale_tag).collect();
        tags.sort_unstable();
        tags.dedup();
        tags.len()
    }
}

/// Greedy clustering: the highest-scoring unclustered detection seeds a
/// cluster, which absorbs every unclustered detection of the seed's class
/// with IoU ≥ `iou_thr` against the seed, at most one per scale tag (the
/// best-scoring one; the seed's own tag is already taken).
pub fn cluster_detections(dets: &[Detection], iou_thr: f64) -> Vec<DetectionCluster> {
    let order = score_order(dets.iter().map(|d| d.score));
    let mut used = vec![false; dets.len()];
    let mut out = Vec::new();
    for &s in &order {
        if used[s] {
            continue;
        }
        used[s] = true;
        let seed = dets[s];
        let mut members = vec![seed];
        let mut tags = vec![seed.scale_tag];
        for &j in &order {
            let d = &dets[j];
            if used[j] || d.class_id != seed.class_id || tags.contains(&d.scale_tag) {
                continue;
            }
            if iou(&seed.bbox, &d.bbox) >= iou_thr {
                used[j] = true;
                tags.push(d.scale_tag);
                members.push(*d);
            }
        }
        out.push(DetectionCluster { members });
    }
    out
}

/// One detection per cluster: score is the mean member score, class the
/// seed's; the box is the score-weighted corner mean (plain mean if every
/// score is zero).
pub fn fuse_cluster(c: &DetectionCluster, mode: VoteMode) -> Detection {
    let seed = *c.seed();
    let n = c.members.len() as f64;
    let score = if c.members.len() == 1 {
        seed.score
    } else {
        c.members.iter().map(|d| d.score).sum::<f64>() / n
    };
    let bbox = match mode {
        _ if c.members.len() == 1 => seed.bbox,
        VoteMode::KeepSeed => seed.bbox,
        VoteMode::Fuse => {
            let wsum: f64 = c.members.iter().map(|d| d.score).sum();
            let w = |d: &Detection| if wsum > 0.0 { d.score / wsum } else { 1.0 / n };
            let mut acc = [0.0; 4];
            for d in &c.members {
                let k = w(d);
                acc[0] += k * d.bbox.x1;
                acc[1] += k * d.bbox.y1;
                acc[2] += k * d.bbox.x2;
                acc[3] += k * d.bbox.y2;
            }
            BBox {
                x1: acc[0],
                y1: acc[1],
                x2: acc[2],
                y2: acc[3],
            }
        }
    };
    Detection {
        bbox,
        score,
        class_id: seed.class_id,
        scale_tag: None,
    }
}

/// Cluster pooled per-scale detections and keep clusters spanning at least
/// `quorum` scales.
pub fn vote(dets: &[Detection], quorum: usize, iou_thr: f64, mode: VoteMode) -> Vec<Detection> {
    cluster_detections(dets, iou_thr)
        .iter()
        .filter(|c| c.distinct_scales() >= quorum)
        .map(|c| fuse_cluster(c, mode))
        .collect()
}

/// Cluster IoU used by [`detect_multiscale`].
pub const CLUSTER_IOU: f64 = 0.5;

/// Detect on every rescaled copy of `image`, map boxes back to the original
/// frame and vote.
pub fn detect_multiscale(model: &DetectorModel, image: &GrayImage, scales: &ScaleSet, mode: VoteMode) -> Result<Vec<Detection>> {
    scales.validate()?;
    let mut pooled = Vec::new();
    for (tag, &f) in scales.factors.iter().enumerate() {
        let img = image.rescale(f);
        let kx = image.width as f64 / img.width as f64;
        let ky = image.height as f64 / img.height as f64;
        for d in model.detect(&img.to_input())? {
            let b = &d.bbox;
            let bbox = if img.width == image.width && img.height == image.height {
                *b
            } else {
                BBox {
                    x1: b.x1 * kx,
                    y1: b.y1 * ky,
                    x2: b.x2 * kx,
                    y2: b.y2 * ky,
                }
            };
            pooled.push(Detection {
                bbox,
                scale_tag: Some(tag),
                ..d
            });
        }
    }
    Ok(vote(&pooled, scales.quorum, CLUSTER_IOU, mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(x1: f64, y1: f64, x2: f64, y2: f64, s: f64, tag: usize) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            score: s,
            class_id: 0,
            scale_tag: Some(tag),
        }
    }

    #[test]
    fn default_set_is_valid() {
        let s = ScaleSet::default();
        s.validate().unwrap();
        assert_eq!(s.factors.len(), 7);
        assert!(ScaleSet::new(vec![0.5, 0.9], 1).is_err());
        assert!(ScaleSet::new(vec![1.0, 0.5], 1).is_err());
        assert!(ScaleSet::new(vec![1.0], 2).is_err());
        assert!(ScaleSet::new(vec![1.0], 1).is_ok());
    }

    #[test]
    fn perfect_agreement_and_separation() {
        let same: Vec<_> = (0..7).map(|t| d(0.0, 0.0, 10.0, 10.0, 0.9, t)).collect();
        let c = cluster_detections(&same, 0.5);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 7);
        let two = [d(0.0, 0.0, 10.0, 10.0, 0.9, 0), d(50.0, 50.0, 60.0, 60.0, 0.8, 1)];
        assert_eq!(cluster_detections(&two, 0.5).len(), 2);
    }

    #[test]
    fn one_member_per_scale() {
        let dets = [d(0.0, 0.0, 10.0, 10.0, 0.9, 0), d(0.0, 0.0, 10.0, 10.0, 0.8, 0), d(0.0, 0.0, 10.0, 10.0, 0.7, 1)];
        let c = cluster_detections(&dets, 0.5);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].members.len(), 2);
        assert_eq!(c[0].members[1].score, 0.7);
    }

    #[test]
    fn fusion() {
        let c = DetectionCluster {
            members: vec![d(0.0, 0.0, 2.0, 2.0, 0.5, 0), d(0.0, 0.0, 4.0, 4.0, 0.5, 1)],
        };
        let f = fuse_cluster(&c, VoteMode::Fuse);
        assert_eq!((f.bbox.x2, f.bbox.y2), (3.0, 3.0));
        assert_eq!(f.score, 0.5);
        assert_eq!(fuse_cluster(&c, VoteMode::KeepSeed).bbox.x2, 2.0);
        let c = DetectionCluster {
            members: vec![d(1.0, 1.0, 5.0, 6.0, 0.9, 0), d(1.0, 1.0, 5.0, 6.0, 0.3, 1)],
        };
        let f = fuse_cluster(&c, VoteMode::Fuse);
        assert!((f.bbox.x2 - 5.0).abs() < 1e-12 && f.score <= 0.9);
    }

    #[test]
    fn quorum_rule() {
        let planted = |n: usize| -> Vec<Detection> { (0..n).map(|t| d(10.0, 10.0, 50.0, 40.0, 0.8, t)).collect() };
        assert!(vote(&planted(3), 4, 0.5, VoteMode::Fuse).is_empty());
        assert_eq!(vote(&planted(4), 4, 0.5, VoteMode::Fuse).len(), 1);
        assert_eq!(vote(&planted(7), 7, 0.5, VoteMode::Fuse).len(), 1);
    }
}
