//! Region proposal network: a shared 3×3 conv with sibling 1×1 objectness
//! and box-delta convs, run on every pyramid level.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::anchors::{gen_anchors, AnchorSpec};
use crate::backbone::FeaturePyramid;
use crate::deform::ConvLayer;
use crate::error::{Error, Result};
use crate::geometry::{assign_with, decode_deltas, encode_deltas, nms_indices, sample_rois, AssignParams, Assignment, BBox};
use crate::graph::{Graph, Var};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnHead {
    pub conv: ConvLayer,
    pub objectness: ConvLayer,
    pub deltas: ConvLayer,
    pub anchors_per_location: usize,
}

/// Raw per-level head outputs: objectness `[A × H × W]`, deltas `[4A × H × W]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnLevel {
    pub objectness: Var,
    pub deltas: Var,
}

/// All levels flattened into anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    /// `[N]` logits.
    pub objectness: Var,
    /// `[N × 4]`.
    pub deltas: Var,
    pub anchors: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalParams {
    pub k_pre: usize,
    pub k_post: usize,
    pub nms_thr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnTrainParams {
    pub assign: AssignParams,
    pub batch: usize,
    pub pos_fraction: f64,
    pub beta: f64,
}

const RPN_STDS: [f64; 4] = [1.0; 4];

impl RpnHead {
    pub fn new(store: &mut ParamStore, width: usize, anchors_per_location: usize, rng: &mut impl Rng) -> Self {
        let a = anchors_per_location;
        Self {
            conv: ConvLayer::new(store, "rpn.conv", width, width, 3, 1, rng),
            objectness: ConvLayer::new(store, "rpn.objectness", width, a, 1, 1, rng),
            deltas: ConvLayer::new(store, "rpn.deltas", width, 4 * a, 1, 1, rng),
            anchors_per_location: a,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pyr: &FeaturePyramid) -> Result<Vec<RpnLevel>> {
        if pyr.levels.is_empty() {
            return Err(Error::Config("empty feature pyramid".into()));
        }
        pyr.levels
            .iter()
            .map(|&p| {
                let h = self.conv.forward(g, store, p)?;
                let h = g.relu(h);
                Ok(RpnLevel {
                    objectness: self.objectness.forward(g, store, h)?,
                    deltas: self.deltas.forward(g, store, h)?,
                })
            })
            .collect()
    }

    /// Reorder every level into anchor order and concatenate.
    pub fn flatten(
        &self,
        g: &mut Graph,
        levels: &[RpnLevel],
        strides: &[usize],
        spec: &AnchorSpec,
    ) -> Result<RpnOutput> {
        let a = self.anchors_per_location;
        let mut objs = Vec::with_capacity(levels.len());
        let mut dels = Vec::with_capacity(levels.len());
        let mut anchors = Vec::new();
        for (lv, &stride) in levels.iter().zip(strides) {
            let s = g.shape(lv.objectness);
            let (h, w) = (s[1], s[2]);
            let hw = h * w;
            let n = hw * a;
            let obj_idx: Vec<usize> = (0..n).map(|i| (i % a) * hw + i / a).collect();
            let del_idx: Vec<usize> = (0..4 * n)
                .map(|j| {
                    let (i, c) = (j / 4, j % 4);
                    (4 * (i % a) + c) * hw + i / a
                })
                .collect();
            objs.push(g.gather(lv.objectness, &obj_idx, &[n])?);
            dels.push(g.gather(lv.deltas, &del_idx, &[n, 4])?);
            anchors.extend(gen_anchors(h, w, stride, spec));
        }
        Ok(RpnOutput {
            objectness: g.concat(&objs)?,
            deltas: g.concat(&dels)?,
            anchors,
        })
    }
}

/// Decode every anchor, keep the `k_pre` highest objectness, suppress at
/// `nms_thr` and return at most `k_post` boxes with their logits.
pub fn rpn_proposals(
    objectness: &[f64],
    deltas: &[f64],
    anchors: &[BBox],
    image: (f64, f64),
    p: &ProposalParams,
) -> Vec<(BBox, f64)> {
    let order = crate::geometry::score_order(objectness.iter().copied());
    let mut boxes = Vec::with_capacity(p.k_pre);
    let mut scores = Vec::with_capacity(p.k_pre);
    for i in order.into_iter().take(p.k_pre) {
        let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
        if let Some(b) = decode_deltas(&anchors[i], &d, &RPN_STDS, Some(image)) {
            boxes.push(b);
            scores.push(objectness[i]);
        }
    }
    let mut keep = nms_indices(&boxes, &scores, p.nms_thr);
    keep.truncate(p.k_post);
    keep.into_iter().map(|i| (boxes[i], scores[i])).collect()
}

/// Labels and a sampled anchor batch for one image.
pub fn rpn_targets(anchors: &[BBox], gts: &[BBox], p: &RpnTrainParams, rng: &mut impl Rng) -> (Vec<Assignment>, Vec<usize>) {
    let labels = assign_with(anchors, gts, &p.assign);
    let picked = sample_rois(&labels, p.pos_fraction, p.batch, rng);
    (labels, picked)
}

/// Objectness BCE over the sampled anchors and smooth-L1 on the positives'
/// deltas (`None` when no positive was sampled).
pub fn rpn_loss(
    g: &mut Graph,
    out: &RpnOutput,
    gts: &[BBox],
    labels: &[Assignment],
    picked: &[usize],
    beta: f64,
) -> Result<(Var, Option<Var>)> {
    if picked.is_empty() {
        return Err(Error::Config(format!("no anchors to sample among {}", out.anchors.len())));
    }
    let targets: Vec<f64> = picked
        .iter()
        .map(|&i| if labels[i].is_positive() { 1.0 } else { 0.0 })
        .collect();
    let logits = g.gather(out.objectness, picked, &[picked.len()])?;
    let cls = g.bce_with_logits(logits, &targets)?;

    let pos: Vec<usize> = picked.iter().copied().filter(|&i| labels[i].is_positive()).collect();
    if pos.is_empty() {
        return Ok((cls, None));
    }
    let mut tgt = Vec::with_capacity(4 * pos.len());
    for &i in &pos {
        let gt = labels[i].gt().unwrap();
        tgt.extend(encode_deltas(&out.anchors[i], &gts[gt], &RPN_STDS));
    }
    let pred = g.gather_rows(out.deltas, &pos)?;
    let tgt = g.constant(Tensor::new(&[pos.len(), 4], tgt)?);
    let reg = g.smooth_l1(pred, tgt, beta)?;
    Ok((cls, Some(reg)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FeaturePyramid;
    use crate::gradcheck::rand_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, RpnHead, Graph, FeaturePyramid) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = RpnHead::new(&mut store, 4, 3, &mut rng);
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng, &[4, 4, 3]));
        let b = g.constant(rand_tensor(&mut rng, &[4, 2, 2]));
        let pyr = FeaturePyramid {
            levels: alloc::vec![a, b],
            strides: alloc::vec![8, 16],
        };
        (store, head, g, pyr)
    }

    #[test]
    fn channel_counts() {
        let (store, head, mut g, pyr) = setup();
        let lv = head.forward(&mut g, &store, &pyr).unwrap();
        assert_eq!(g.shape(lv[0].objectness), &[3, 4, 3]);
        assert_eq!(g.shape(lv[0].deltas), &[12, 4, 3]);
        let out = head.flatten(&mut g, &lv, &pyr.strides, &AnchorSpec::default()).unwrap();
        assert_eq!(out.anchors.len(), 3 * 12 + 3 * 4);
        assert_eq!(g.shape(out.objectness), &[48]);
        assert_eq!(g.shape(out.deltas), &[48, 4]);
        // anchor 5 = location 1, ratio 2 → channel 2 at spatial index 1
        assert_eq!(g.data(out.objectness)[5], g.data(lv[0].objectness)[2 * 12 + 1]);
        assert_eq!(g.data(out.deltas)[5 * 4 + 3], g.data(lv[0].deltas)[(4 * 2 + 3) * 12 + 1]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let (mut store, head, mut g, pyr) = setup();
        store.get_mut(head.objectness.weight).data_mut().fill(0.0);
        store.get_mut(head.objectness.bias).data_mut().fill(0.3);
        let lv = head.forward(&mut g, &store, &pyr).unwrap();
        assert!(g.data(lv[1].objectness).iter().all(|&v| v == 0.3));
    }

    #[test]
    fn loss_reaches_rpn_weights() {
        let (mut store, head, mut g, pyr) = setup();
        let lv = head.forward(&mut g, &store, &pyr).unwrap();
        let out = head.flatten(&mut g, &lv, &pyr.strides, &AnchorSpec::default()).unwrap();
        // several boxes so positives do not all sit on one relu-dead location
        let gts = [
            BBox::new(4.0, 4.0, 60.0, 30.0).unwrap(),
            BBox::new(0.0, 0.0, 24.0, 32.0).unwrap(),
            BBox::new(8.0, 10.0, 24.0, 30.0).unwrap(),
        ];
        let p = RpnTrainParams {
            assign: AssignParams {
                pos_thr: 0.7,
                neg_thr: 0.3,
                min_rescue_iou: 0.0,
            },
            batch: 16,
            pos_fraction: 0.5,
            beta: 1.0,
        };
        let (labels, picked) = rpn_targets(&out.anchors, &gts, &p, &mut ChaCha8Rng::seed_from_u64(1));
        let (cls, reg) = rpn_loss(&mut g, &out, &gts, &labels, &picked, p.beta).unwrap();
        let total = g.add(cls, reg.unwrap()).unwrap();
        g.backward(total).unwrap();
        g.accumulate_into(&mut store);
        for l in [head.conv, head.objectness, head.deltas] {
            assert!(store.get(l.weight).grad.as_ref().unwrap().iter().any(|&v| v != 0.0), "{}", store.name(l.weight));
        }
    }

    #[test]
    fn proposal_contracts() {
        let anchors = [
            BBox::new(-5.0, -5.0, 20.0, 20.0).unwrap(),
            BBox::new(-5.0, -5.0, 20.0, 20.0).unwrap(),
            BBox::new(40.0, 40.0, 90.0, 70.0).unwrap(),
        ];
        let obj = [0.1, 0.5, 0.3];
        let del = [0.0; 12];
        let p = ProposalParams {
            k_pre: 3,
            k_post: 10,
            nms_thr: 0.7,
        };
        let props = rpn_proposals(&obj, &del, &anchors, (64.0, 64.0), &p);
        assert_eq!(props.len(), 2);
        assert_eq!(props[0].1, 0.5);
        assert!(props.iter().all(|(b, _)| b.within(64.0, 64.0)));
        let one = rpn_proposals(&obj, &del, &anchors, (64.0, 64.0), &ProposalParams { k_post: 1, ..p });
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].1, 0.5);
    }
}
