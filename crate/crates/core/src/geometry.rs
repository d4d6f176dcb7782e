//! Axis-aligned box arithmetic shared by training and evaluation.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Corner-form box in pixels, `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox)
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            x1: self.x1 * k,
            y1: self.y1 * k,
            x2: self.x2 * k,
            y2: self.y2 * k,
        }
    }

    /// Clip to `[0, width] × [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let b = Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// A scored, class-labelled box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
    /// Index of the test scale that produced the box, if any.
    pub scale_tag: Option<usize>,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, class_id: usize) -> Self {
        Self {
            bbox,
            score,
            class_id,
            scale_tag: None,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Largest `|dw|`, `|dh|` accepted by [`decode_deltas`] (after scaling by the
/// stds); keeps `exp` finite on wild regressor outputs.
pub const MAX_LOG_SCALE: f64 = 8.0;

/// `((tx−ax)/aw, (ty−ay)/ah, ln(tw/aw), ln(th/ah))`, divided by `stds`.
pub fn encode_deltas(anchor: &BBox, target: &BBox, stds: &[f64; 4]) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tx - ax) / aw / stds[0],
        (ty - ay) / ah / stds[1],
        libm::log(target.width() / aw) / stds[2],
        libm::log(target.height() / ah) / stds[3],
    ]
}

/// Inverse of [`encode_deltas`]. With `clip = Some((w, h))` the result is
/// clipped to the image; `None` means the box came out degenerate.
pub fn decode_deltas(anchor: &BBox, deltas: &[f64; 4], stds: &[f64; 4], clip: Option<(f64, f64)>) -> Option<BBox> {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * stds[0] * aw;
    let cy = ay + deltas[1] * stds[1] * ah;
    let dw = (deltas[2] * stds[2]).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let dh = (deltas[3] * stds[3]).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let w = aw * libm::exp(dw);
    let h = ah * libm::exp(dh);
    let b = BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    };
    match clip {
        Some((iw, ih)) => b.clip(iw, ih),
        None => b.is_valid().then_some(b),
    }
}

/// Indices of `scores` in descending order, ties broken by index.
pub fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression: visit by descending score (ties by input
/// index), drop anything with IoU above `iou_thr` against a kept box.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    nms_indices(&dets.iter().map(|d| d.bbox).collect::<Vec<_>>(), &dets.iter().map(|d| d.score).collect::<Vec<_>>(), iou_thr)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// [`nms`] over parallel box/score slices, returning kept indices.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores.iter().copied()) {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thr) {
            kept.push(i);
        }
    }
    kept
}

/// Label of one proposal after matching against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Positive(usize),
    Negative,
    /// Between the negative and positive thresholds; neither sampled.
    Ignored,
}

impl Assignment {
    pub fn is_positive(&self) -> bool {
        matches!(self, Assignment::Positive(_))
    }

    pub fn gt(&self) -> Option<usize> {
        match self {
            Assignment::Positive(g) => Some(*g),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignParams {
    pub pos_thr: f64,
    pub neg_thr: f64,
    /// Each ground truth's best proposal is forced positive when their IoU
    /// reaches this value.
    pub min_rescue_iou: f64,
}

/// Positive to the argmax-IoU ground truth at `pos_thr`, background below
/// it, with each ground truth's best proposal rescued.
pub fn assign(proposals: &[BBox], gts: &[BBox], pos_thr: f64) -> Vec<Assignment> {
    assign_with(
        proposals,
        gts,
        &AssignParams {
            pos_thr,
            neg_thr: pos_thr,
            min_rescue_iou: f64::MIN_POSITIVE,
        },
    )
}

pub fn assign_with(proposals: &[BBox], gts: &[BBox], p: &AssignParams) -> Vec<Assignment> {
    let ious: Vec<Vec<f64>> = proposals
        .iter()
        .map(|b| gts.iter().map(|g| iou(b, g)).collect())
        .collect();
    let mut out: Vec<Assignment> = ious
        .iter()
        .map(|row| {
            let best = row
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |acc, (j, &v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= p.pos_thr => Assignment::Positive(j),
                Some((_, v)) if v >= p.neg_thr => Assignment::Ignored,
                _ => Assignment::Negative,
            }
        })
        .collect();
    for j in 0..gts.len() {
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in ious.iter().enumerate() {
            if best.map_or(true, |(_, bv)| row[j] > bv) {
                best = Some((i, row[j]));
            }
        }
        if let Some((i, v)) = best {
            if v >= p.min_rescue_iou && v > 0.0 {
                out[i] = Assignment::Positive(j);
            }
        }
    }
    out
}

/// Up to `total` indices: positives capped at `⌊ratio·total⌋`, the rest
/// filled with negatives, each group drawn uniformly without replacement.
pub fn sample_rois(assignments: &[Assignment], ratio: f64, total: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..assignments.len())
        .filter(|&i| assignments[i].is_positive())
        .collect();
    let mut neg: Vec<usize> = (0..assignments.len())
        .filter(|&i| assignments[i] == Assignment::Negative)
        .collect();
    let max_pos = libm::floor(ratio * total as f64) as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    neg.shuffle(rng);
    neg.truncate(total - pos.len());
    pos.extend(neg);
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn rand_box(rng: &mut impl Rng) -> BBox {
        let x = rng.gen_range(0.0..50.0);
        let y = rng.gen_range(0.0..50.0);
        b(x, y, x + rng.gen_range(1.0..40.0), y + rng.gen_range(1.0..40.0))
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn delta_examples() {
        let one = [1.0; 4];
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(encode_deltas(&a, &a, &one), [0.0; 4]);
        let d = encode_deltas(&a, &b(0.0, 0.0, 4.0, 4.0), &one);
        let ln2 = core::f64::consts::LN_2;
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
        assert!((d[2] - ln2).abs() < 1e-12 && (d[3] - ln2).abs() < 1e-12);

        assert_eq!(decode_deltas(&a, &[0.0; 4], &one, None), Some(a));
        let wide = decode_deltas(&b(2.0, 2.0, 6.0, 4.0), &[0.0, 0.0, ln2, 0.0], &one, None).unwrap();
        assert!((wide.width() - 8.0).abs() < 1e-12);
        assert!((wide.center().0 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn decode_clips_and_flags_degenerate() {
        let a = b(-5.0, -5.0, 5.0, 5.0);
        let c = decode_deltas(&a, &[0.0; 4], &[1.0; 4], Some((100.0, 100.0))).unwrap();
        assert_eq!(c, b(0.0, 0.0, 5.0, 5.0));
        let outside = b(200.0, 200.0, 210.0, 210.0);
        assert_eq!(decode_deltas(&outside, &[0.0; 4], &[1.0; 4], Some((100.0, 100.0))), None);
    }

    #[test]
    fn nms_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[Detection::new(a, 0.8, 1), Detection::new(a, 0.9, 1)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let kept = nms(
            &[
                Detection::new(a, 0.8, 1),
                Detection::new(b(20.0, 20.0, 30.0, 30.0), 0.9, 1),
            ],
            0.5,
        );
        assert_eq!(kept.len(), 2);
    }

    /// Literal greedy definition: keep the best, delete what it suppresses, recurse.
    fn nms_reference(dets: &[(usize, Detection)], thr: f64) -> Vec<usize> {
        if dets.is_empty() {
            return Vec::new();
        }
        let mut best = 0;
        for k in 1..dets.len() {
            let (s, bs) = (dets[k].1.score, dets[best].1.score);
            if s > bs || (s == bs && dets[k].0 < dets[best].0) {
                best = k;
            }
        }
        let keep = dets[best];
        let rest: Vec<(usize, Detection)> = dets
            .iter()
            .enumerate()
            .filter(|&(k, d)| k != best && iou(&d.1.bbox, &keep.1.bbox) <= thr)
            .map(|(_, d)| *d)
            .collect();
        let mut out = alloc::vec![keep.0];
        out.extend(nms_reference(&rest, thr));
        out
    }

    #[test]
    fn nms_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let dets: Vec<Detection> = (0..20)
                .map(|_| Detection::new(rand_box(&mut rng), (rng.gen_range(0..10) as f64) / 10.0, 1))
                .collect();
            let thr = rng.gen_range(0.1..0.9);
            let ours = nms_indices(
                &dets.iter().map(|d| d.bbox).collect::<Vec<_>>(),
                &dets.iter().map(|d| d.score).collect::<Vec<_>>(),
                thr,
            );
            let indexed: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
            assert_eq!(ours, nms_reference(&indexed, thr));
        }
    }

    #[test]
    fn assign_examples() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let a = assign(&[gt, b(50.0, 50.0, 60.0, 60.0)], &[gt], 0.5);
        assert_eq!(a, [Assignment::Positive(0), Assignment::Negative]);

        // 11×10 vs 10×10 sharing a corner: IoU = 100/110·... pick width so IoU ≈ 0.55
        let p = b(0.0, 0.0, 10.0 / 0.55, 10.0);
        assert!((iou(&p, &gt) - 0.55).abs() < 1e-12);
        // include the ground truth itself so rescue does not interfere
        let props = [p, gt];
        assert_eq!(assign(&props, &[gt], 0.5)[0], Assignment::Positive(0));
        assert_eq!(assign(&props, &[gt], 0.6)[0], Assignment::Negative);
    }

    #[test]
    fn rescue_forces_best_proposal() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let p = b(0.0, 0.0, 10.0, 30.0); // IoU 1/3
        assert_eq!(assign(&[p], &[gt], 0.5), [Assignment::Positive(0)]);
        let params = AssignParams {
            pos_thr: 0.7,
            neg_thr: 0.3,
            min_rescue_iou: 0.5,
        };
        assert_eq!(assign_with(&[p], &[gt], &params), [Assignment::Ignored]);
    }

    #[test]
    fn sampler_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all_pos = [Assignment::Positive(0); 10];
        assert_eq!(sample_rois(&all_pos, 0.25, 8, &mut rng).len(), 2);

        let all_neg = [Assignment::Negative; 10];
        let s = sample_rois(&all_neg, 0.25, 8, &mut rng);
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|&i| all_neg[i] == Assignment::Negative));

        let mixed: Vec<Assignment> = (0..30)
            .map(|i| if i % 3 == 0 { Assignment::Positive(0) } else { Assignment::Negative })
            .collect();
        let a = sample_rois(&mixed, 0.25, 16, &mut ChaCha8Rng::seed_from_u64(42));
        let b2 = sample_rois(&mixed, 0.25, 16, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b2);
        assert_eq!(a.iter().filter(|&&i| mixed[i].is_positive()).count(), 4);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..80.0f64, 0.5..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let (u, v) = (iou(&a, &c), iou(&c, &a));
            prop_assert_eq!(u, v);
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn deltas_roundtrip(a in arb_box(), t in arb_box()) {
            let stds = [0.1, 0.1, 0.2, 0.2];
            let d = encode_deltas(&a, &t, &stds);
            let r = decode_deltas(&a, &d, &stds, None).unwrap();
            for (p, q) in [r.x1, r.y1, r.x2, r.y2].iter().zip([t.x1, t.y1, t.x2, t.y2]) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn nms_output_is_sparse_subset(boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..15), thr in 0.1..0.9f64) {
            let dets: Vec<Detection> = boxes.iter().map(|&(b, s)| Detection::new(b, s, 1)).collect();
            let kept = nms(&dets, thr);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) <= thr);
                }
            }
        }

        #[test]
        fn positives_monotone_in_threshold(
            props in proptest::collection::vec(arb_box(), 1..12),
            gts in proptest::collection::vec(arb_box(), 1..4),
            u1 in 0.05..0.95f64,
            u2 in 0.05..0.95f64,
        ) {
            let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
            let a = assign(&props, &gts, lo);
            let c = assign(&props, &gts, hi);
            for (x, y) in a.iter().zip(&c) {
                if y.is_positive() {
                    prop_assert!(x.is_positive());
                }
            }
        }
    }
}
