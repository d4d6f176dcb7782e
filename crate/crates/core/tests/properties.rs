use cdecnet_core::checkpoint;
use cdecnet_core::deform::{ConvKernel, OffsetField};
use cdecnet_core::detector::{CascadeConfig, DetectorModel};
use cdecnet_core::geometry::{decode_deltas, encode_deltas, iou, nms, BBox, Detection};
use cdecnet_core::metrics::{iou_sweep, match_detections, thresholds, Aggregation};
use cdecnet_core::msvote::{vote, VoteMode, CLUSTER_IOU};
use cdecnet_core::synth::{blank_page, generate_page, PageSpec};
use cdecnet_core::Tensor;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((arb_box(), 0.0..1.0f64), 0..max)
        .prop_map(|v| v.into_iter().map(|(b, s)| Detection::new(b, s, 0)).collect())
}

proptest! {
    #[test]
    fn nms_keeps_no_overlapping_pair(dets in arb_dets(12), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                prop_assert!(a.score >= b.score);
            }
        }
        prop_assert_eq!(nms(&kept, thr), kept);
    }

    #[test]
    fn match_counts_are_consistent(dets in arb_dets(10), gts in prop::collection::vec(arb_box(), 0..10), thr in 0.1..1.0f64) {
        let m = match_detections(&dets, &gts, thr);
        prop_assert_eq!(m.tp + m.fn_, gts.len());
        prop_assert_eq!(m.tp + m.fp, dets.len());
        let mut p: Vec<usize> = m.pairs.iter().map(|x| x.0).collect();
        let mut g: Vec<usize> = m.pairs.iter().map(|x| x.1).collect();
        p.sort_unstable();
        p.dedup();
        g.sort_unstable();
        g.dedup();
        prop_assert_eq!(p.len(), m.tp);
        prop_assert_eq!(g.len(), m.tp);
        prop_assert!(m.pairs.iter().all(|&(_, _, v)| v >= thr));
    }

    #[test]
    fn sweep_recall_and_f1_never_rise(dets in arb_dets(10), gts in prop::collection::vec(arb_box(), 1..10)) {
        let rows = iou_sweep(&[dets], &[gts], &thresholds(0.5, 0.9, 0.1), Aggregation::Micro);
        prop_assert_eq!(rows.len(), 5);
        for w in rows.windows(2) {
            prop_assert!(w[1].recall <= w[0].recall);
            prop_assert!(w[1].f1 <= w[0].f1);
        }
    }

    #[test]
    fn deltas_roundtrip(a in arb_box(), t in arb_box()) {
        let stds = [0.1, 0.1, 0.2, 0.2];
        let b = decode_deltas(&a, &encode_deltas(&a, &t, &stds), &stds, None).unwrap();
        for (p, q) in [b.x1, b.y1, b.x2, b.y2].iter().zip([t.x1, t.y1, t.x2, t.y2]) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn vote_output_bounded_by_input(dets in arb_dets(14), quorum in 1usize..4) {
        let tagged: Vec<Detection> = dets
            .iter()
            .enumerate()
            .map(|(i, d)| Detection { scale_tag: Some(i % 7), ..*d })
            .collect();
        let out = vote(&tagged, quorum, CLUSTER_IOU, VoteMode::Fuse);
        prop_assert!(out.len() <= tagged.len());
        if quorum == 1 {
            prop_assert_eq!(out.is_empty(), tagged.is_empty());
        }
    }

    #[test]
    fn zero_offsets_match_conv(seed in 0u64..1000, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (c, o) = (r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(k..k + 6), r.gen_range(k..k + 6));
        let mut t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = t(&[c, h, w]);
        let kern = ConvKernel { weight: t(&[o, c, k, k]), bias: t(&[o]), stride, padding: k / 2 };
        let geom = kern.geom(&x).unwrap();
        let a = kern.conv2d(&x).unwrap();
        let b = kern.deform_conv2d(&x, &OffsetField::zeros(k * k, geom.out_h, geom.out_w)).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn checkpoint_roundtrips_default_model() {
    let m = DetectorModel::new(CascadeConfig::default(), 4).unwrap();
    let back = checkpoint::decode(&checkpoint::encode(&m.store)).unwrap();
    assert_eq!(back.len(), m.store.len());
    for ((na, a), (nb, b)) in m.store.iter().zip(back.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let m = DetectorModel::new(CascadeConfig::default(), 4).unwrap();
    let bytes = checkpoint::encode(&m.store);
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn pages_regenerate_identically() {
    let spec = PageSpec::default();
    for i in 0..4 {
        let a = generate_page(&spec, i).unwrap();
        let b = generate_page(&spec, i).unwrap();
        assert_eq!(a.image.to_u8(), b.image.to_u8());
        assert_eq!(a.gt_boxes, b.gt_boxes);
        assert!(a.gt_boxes.iter().all(|g| g.within(a.image.width as f64, a.image.height as f64)));
    }
}

#[test]
fn untrained_model_output_is_well_formed_on_any_page() {
    let spec = PageSpec::default();
    let m = DetectorModel::new(CascadeConfig::default(), 9).unwrap();
    for page in [blank_page(&spec), generate_page(&spec, 1).unwrap()] {
        let (w, h) = (page.image.width as f64, page.image.height as f64);
        let dets = m.detect(&page.image.to_input()).unwrap();
        assert!(dets.len() <= m.cfg.max_detections);
        for d in &dets {
            assert!(d.bbox.within(w, h));
            assert!((0.0..=1.0).contains(&d.score));
        }
    }
}
