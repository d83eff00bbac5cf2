use proptest::prelude::*;

use ioutrack_core::bench::{auc, op_curve};
use ioutrack_core::classifier::{classify, find_peak, ClassifierConfig, ClassifierWeights, SampleMemory};
use ioutrack_core::iounet::geometric_iou;
use ioutrack_core::prpool::{box_decode, box_encode, prpool};
use ioutrack_core::{BoundingBox, Tape, Tensor};

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (-50.0..150.0f64, -50.0..150.0f64, 0.5..80.0f64, 0.5..80.0f64).prop_map(|(cx, cy, w, h)| BoundingBox {
        cx,
        cy,
        w,
        h,
    })
}

fn map(h: usize, w: usize, d: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-1.0..1.0f64, h * w * d).prop_map(move |v| Tensor::new(vec![h, w, d], v).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let ab = geometric_iou(&a, &b);
        prop_assert_eq!(ab, geometric_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((geometric_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_encoding_round_trips(b in boxes()) {
        let d = box_decode(&box_encode::<f64>(&b).unwrap()).unwrap();
        for (x, y) in d.to_array().iter().zip(b.to_array()) {
            prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn op_curve_is_monotone_and_auc_tracks_mean(ious in proptest::collection::vec(0.0..=1.0f64, 1..60)) {
        let c = op_curve(&ious).unwrap();
        prop_assert!(c.op.windows(2).all(|w| w[1] <= w[0]));
        let mean = 100.0 * ious.iter().sum::<f64>() / ious.len() as f64;
        prop_assert!((auc(&c) - mean).abs() <= 0.5 + 1e-9, "auc {} mean {}", auc(&c), mean);
    }

    #[test]
    fn prpool_is_translation_consistent(
        m in map(12, 12, 2),
        (x1, y1) in (1.0..4.0f64, 1.0..4.0f64),
        (bw, bh) in (1.0..5.0f64, 1.0..5.0f64),
        (dx, dy) in (0usize..3, 0usize..3),
    ) {
        // Shift the content by (dx, dy) inside a larger map.
        let (h, w, d) = (12 + dy, 12 + dx, 2);
        let mut shifted = vec![0.0; h * w * d];
        for y in 0..12 {
            for x in 0..12 {
                for c in 0..d {
                    shifted[((y + dy) * w + x + dx) * d + c] = m.data()[(y * 12 + x) * d + c];
                }
            }
        }
        let shifted = Tensor::new(vec![h, w, d], shifted).unwrap();
        let b = BoundingBox::from_corners(x1, y1, x1 + bw, y1 + bh).unwrap();
        let bs = BoundingBox::from_corners(x1 + dx as f64, y1 + dy as f64, x1 + bw + dx as f64, y1 + bh + dy as f64).unwrap();
        let p = prpool(&m, &b, 3).unwrap();
        let q = prpool(&shifted, &bs, 3).unwrap();
        for (a, b) in p.data.data().iter().zip(q.data.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prpool_of_constant_map(v in -3.0..3.0f64, b in (0.5..6.0f64, 0.5..6.0f64, 0.5..4.0f64, 0.5..4.0f64)) {
        let m = Tensor::full(vec![8, 8, 1], v);
        let bb = BoundingBox::new(b.0 + 1.0, b.1 + 1.0, b.2, b.3).unwrap();
        if let Ok(p) = prpool(&m, &bb, 2) {
            let [x1, y1, x2, y2] = bb.corners();
            if x1 >= 0.0 && y1 >= 0.0 && x2 <= 7.0 && y2 <= 7.0 {
                for x in p.data.data() {
                    prop_assert!((x - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn memory_weights_stay_normalized(boosts in proptest::collection::vec(prop_oneof![Just(1.0f64), Just(2.0)], 1..40)) {
        let mut mem = SampleMemory::<f64>::new(7, 0.05).unwrap();
        mem.reset_equal(vec![(Tensor::zeros([2, 2, 1]), Tensor::zeros([2, 2]))]).unwrap();
        for b in boosts {
            mem.add_sample(Tensor::zeros([2, 2, 1]), Tensor::zeros([2, 2]), b).unwrap();
            let g = mem.weights();
            prop_assert!(g.iter().all(|&x| x >= 0.0));
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(mem.len() <= 7);
        }
    }

    #[test]
    fn peak_ignores_positive_scaling(s in proptest::collection::vec(-1.0..1.0f64, 36), k in 0.01..100.0f64) {
        let a = Tensor::new(vec![6, 6], s.clone()).unwrap();
        let b = a.scale(k);
        let (pa, pb) = (find_peak(&a).unwrap(), find_peak(&b).unwrap());
        prop_assert_eq!((pa.row, pa.col), (pb.row, pb.col));
    }

    #[test]
    fn backprop_is_linear_in_the_seed(x in proptest::collection::vec(-2.0..2.0f64, 6), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let run = |ca: f64, cb: f64| {
            let mut t = Tape::<f64>::new();
            let v = t.leaf(Tensor::new(vec![6], x.clone()).unwrap());
            let sq = t.mul(v, v).unwrap();
            let s1 = t.sum(sq).unwrap();
            let p = t.pelu(v, 0.05).unwrap();
            let s2 = t.sum(p).unwrap();
            let l1 = t.scale(s1, ca).unwrap();
            let l2 = t.scale(s2, cb).unwrap();
            let s = t.add(l1, l2).unwrap();
            t.backprop(s, &[v]).unwrap().remove(0)
        };
        let (g1, g2, g) = (run(1.0, 0.0), run(0.0, 1.0), run(a, b));
        for i in 0..6 {
            let want = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((g.data()[i] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn repeated_backward_passes_are_identical() {
    let mut t = Tape::<f64>::new();
    let v = t.leaf(Tensor::from_f64([4], &[0.3, -1.2, 0.8, 2.0]).unwrap());
    let m = t.mul(v, v).unwrap();
    let p = t.pelu(m, 0.05).unwrap();
    let s = t.sum(p).unwrap();
    let a = t.backprop(s, &[v]).unwrap();
    let b = t.backprop(s, &[v]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn classification_is_translation_equivariant() {
    let cfg = ClassifierConfig {
        hidden: 4,
        kernel: 3,
        ..Default::default()
    };
    let w = ClassifierWeights::<f64>::init(3, &cfg, 9).unwrap();
    let (h, wd, d) = (10, 10, 3);
    let x: Vec<f64> = (0..h * wd * d).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let x = Tensor::new(vec![h, wd, d], x).unwrap();
    let mut shifted = vec![0.0; h * wd * d];
    for y in 0..h {
        for xx in 0..wd - 1 {
            for c in 0..d {
                shifted[(y * wd + xx + 1) * d + c] = x.data()[(y * wd + xx) * d + c];
            }
        }
    }
    let shifted = Tensor::new(vec![h, wd, d], shifted).unwrap();
    let (a, b) = (classify(&x, &w).unwrap(), classify(&shifted, &w).unwrap());
    // Cells whose receptive field stays inside both maps.
    for y in 2..h - 2 {
        for xx in 2..wd - 3 {
            let (u, v) = (a.data()[y * wd + xx], b.data()[y * wd + xx + 1]);
            assert!((u - v).abs() < 1e-12, "({y}, {xx}): {u} vs {v}");
        }
    }
}
