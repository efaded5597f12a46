use proptest::prelude::*;

use tcam::eval::{binarize, iou, miou};
use tcam::image::{Image, Mask};
use tcam::model::Class;
use tcam::preprocess::{estimate_background, foreground_mask, majority_filter};
use tcam::spatial::{stitch, tile};
use tcam::temporal::{cam_map, FlowField, SaliencyMap};
use tcam::tensor::{conv_output_size, Graph, Tensor, WarpPlan};
use tcam::train::schedule;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |d| Mask::new(h, w, d).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (mask_strategy(h, w), mask_strategy(h, w)))
}

fn image_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f32..1.0, c * h * w).prop_map(move |d| Image::new(c, h, w, d).unwrap())
}

proptest! {
    #[test]
    fn conv_output_matches_formula(
        c in 1usize..3, h in 1usize..10, w in 1usize..10,
        k in prop::sample::select(vec![1usize, 3, 5]), s in 1usize..3, p in 0usize..3,
    ) {
        let expected_h = conv_output_size(h, k, s, p);
        let expected_w = conv_output_size(w, k, s, p);
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, c, h, w], 0.5));
        let kernel = g.constant(Tensor::full(&[2, c, k, k], 0.1));
        match (expected_h, expected_w) {
            (Some(oh), Some(ow)) => {
                prop_assert_eq!(oh, (h + 2 * p - k) / s + 1);
                let y = x.conv2d(&kernel, s, p).unwrap();
                prop_assert_eq!(y.shape(), vec![1, 2, oh, ow]);
            }
            _ => prop_assert!(x.conv2d(&kernel, s, p).is_err()),
        }
    }

    #[test]
    fn tile_stitch_roundtrip(c in 1usize..4, hh in 1usize..6, hw in 1usize..6, seed in any::<u64>()) {
        let x = Tensor::<f32>::from_fn(&[1, c, 2 * hh, 2 * hw], |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32);
        let parts = tile(&x).unwrap();
        for p in &parts {
            prop_assert_eq!(p.shape(), &[1, c, hh, hw]);
        }
        prop_assert_eq!(stitch([&parts[0], &parts[1], &parts[2], &parts[3]]).unwrap(), x);
    }

    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(miou(&[a.clone(), b.clone()], &[b, a]).unwrap(), ab);
    }

    #[test]
    fn iou_grows_when_prediction_gains_true_pixels((pred, gt) in mask_pair(), pick in any::<prop::sample::Index>()) {
        let hits: Vec<usize> = (0..gt.data().len()).filter(|&i| gt.data()[i] && !pred.data()[i]).collect();
        prop_assume!(!hits.is_empty());
        let i = hits[pick.index(hits.len())];
        let mut better = pred.clone();
        better.set(i / gt.width(), i % gt.width(), true);
        prop_assert!(iou(&better, &gt).unwrap() > iou(&pred, &gt).unwrap());
    }

    #[test]
    fn iou_drops_when_prediction_gains_false_pixels((pred, gt) in mask_pair(), pick in any::<prop::sample::Index>()) {
        let misses: Vec<usize> = (0..gt.data().len()).filter(|&i| !gt.data()[i] && !pred.data()[i]).collect();
        prop_assume!(!misses.is_empty());
        let i = misses[pick.index(misses.len())];
        let mut worse = pred.clone();
        worse.set(i / gt.width(), i % gt.width(), true);
        prop_assert!(iou(&worse, &gt).unwrap() <= iou(&pred, &gt).unwrap());
    }

    #[test]
    fn binarize_is_monotone_in_theta(
        values in prop::collection::vec(0.0f32..1.0, 16),
        t1 in 0.0f32..1.0, t2 in 0.0f32..1.0,
    ) {
        let map = SaliencyMap::new(Tensor::new(&[4, 4], values).unwrap(), Class::Before, 0).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let loose = binarize(&map, lo, 16, 16);
        let strict = binarize(&map, hi, 16, 16);
        for (&s, &l) in strict.data().iter().zip(loose.data()) {
            prop_assert!(!s || l);
        }
    }

    #[test]
    fn cam_lies_in_unit_range(values in prop::collection::vec(-5.0f32..5.0, 3 * 9)) {
        let f = Tensor::new(&[1, 3, 3, 3], values.clone()).unwrap();
        for class in Class::ALL {
            let m = cam_map(&f, class, 0).unwrap();
            prop_assert!(m.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
            let plane = &values[class.index() * 9..(class.index() + 1) * 9];
            if plane.iter().any(|&v| v > 1e-3) {
                prop_assert!((m.values().max_value() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn background_ignores_frame_order(
        frames in (1usize..7).prop_flat_map(|t| prop::collection::vec(image_strategy(3, 4, 5), t)),
        rotate in 0usize..7, reverse in any::<bool>(),
    ) {
        let mut permuted = frames.clone();
        permuted.rotate_left(rotate % frames.len());
        if reverse {
            permuted.reverse();
        }
        prop_assert_eq!(estimate_background(&frames).unwrap(), estimate_background(&permuted).unwrap());
    }

    #[test]
    fn masking_partitions_and_is_idempotent(img in image_strategy(3, 5, 6), keep in mask_strategy(5, 6)) {
        let fg = img.masked(&keep).unwrap();
        let bg = img.masked(&keep.inverted()).unwrap();
        prop_assert_eq!(&fg.masked(&keep).unwrap(), &fg);
        for i in 0..img.data().len() {
            let (a, b) = (fg.data()[i], bg.data()[i]);
            prop_assert!(a == 0.0 || b == 0.0);
            prop_assert_eq!(a + b, img.data()[i]);
        }
    }

    #[test]
    fn foreground_masks_shrink_with_tau(
        frame in image_strategy(3, 6, 6), bg in image_strategy(1, 6, 6), t1 in 0.0f32..1.0, t2 in 0.0f32..1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let raw = |tau| {
            let d: Vec<bool> = frame.to_gray().data().iter().zip(bg.data()).map(|(a, b)| (a - b).abs() > tau).collect();
            Mask::new(6, 6, d).unwrap()
        };
        prop_assert_eq!(foreground_mask(&frame, &bg, lo).unwrap(), majority_filter(&raw(lo)));
        let (l, h) = (raw(lo), raw(hi));
        prop_assert!(h.data().iter().zip(l.data()).all(|(&s, &w)| !s || w));
    }

    #[test]
    fn warp_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 20), b in prop::collection::vec(-1.0f64..1.0, 20),
        dx in prop::collection::vec(-2.0f32..2.0, 20), dy in prop::collection::vec(-2.0f32..2.0, 20),
        s in -3.0f64..3.0, t in -3.0f64..3.0,
    ) {
        let plan = WarpPlan::<f64>::new(4, 5, &dx, &dy).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + t * y).collect();
        let (wa, wb, wm) = (plan.apply(&a), plan.apply(&b), plan.apply(&mix));
        for i in 0..20 {
            prop_assert!((wm[i] - (s * wa[i] + t * wb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn negated_flow_restores_the_interior(
        values in prop::collection::vec(0.0f32..1.0, 48), dx in -2i32..=2, dy in -2i32..=2,
    ) {
        let (h, w) = (6usize, 8usize);
        let flow = FlowField::constant(h, w, dx as f32, dy as f32);
        let plan = WarpPlan::<f32>::new(h, w, flow.dx(), flow.dy()).unwrap();
        let back = WarpPlan::<f32>::new(h, w, flow.negated().dx(), flow.negated().dy()).unwrap();
        let round = back.apply(&plan.apply(&values));
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as i32 - dy, x as i32 - dx);
                if (0..h as i32).contains(&sy) && (0..w as i32).contains(&sx) {
                    prop_assert_eq!(round[y * w + x], values[y * w + x]);
                }
            }
        }
    }

    #[test]
    fn schedule_is_monotone_and_bounded(total in 1usize..60, max in 0.0f64..10.0) {
        let mut last = 0.0;
        for e in 0..total {
            let v = schedule(e, total, max);
            prop_assert!(v >= last && v <= max);
            last = v;
        }
        prop_assert_eq!(schedule(0, total, max), 0.0);
    }
}
