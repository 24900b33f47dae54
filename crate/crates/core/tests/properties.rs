use candle_core::{Device, Tensor};
use emosem::dataset::tokenize;
use emosem::losses::{dice_loss, focal_loss, lang_loss, to_f64, FocalParams};
use emosem::metrics::{bbox_iou, bleu_n, iou, p_at_k, rouge_l};
use emosem::raster::Grid;
use emosem::Mask;
use proptest::prelude::*;

fn mask(side: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), side * side).prop_map(move |data| Mask {
        height: side,
        width: side,
        data,
    })
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..10)
        .prop_map(|w| w.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in mask(8), b in mask(8)) {
        let x = iou(&a, &b).unwrap();
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let y = bbox_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&y));
    }

    #[test]
    fn p_at_k_is_monotone_in_threshold(ious in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        prop_assert!(p_at_k(&ious, 0.25).unwrap() >= p_at_k(&ious, 0.5).unwrap());
    }

    #[test]
    fn text_scores_are_bounded(c in words(), r in words()) {
        for n in 1..=4 {
            let b = bleu_n(&c, &r, n);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        }
        let s = rouge_l(&c, &r);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        if !c.is_empty() {
            prop_assert!((rouge_l(&c, &c) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tokenize_is_lowercase_and_idempotent(s in "[A-Za-z ,.!]{0,40}") {
        let t = tokenize(&s);
        prop_assert!(t.iter().all(|w| !w.is_empty() && w.to_lowercase() == *w));
        prop_assert_eq!(tokenize(&t.join(" ")), t);
    }

    #[test]
    fn segmentation_losses_are_bounded(
        logits in prop::collection::vec(-30.0f64..30.0, 16),
        gt in prop::collection::vec(any::<bool>(), 16),
    ) {
        let x = Tensor::from_vec(logits, (4, 4), &Device::Cpu).unwrap();
        let g: Vec<f64> = gt.iter().map(|&b| b as u8 as f64).collect();
        let g = Tensor::from_vec(g, (4, 4), &Device::Cpu).unwrap();
        let d = to_f64(&dice_loss(&x, &g, 1.0).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let f = to_f64(&focal_loss(&x, &g, FocalParams::from_alpha(0.25, 2.0)).unwrap()).unwrap();
        prop_assert!(f.is_finite() && f >= 0.0);
    }

    #[test]
    fn lang_loss_is_nonnegative(
        logits in prop::collection::vec(-20.0f64..20.0, 8 * 6),
        gold in prop::collection::vec(3u32..6, 8),
    ) {
        let x = Tensor::from_vec(logits, (8, 6), &Device::Cpu).unwrap();
        let l = to_f64(&lang_loss(&x, &gold, 0).unwrap()).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn bilinear_resize_stays_in_range(data in prop::collection::vec(0.0f32..1.0, 16), side in 1usize..20) {
        let g = Grid { height: 4, width: 4, data };
        let r = g.resize_bilinear(side, side);
        prop_assert_eq!(r.data.len(), side * side);
        prop_assert!(r.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
