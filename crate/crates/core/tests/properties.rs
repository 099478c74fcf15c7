use proptest::prelude::*;

use segrobust::attacks::sign;
use segrobust::autodiff::softmax_temperature;
use segrobust::data::{code_to_index, index_to_code, LabelMap};
use segrobust::losses::{dice_coefficient, DiceConfig};
use segrobust::metrics::{psnr, region_dice, rmse, ssim, Region, PSNR_CAP_DB};
use segrobust::stats::{bonferroni, wilcoxon_signed_rank};
use segrobust::Tensor;

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.to_vec(), d).unwrap())
}

fn labels(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..4, n)
}

fn argmax_map(p: &Tensor) -> Vec<usize> {
    let c = p.shape()[0];
    let inner = p.inner_len();
    (0..inner)
        .map(|v| (0..c).max_by(|&a, &b| p.data()[a * inner + v].total_cmp(&p.data()[b * inner + v])).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution_with_temperature_free_argmax(
        logits in tensor(&[4, 2, 3, 2]),
        t in 0.05f64..1000.0,
    ) {
        let p = softmax_temperature(&logits, t).unwrap();
        let inner = p.inner_len();
        for v in 0..inner {
            let s: f64 = (0..4).map(|c| p.data()[c * inner + v]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let base = softmax_temperature(&logits, 1.0).unwrap();
        prop_assert_eq!(argmax_map(&p), argmax_map(&base));
    }

    #[test]
    fn dice_coefficient_is_bounded_and_maximal_on_truth(idx in labels(24), other in labels(24)) {
        let truth = LabelMap::from_indices([2, 3, 4], &idx).unwrap().one_hot();
        let pred = LabelMap::from_indices([2, 3, 4], &other).unwrap().one_hot();
        let cfg = DiceConfig::default();
        let d = dice_coefficient(pred.tensor(), truth.tensor(), &cfg).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        let perfect = dice_coefficient(truth.tensor(), truth.tensor(), &cfg).unwrap();
        prop_assert!((perfect - 1.0).abs() < 1e-12);
        prop_assert!(d <= perfect + 1e-12);
    }

    #[test]
    fn region_dice_is_symmetric_and_bounded(a in labels(27), b in labels(27)) {
        let la = LabelMap::from_indices([3, 3, 3], &a).unwrap();
        let lb = LabelMap::from_indices([3, 3, 3], &b).unwrap();
        for r in Region::ALL {
            let ab = region_dice(&la, &lb, r).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, region_dice(&lb, &la, r).unwrap());
            prop_assert_eq!(region_dice(&la, &la, r).unwrap(), 1.0);
        }
    }

    #[test]
    fn quality_metrics_behave(x in tensor(&[2, 7, 7, 7]), y in tensor(&[2, 7, 7, 7])) {
        prop_assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        prop_assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let e = rmse(&x, &y).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert!((e - rmse(&y, &x).unwrap()).abs() < 1e-15);
        let s = ssim(&x, &y).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
    }

    #[test]
    fn wilcoxon_p_is_a_probability_and_symmetric(
        x in prop::collection::vec(-1.0f64..1.0, 1..40),
        shift in -0.5f64..0.5,
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * 0.5 + shift + i as f64 * 1e-3).collect();
        if let Ok(r) = wilcoxon_signed_rank(&x, &y) {
            prop_assert!((0.0..=1.0).contains(&r.p_two_sided));
            let s = wilcoxon_signed_rank(&y, &x).unwrap();
            prop_assert!((r.p_two_sided - s.p_two_sided).abs() < 1e-12);
            prop_assert_eq!(r.statistic, s.statistic);
        }
    }

    #[test]
    fn bonferroni_never_decreases_and_caps_at_one(
        p in prop::collection::vec(0.0f64..1.0, 1..10),
        extra in 0usize..10,
    ) {
        let m = p.len() + extra;
        let adj = bonferroni(&p, m).unwrap();
        for (a, raw) in adj.iter().zip(&p) {
            prop_assert!(*a >= *raw && *a <= 1.0);
        }
    }

    #[test]
    fn sign_is_in_minus_one_zero_one(g in -1e6f64..1e6) {
        let s = sign(g);
        prop_assert!(s == -1.0 || s == 0.0 || s == 1.0);
        prop_assert_eq!(s * g, g.abs());
    }

    #[test]
    fn label_codes_round_trip(i in 0usize..4) {
        prop_assert_eq!(code_to_index(index_to_code(i).unwrap()).unwrap(), i);
    }
}
