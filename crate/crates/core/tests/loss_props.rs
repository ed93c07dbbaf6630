use proptest::prelude::*;
use sketchparse::classstats::ClassStats;
use sketchparse::raster::LabelMap;
use sketchparse::swloss::{
    compute_soft_targets, soft_weighted_grad, soft_weighted_loss, soft_weighted_pixel_loss, standard_ce, LogitGrid,
    SoftTarget,
};

fn grid_case() -> impl Strategy<Value = (LogitGrid, LabelMap, ClassStats)> {
    (1usize..7, 1usize..7, 2usize..9).prop_flat_map(|(w, h, c)| {
        (
            prop::collection::vec(-20.0f64..20.0, w * h * c),
            prop::collection::vec(0..c as u8, w * h),
            prop::collection::vec(0.1f64..5.0, c),
        )
            .prop_map(move |(x, l, a)| {
                (
                    LogitGrid::new(w, h, c, x).unwrap(),
                    LabelMap::new(w, h, c, l).unwrap(),
                    ClassStats::from_alpha(a).unwrap(),
                )
            })
    })
}

/// λ straight from the definition: shares of foreground labels in the
/// clipped 3×3 window when at least two foreground classes meet there.
fn lambda_oracle(labels: &LabelMap, x: usize, y: usize) -> Vec<f64> {
    let c = labels.classes();
    let gt = labels.get(x, y) as usize;
    let mut one_hot = vec![0.0; c];
    one_hot[gt] = 1.0;
    if gt == 0 {
        return one_hot;
    }
    let mut counts = vec![0usize; c];
    for yy in y.saturating_sub(1)..=(y + 1).min(labels.height() - 1) {
        for xx in x.saturating_sub(1)..=(x + 1).min(labels.width() - 1) {
            let v = labels.get(xx, yy) as usize;
            if v != 0 {
                counts[v] += 1;
            }
        }
    }
    if counts.iter().filter(|&&n| n > 0).count() < 2 {
        return one_hot;
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&n| n as f64 / total as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn soft_targets_match_definition((_, labels, _) in grid_case()) {
        let st = compute_soft_targets(&labels);
        for y in 0..labels.height() {
            for x in 0..labels.width() {
                let p = y * labels.width() + x;
                let dense = st.dense(p);
                prop_assert_eq!(&dense, &lambda_oracle(&labels, x, y));
                prop_assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                if st.is_softened(p) {
                    prop_assert_eq!(dense[0], 0.0);
                    prop_assert!(labels.get(x, y) != 0);
                }
            }
        }
    }

    #[test]
    fn one_hot_unit_weights_is_mean_cross_entropy((x, labels, _) in grid_case()) {
        let c = labels.classes();
        let loss = soft_weighted_loss(&x, &SoftTarget::one_hot(&labels), &ClassStats::uniform(c)).unwrap();
        let mean = (0..x.pixels()).map(|p| standard_ce(x.pixel(p), labels.data()[p] as usize).unwrap()).sum::<f64>()
            / x.pixels() as f64;
        prop_assert!((loss - mean).abs() < 1e-12 * mean.abs().max(1.0));
    }

    #[test]
    fn one_hot_pixel_loss_is_weighted_cross_entropy((x, labels, stats) in grid_case()) {
        let c = labels.classes();
        for p in 0..x.pixels() {
            let gt = labels.data()[p] as usize;
            let mut l = vec![0.0; c];
            l[gt] = 1.0;
            let v = soft_weighted_pixel_loss(x.pixel(p), &l, gt, &stats).unwrap();
            prop_assert_eq!(v, stats.alpha[gt] * standard_ce(x.pixel(p), gt).unwrap());
        }
    }

    #[test]
    fn loss_is_nonnegative_and_gradient_rows_sum_to_zero((x, labels, stats) in grid_case()) {
        let st = compute_soft_targets(&labels);
        prop_assert!(soft_weighted_loss(&x, &st, &stats).unwrap() >= 0.0);
        let g = soft_weighted_grad(&x, &st, &stats).unwrap();
        for p in 0..g.pixels() {
            prop_assert!(g.pixel(p).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_shift_invariant_per_pixel((x, labels, stats) in grid_case(), shift in -50.0f64..50.0) {
        let st = compute_soft_targets(&labels);
        let base = soft_weighted_loss(&x, &st, &stats).unwrap();
        let moved = LogitGrid::new(x.width(), x.height(), x.classes(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        prop_assert!((soft_weighted_loss(&moved, &st, &stats).unwrap() - base).abs() < 1e-9 * base.max(1.0));
    }
}

#[test]
fn gradient_matches_central_differences() {
    let r = sketchparse::gradcheck::loss_gradient_suite(7, 100).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
