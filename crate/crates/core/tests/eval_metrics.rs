//! Success, precision and normalized-precision metrics.

use prompt_track::data::{synth_dataset, DatasetConfig};
use prompt_track::eval::{
    compare_models, mean_iou, norm_precision, norm_precision_curve, precision, precision_at,
    success_auc, success_curve, EvalReport, VideoMetrics, NORM_THRESHOLDS, SUCCESS_THRESHOLDS,
};
use prompt_track::model::{Model, ModelConfig};
use prompt_track::rng::Rng;
use prompt_track::tracker::TrackerConfig;
use prompt_track::BBox;
use proptest::prelude::*;

fn random_pairs(n: usize, rng: &mut Rng) -> (Vec<BBox>, Vec<BBox>) {
    (0..n)
        .map(|_| {
            let g = BBox::new(
                rng.uniform(0.0, 100.0),
                rng.uniform(0.0, 100.0),
                rng.uniform(5.0, 40.0),
                rng.uniform(5.0, 40.0),
            );
            let p = BBox::new(
                g.x + rng.uniform(-15.0, 15.0),
                g.y + rng.uniform(-15.0, 15.0),
                g.w * rng.uniform(0.6, 1.5),
                g.h * rng.uniform(0.6, 1.5),
            );
            (p, g)
        })
        .unzip()
}

#[test]
fn perfect_tracking_scores_one() {
    let (_, gt) = random_pairs(30, &mut Rng::new(1));
    let m = VideoMetrics::compute("v", &gt, &gt).unwrap();
    assert_eq!(
        (m.auc, m.precision, m.norm_precision, m.mean_iou),
        (1.0, 1.0, 1.0, 1.0)
    );
    assert_eq!(m.success_curve.len(), SUCCESS_THRESHOLDS);
    assert_eq!(m.norm_precision_curve.len(), NORM_THRESHOLDS);
}

#[test]
fn disjoint_boxes_only_pass_the_zero_threshold() {
    let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 5];
    let pred = vec![BBox::new(200.0, 200.0, 10.0, 10.0); 5];
    assert!((success_auc(&pred, &gt).unwrap() - 1.0 / 21.0).abs() < 1e-15);
    assert_eq!(mean_iou(&pred, &gt).unwrap(), 0.0);
    assert_eq!(precision(&pred, &gt).unwrap(), 0.0);
    assert_eq!(norm_precision(&pred, &gt).unwrap(), 0.0);
}

#[test]
fn half_perfect_half_disjoint() {
    let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 4];
    let mut pred = gt.clone();
    pred[1] = BBox::new(100.0, 0.0, 10.0, 10.0);
    pred[3] = BBox::new(0.0, 100.0, 10.0, 10.0);
    assert!((success_auc(&pred, &gt).unwrap() - 11.0 / 21.0).abs() < 1e-15);
    assert_eq!(mean_iou(&pred, &gt).unwrap(), 0.5);
    assert_eq!(precision(&pred, &gt).unwrap(), 0.5);
}

#[test]
fn hand_enumerated_success_curve() {
    let g = BBox::new(0.0, 0.0, 10.0, 10.0);
    let gt = vec![g; 4];
    // IoUs 1, 0.5, 0.25 and 0.
    let pred = vec![
        g,
        BBox::new(0.0, 0.0, 10.0, 5.0),
        BBox::new(0.0, 0.0, 5.0, 5.0),
        BBox::new(50.0, 50.0, 10.0, 10.0),
    ];
    let curve = success_curve(&pred, &gt).unwrap();
    let mut want = vec![1.0];
    want.extend([0.75; 5]);
    want.extend([0.5; 5]);
    want.extend([0.25; 10]);
    assert_eq!(curve, want);
    assert!((success_auc(&pred, &gt).unwrap() - 9.75 / 21.0).abs() < 1e-15);
    assert!((mean_iou(&pred, &gt).unwrap() - 1.75 / 4.0).abs() < 1e-15);
}

#[test]
fn twenty_pixel_boundary_is_inclusive() {
    let g = BBox::new(50.0, 50.0, 10.0, 10.0);
    let at = BBox::new(62.0, 66.0, 10.0, 10.0); // (12, 16) offset, distance 20
    let past = BBox::new(62.0, 66.001, 10.0, 10.0);
    assert_eq!(precision(&[at], &[g]).unwrap(), 1.0);
    assert_eq!(precision(&[past], &[g]).unwrap(), 0.0);
    assert_eq!(precision_at(&[past], &[g], 21.0).unwrap(), 1.0);
}

#[test]
fn normalized_precision_uses_box_relative_offsets() {
    let g = BBox::new(0.0, 0.0, 10.0, 40.0);
    // One pixel right is 0.1 widths, four pixels down is 0.1 heights.
    let right = BBox::new(1.0, 0.0, 10.0, 40.0);
    let down = BBox::new(0.0, 4.0, 10.0, 40.0);
    for p in [right, down] {
        let curve = norm_precision_curve(&[p], &[g]).unwrap();
        let passed = curve.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(passed, 41, "{p:?}");
        assert!((norm_precision(&[p], &[g]).unwrap() - 41.0 / 51.0).abs() < 1e-15);
    }
    assert!(norm_precision(&[right], &[BBox::new(0.0, 0.0, 0.0, 4.0)]).is_err());
}

#[test]
fn length_mismatch_and_empty_input_are_errors() {
    let b = BBox::new(0.0, 0.0, 1.0, 1.0);
    assert!(success_auc(&[b, b], &[b]).is_err());
    assert!(precision(&[], &[]).is_err());
    assert!(EvalReport::new(Vec::new()).is_err());
}

#[test]
fn report_is_the_mean_over_videos() {
    let mut rng = Rng::new(2);
    let videos: Vec<_> = ["b", "a", "c"]
        .iter()
        .map(|name| {
            let (p, g) = random_pairs(12, &mut rng);
            VideoMetrics::compute(*name, &p, &g).unwrap()
        })
        .collect();
    let want = videos.iter().map(|v| v.auc).sum::<f64>() / 3.0;
    let rep = EvalReport::new(videos).unwrap();
    assert_eq!(
        rep.videos
            .iter()
            .map(|v| v.name.as_str())
            .collect::<Vec<_>>(),
        ["a", "b", "c"]
    );
    assert!((rep.aggregate.auc - want).abs() < 1e-15);
    let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(json["aggregate"]["videos"], 3);
}

#[test]
fn same_model_in_both_arms_has_zero_delta() {
    let suite = synth_dataset(&DatasetConfig {
        videos: 2,
        frames: 4,
        seed: 9,
        ..DatasetConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        depth: 1,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(cfg, 1).unwrap();
    let rep = compare_models(
        &[(1, &model)],
        &[(1, &model)],
        TrackerConfig::default(),
        &suite,
    )
    .unwrap();
    assert_eq!(rep.delta_mean_iou, 0.0);
    assert_eq!(rep.delta_auc, 0.0);
    assert_eq!(rep.suite_videos, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curves_are_monotone(seed in 0u64..10_000) {
        let (p, g) = random_pairs(25, &mut Rng::new(seed));
        let s = success_curve(&p, &g).unwrap();
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
        let n = norm_precision_curve(&p, &g).unwrap();
        prop_assert!(n.windows(2).all(|w| w[1] >= w[0]));
        let radii: Vec<f64> = (0..=50).map(|r| precision_at(&p, &g, r as f64).unwrap()).collect();
        prop_assert!(radii.windows(2).all(|w| w[1] >= w[0]));
        let auc = success_auc(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn metrics_ignore_frame_order(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let (p, g) = random_pairs(20, &mut rng);
        let mut order: Vec<usize> = (0..20).collect();
        for i in (1..20).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let (ps, gs): (Vec<_>, Vec<_>) = order.iter().map(|&i| (p[i], g[i])).unzip();
        let a = VideoMetrics::compute("v", &p, &g).unwrap();
        let b = VideoMetrics::compute("v", &ps, &gs).unwrap();
        prop_assert_eq!(a.success_curve, b.success_curve);
        prop_assert_eq!(a.precision, b.precision);
        prop_assert_eq!(a.norm_precision_curve, b.norm_precision_curve);
        prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
    }
}
