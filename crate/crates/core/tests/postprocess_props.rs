mod support;

use gmpg_core::geometry::BoundingBox;
use gmpg_core::metrics::{evaluate, EvalOptions, PredictionSet};
use gmpg_core::postprocess::{
    default_grid, filter_by_confidence, postprocess, tune_threshold, weighted_box_fusion, FusionConfig, ScoreMode,
};
use proptest::prelude::*;
use support::{bb, duplicate_fixture, perfect_fixture, threshold_fixture};

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.01..0.3f64, 0.01..0.3f64)
        .prop_map(|(x, y, w, h)| bb(x, y, (x + w).min(1.0), (y + h).min(1.0)))
}

fn arb_pred() -> impl Strategy<Value = PredictionSet> {
    prop::collection::vec((arb_box(), 0.01..=1.0f64), 0..8).prop_map(|dets| {
        let (boxes, scores) = dets.into_iter().unzip();
        PredictionSet::new("img", "p", boxes, scores).unwrap()
    })
}

fn arb_cfg() -> impl Strategy<Value = FusionConfig> {
    (0.05..0.9f64, prop::bool::ANY).prop_map(|(t, max)| FusionConfig {
        iou_thresh: t,
        score_mode: if max { ScoreMode::Max } else { ScoreMode::Mean },
    })
}

proptest! {
    #[test]
    fn fusion_is_idempotent(pred in arb_pred(), cfg in arb_cfg()) {
        let once = weighted_box_fusion(&pred, &cfg).unwrap();
        let twice = weighted_box_fusion(&once, &cfg).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn fusion_shrinks_within_hull(pred in arb_pred(), cfg in arb_cfg()) {
        let out = weighted_box_fusion(&pred, &cfg).unwrap();
        prop_assert!(out.len() <= pred.len());
        prop_assert_eq!(out.is_empty(), pred.is_empty());
        let lo: Vec<f64> = (0..4).map(|i| pred.boxes().iter().map(|b| b.to_array()[i]).fold(f64::INFINITY, f64::min)).collect();
        let hi: Vec<f64> = (0..4).map(|i| pred.boxes().iter().map(|b| b.to_array()[i]).fold(f64::NEG_INFINITY, f64::max)).collect();
        for b in out.boxes() {
            for (i, v) in b.to_array().iter().enumerate() {
                prop_assert!(*v >= lo[i] && *v <= hi[i]);
            }
        }
        prop_assert!(out.scores().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn threshold_filters_compose(pred in arb_pred(), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let two = filter_by_confidence(&filter_by_confidence(&pred, t1), t2);
        prop_assert_eq!(two, filter_by_confidence(&pred, t1.max(t2)));
    }
}

#[test]
fn tuning_picks_point_eight() {
    let (samples, preds) = threshold_fixture();
    let sweep = tune_threshold(&samples, &preds, &default_grid()).unwrap();
    assert!((sweep.best_threshold - 0.8).abs() < 1e-12, "{}", sweep.best_threshold);
    let perfect: Vec<f64> = sweep
        .entries
        .iter()
        .filter(|e| e.ch_f1 == 100.0)
        .map(|e| e.threshold)
        .collect();
    assert_eq!(perfect.len(), 1);
    let best = sweep.entries.iter().map(|e| e.ch_f1).fold(f64::NEG_INFINITY, f64::max);
    assert!(sweep.entries.iter().all(|e| e.ch_f1 <= best));
}

#[test]
fn tuning_ties_go_to_largest() {
    let (samples, preds) = perfect_fixture();
    let sweep = tune_threshold(&samples, &preds, &default_grid()).unwrap();
    assert!((sweep.best_threshold - 0.95).abs() < 1e-12);

    let empty: Vec<_> = samples
        .iter()
        .map(|s| PredictionSet::empty(&s.image_id, &s.phrase_id))
        .collect();
    let sweep = tune_threshold(&samples, &empty, &default_grid()).unwrap();
    assert!(sweep.entries.iter().all(|e| e.ch_f1 == 0.0));
    assert!((sweep.best_threshold - 0.95).abs() < 1e-12);
    assert!(tune_threshold(&[], &[], &default_grid()).is_err());
}

#[test]
fn fusion_removes_duplicates() {
    let (samples, preds) = duplicate_fixture(3);
    let opts = EvalOptions::default();
    let raw = evaluate(&samples, &preds, &opts).unwrap();
    let cfg = FusionConfig::default();
    let fused: Vec<_> = preds
        .iter()
        .map(|p| postprocess(p, None, Some(&cfg)).unwrap())
        .collect();
    let after = evaluate(&samples, &fused, &opts).unwrap();
    assert!(after.overall.p_at_f1.unwrap() > raw.overall.p_at_f1.unwrap());
    assert_eq!(after.overall.n_acc, raw.overall.n_acc);
}
