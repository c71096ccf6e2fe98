//! Independent oracles and hand-built fixtures shared by the test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use gmpg_core::cleanup::{ReportSentence, SceneGraphRecord};
use gmpg_core::geometry::{BoundingBox, CxCyWhBox};
use gmpg_core::ingest::{synthesize_predictions, CorruptionProfile};
use gmpg_core::matching::{hungarian_match, QueryPrediction};
use gmpg_core::metrics::{GroundingSample, PredictionSet};
use gmpg_core::setloss::{box_loss, grad_box_loss, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

/// Minimum assignment cost by enumerating every injective row→column map.
/// The sum is accumulated in row order.
pub fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    if cost.is_empty() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost[0].len()], 0.0, &mut best);
    best
}

/// The lexicographically smallest column sequence among optimal
/// assignments of an integer cost matrix.
pub fn brute_force_lex_min(cost: &[Vec<i64>]) -> (i64, Vec<usize>) {
    fn go(
        cost: &[Vec<i64>],
        row: usize,
        used: &mut Vec<bool>,
        cols: &mut Vec<usize>,
        acc: i64,
        best: &mut Option<(i64, Vec<usize>)>,
    ) {
        if row == cost.len() {
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, cols.clone()));
            }
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                cols.push(c);
                go(cost, row + 1, used, cols, acc + cost[row][c], best);
                cols.pop();
                used[c] = false;
            }
        }
    }
    let mut best = None;
    go(cost, 0, &mut vec![false; cost[0].len()], &mut Vec::new(), 0, &mut best);
    best.unwrap()
}

fn covered_cells(lo: f64, hi: f64, res: usize) -> (usize, usize) {
    // Cells whose center (i + 0.5) / res lies in [lo, hi).
    let r = res as f64;
    let a = (lo * r - 0.5).ceil().max(0.0) as usize;
    let b = ((hi * r - 0.5).ceil().max(0.0) as usize).min(res);
    (a, b.max(a))
}

fn row_intervals(boxes: &[BoundingBox], y: f64, res: usize) -> Vec<(usize, usize)> {
    let mut iv: Vec<(usize, usize)> = boxes
        .iter()
        .filter(|b| b.y1() <= y && y < b.y2())
        .map(|b| covered_cells(b.x1(), b.x2(), res))
        .filter(|(a, b)| a < b)
        .collect();
    iv.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (a, b) in iv {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

fn interval_len(iv: &[(usize, usize)]) -> usize {
    iv.iter().map(|(a, b)| b - a).sum()
}

fn intersect_len(a: &[(usize, usize)], b: &[(usize, usize)]) -> usize {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if lo < hi {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Mask IoU by sampling a `res × res` grid at cell centers.
pub fn raster_mask_iou(preds: &[BoundingBox], gts: &[BoundingBox], res: usize) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for row in 0..res {
        let y = (row as f64 + 0.5) / res as f64;
        let p = row_intervals(preds, y, res);
        let g = row_intervals(gts, y, res);
        let both = intersect_len(&p, &g);
        inter += both;
        union += interval_len(&p) + interval_len(&g) - both;
    }
    if union == 0 {
        if preds.is_empty() && gts.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        inter as f64 / union as f64
    }
}

/// Central differences, written out independently of the library helper.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// Expected counts for [`ledger_fixture`].
pub struct Ledger {
    pub n_input_records: usize,
    pub n_input_pairs: usize,
    pub n_after_stage1: usize,
    pub n_after_stage2: usize,
    pub n_negative_records: usize,
    pub n_added_stage3: usize,
    pub n_excluded_leakage: usize,
    pub n_excluded_pairs: usize,
    pub n_final_pairs: usize,
    pub n_output_records: usize,
    pub reduction_pct: f64,
}

/// Pair counts worked out by hand:
///
/// | block | records | regions per record                          | in  | stage 1 | stage 2 |
/// |-------|---------|---------------------------------------------|-----|---------|---------|
/// | A     | 10      | right lung, right lower lung zone           | 20  | 10      | 10      |
/// | B     | 10      | left lung, left upper lung zone, left apical| 30  | 10      | 10      |
/// | C     | 20      | cardiac silhouette                          | 20  | 20      | 20      |
/// | D     | 10      | right lung, left lung (negative sentence)   | 20  | 20      | 0       |
/// | E     | 5       | left costophrenic angle, left lung (mixed)  | 10  | 5       | 5       |
///
/// Stage 3 receives 8 sentences: one in-study duplicate, one case-and-space
/// variant, and one already in the scene graph, so 5 are added. The
/// blocklist {s05, s25, s45} removes one A record, one C record, one D
/// record and the extra sentence added for s05: 4 records, 2 pairs.
pub const LEDGER: Ledger = Ledger {
    n_input_records: 55,
    n_input_pairs: 100,
    n_after_stage1: 65,
    n_after_stage2: 45,
    n_negative_records: 10,
    n_added_stage3: 5,
    n_excluded_leakage: 4,
    n_excluded_pairs: 2,
    n_final_pairs: 43,
    n_output_records: 56,
    reduction_pct: 57.0,
};

pub fn ledger_fixture() -> (Vec<SceneGraphRecord>, Vec<ReportSentence>, BTreeSet<String>) {
    let blocks: [(usize, &str, &[&str]); 5] = [
        (
            10,
            "Right basilar opacity, possibly atelectasis.",
            &["right lung", "right lower lung zone"],
        ),
        (
            10,
            "Left apical pleural thickening.",
            &["left lung", "left upper lung zone", "left apical zone"],
        ),
        (20, "Moderate cardiomegaly.", &["cardiac silhouette"]),
        (
            10,
            "No focal consolidation, pleural effusion, or pneumothorax.",
            &["right lung", "left lung"],
        ),
        (
            5,
            "No pneumothorax. Small left effusion persists.",
            &["left costophrenic angle", "left lung"],
        ),
    ];
    let mut records = Vec::new();
    for (count, sentence, regions) in blocks {
        for _ in 0..count {
            let i = records.len();
            let y = 0.01 * (i % 40) as f64;
            let rec = regions.iter().enumerate().fold(
                SceneGraphRecord::new(format!("s{i:02}"), format!("img{i:02}"), sentence),
                |r, (k, name)| r.with_region(name, bb(0.1 + 0.05 * k as f64, y, 0.6, y + 0.4)),
            );
            records.push(rec);
        }
    }
    let extras = vec![
        ReportSentence::new("s00", "img00", "PA views of the chest obtained."),
        ReportSentence::new("s00", "img00", "PA views of the chest obtained."),
        ReportSentence::new("s01", "img01", "PA views of the chest obtained."),
        ReportSentence::new("s05", "img05", "Lateral view obtained."),
        ReportSentence::new("s20", "img20", "Moderate cardiomegaly."),
        ReportSentence::new("s30", "img30", "Comparison is made to prior study."),
        ReportSentence::new("s30", "img30", "comparison is made to  prior study."),
        ReportSentence::new("s41", "img41", "Dr. Smith was notified."),
    ];
    let blocklist = ["s05", "s25", "s45"].iter().map(|s| s.to_string()).collect();
    (records, extras, blocklist)
}

/// Samples with 0, 1 or 2 gt boxes; boxes within a sample are far apart.
pub fn grid_samples(n: usize) -> Vec<GroundingSample> {
    (0..n)
        .map(|i| {
            let k = i % 3;
            let off = 0.02 * (i % 10) as f64;
            let boxes = match k {
                0 => vec![],
                1 => vec![bb(0.1 + off, 0.2, 0.4 + off, 0.6)],
                _ => vec![bb(0.05 + off, 0.1, 0.3 + off, 0.4), bb(0.6, 0.55 - off, 0.9, 0.9 - off)],
            };
            GroundingSample::new(format!("img{i:03}"), "p0", format!("finding number {i}"), boxes)
        })
        .collect()
}

/// Seeded predictions where some true boxes are emitted twice.
pub fn duplicate_fixture(seed: u64) -> (Vec<GroundingSample>, Vec<PredictionSet>) {
    let samples = grid_samples(60);
    let profile = CorruptionProfile {
        drop_rate: 0.0,
        spurious_rate: 0.0,
        jitter_sd: 0.004,
        duplicate_rate: 0.5,
        seed,
    };
    let preds = synthesize_predictions(&samples, &profile).unwrap();
    (samples, preds)
}

/// Validation set on which only a 0.8 cut-off is perfect: true boxes score
/// 0.82, distractors 0.78.
pub fn threshold_fixture() -> (Vec<GroundingSample>, Vec<PredictionSet>) {
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    for i in 0..6 {
        let id = format!("v{i}");
        let gt = bb(0.1, 0.1, 0.4, 0.4);
        let distractor = bb(0.6, 0.6, 0.9, 0.9);
        samples.push(GroundingSample::new(&id, "p", "opacity", vec![gt]));
        preds.push(PredictionSet::new(&id, "p", vec![gt, distractor], vec![0.82, 0.78]).unwrap());
    }
    samples.push(GroundingSample::new("neg", "p", "no effusion", vec![]));
    preds.push(PredictionSet::new("neg", "p", vec![bb(0.2, 0.2, 0.5, 0.5)], vec![0.78]).unwrap());
    (samples, preds)
}

/// Every prediction equals its gt box with score 0.99.
pub fn perfect_fixture() -> (Vec<GroundingSample>, Vec<PredictionSet>) {
    let samples: Vec<_> = grid_samples(9).into_iter().filter(|s| !s.gt_boxes.is_empty()).collect();
    let preds = samples
        .iter()
        .map(|s| {
            PredictionSet::new(
                &s.image_id,
                &s.phrase_id,
                s.gt_boxes.clone(),
                vec![0.99; s.gt_boxes.len()],
            )
            .unwrap()
        })
        .collect();
    (samples, preds)
}

/// Smallest distance from any edge or L1 kink of a matched pair.
fn kink_margin(p: &CxCyWhBox, g: &BoundingBox) -> f64 {
    let pc = p.to_array();
    let gc = g.to_cxcywh().to_array();
    let [px1, py1, px2, py2] = p.to_xyxy_raw();
    let [gx1, gy1, gx2, gy2] = g.to_array();
    let gaps = [
        px1 - gx1,
        px2 - gx2,
        py1 - gy1,
        py2 - gy2,
        px2 - gx1,
        px1 - gx2,
        py2 - gy1,
        py1 - gy2,
        pc[0] - gc[0],
        pc[1] - gc[1],
        pc[2] - gc[2],
        pc[3] - gc[3],
    ];
    gaps.iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min)
}

/// Compares `grad_box_loss` with central differences (h = 1e-6) on
/// `instances` random configurations whose matched pairs sit at least 1e-4
/// away from every kink. Returns the largest relative error seen.
pub fn gradient_check(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LossWeights::default();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let k = rng.random_range(1..=3usize);
        let nq = rng.random_range(k..=5usize);
        let gts: Vec<BoundingBox> = (0..k)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
                bb(x, y, x + rng.random_range(0.05..0.3), y + rng.random_range(0.05..0.3))
            })
            .collect();
        let queries: Vec<QueryPrediction> = (0..nq)
            .map(|_| {
                let b = CxCyWhBox::new(
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.05..0.4),
                )
                .unwrap();
                QueryPrediction::from_confidence(b, rng.random_range(0.0..1.0)).unwrap()
            })
            .collect();
        let assignment = hungarian_match(&queries, &gts, &weights.match_weights()).unwrap();
        if assignment
            .pairs
            .iter()
            .any(|&(g, q)| kink_margin(&queries[q].bbox, &gts[g]) < 1e-4)
        {
            continue;
        }
        let analytic = grad_box_loss(&queries, &gts, &assignment, &weights).unwrap();
        let x: Vec<f64> = queries.iter().flat_map(|q| q.bbox.to_array()).collect();
        let f = |v: &[f64]| {
            let qs: Vec<QueryPrediction> = v
                .chunks(4)
                .zip(&queries)
                .map(|(c, q)| QueryPrediction {
                    bbox: CxCyWhBox::new(c[0], c[1], c[2], c[3]).unwrap(),
                    ..*q
                })
                .collect();
            let (l1, g) = box_loss(&qs, &gts, &assignment, &weights).unwrap();
            l1 + g
        };
        let numeric = central_diff(f, &x, 1e-6);
        for (a, n) in analytic.iter().flatten().zip(&numeric) {
            let scale = a.abs().max(n.abs());
            if scale > 0.0 {
                worst = worst.max((a - n).abs() / scale);
            }
        }
        done += 1;
    }
    worst
}
