//! Inference-time filtering: confidence thresholding, threshold tuning on a
//! validation split, and weighted box fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_raw, BoundingBox};
use crate::metrics::{join, sample_center_hits, GroundingSample, MatchCounts, PredictionSet};

/// Keeps detections with `score >= threshold`.
pub fn filter_by_confidence(pred: &PredictionSet, threshold: f64) -> PredictionSet {
    let (boxes, scores): (Vec<_>, Vec<_>) = pred
        .iter()
        .filter(|(_, s)| *s >= threshold)
        .map(|(b, s)| (*b, s))
        .unzip();
    pred.with_detections(boxes, scores)
        .expect("a subset of a valid prediction set is valid")
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|i| f64::from(i) / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub threshold: f64,
    pub counts: MatchCounts,
    pub ch_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub grid: Vec<f64>,
    pub entries: Vec<SweepEntry>,
    pub best_threshold: f64,
}

/// Pooled center-hit F1 for every grid value; the best value wins, with
/// ties going to the largest threshold.
pub fn tune_threshold(samples: &[GroundingSample], preds: &[PredictionSet], grid: &[f64]) -> Result<ThresholdSweep> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("validation set has no samples".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty threshold grid".into()));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "threshold grid must be strictly increasing within [0, 1]".into(),
        ));
    }
    let pairs = join(samples, preds)?;

    let entries: Vec<SweepEntry> = grid
        .iter()
        .map(|&t| {
            let counts: MatchCounts = pairs
                .iter()
                .map(|(s, p)| sample_center_hits(filter_by_confidence(p, t).boxes(), &s.gt_boxes))
                .sum();
            SweepEntry {
                threshold: t,
                counts,
                ch_f1: 100.0 * counts.f1(),
            }
        })
        .collect();

    let best = entries
        .iter()
        .fold(&entries[0], |best, e| if e.ch_f1 >= best.ch_f1 { e } else { best });
    Ok(ThresholdSweep {
        grid: grid.to_vec(),
        best_threshold: best.threshold,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Arithmetic mean of member scores.
    Mean,
    /// Highest member score.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub iou_thresh: f64,
    pub score_mode: ScoreMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.1,
            score_mode: ScoreMode::Mean,
        }
    }
}

impl FusionConfig {
    pub fn new(iou_thresh: f64) -> Result<Self> {
        let cfg = Self {
            iou_thresh,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresh > 0.0 && self.iou_thresh < 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "fusion IoU threshold {} outside (0, 1)",
                self.iou_thresh
            )))
        }
    }
}

struct Cluster {
    members: Vec<(BoundingBox, f64)>,
    fused: [f64; 4],
}

impl Cluster {
    fn new(b: BoundingBox, s: f64) -> Self {
        Self {
            members: vec![(b, s)],
            fused: b.to_array(),
        }
    }

    /// Score-weighted mean, written as an offset from the first member so
    /// a cluster of identical boxes reproduces them bit-for-bit.
    fn refuse(&mut self) {
        let reference = self.members[0].0.to_array();
        let total: f64 = self.members.iter().map(|m| m.1).sum();
        let n = self.members.len() as f64;
        for (i, r) in reference.iter().enumerate() {
            let offset: f64 = if total > 0.0 {
                self.members.iter().map(|(b, s)| s * (b.to_array()[i] - r)).sum::<f64>() / total
            } else {
                self.members.iter().map(|(b, _)| b.to_array()[i] - r).sum::<f64>() / n
            };
            let (lo, hi) = self
                .members
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (b, _)| {
                    let v = b.to_array()[i];
                    (lo.min(v), hi.max(v))
                });
            self.fused[i] = (r + offset).clamp(lo, hi);
        }
    }

    fn score(&self, mode: ScoreMode) -> f64 {
        match mode {
            ScoreMode::Mean => self.members.iter().map(|m| m.1).sum::<f64>() / self.members.len() as f64,
            ScoreMode::Max => self.members.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Weighted box fusion over one prediction set.
///
/// Boxes are visited by descending score; each joins the first cluster whose
/// running fused box overlaps it with IoU ≥ `iou_thresh`, or opens a new
/// one. Clusters whose fused boxes end up overlapping that much are then
/// merged until none do, which makes the operation idempotent. Scores are
/// not rescaled by cluster size.
pub fn weighted_box_fusion(pred: &PredictionSet, cfg: &FusionConfig) -> Result<PredictionSet> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..pred.len()).collect();
    let scores = pred.scores();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut clusters: Vec<Cluster> = Vec::new();
    for i in order {
        let (b, s) = (pred.boxes()[i], scores[i]);
        match clusters
            .iter_mut()
            .find(|c| iou_raw(&c.fused, &b.to_array()) >= cfg.iou_thresh)
        {
            Some(c) => {
                c.members.push((b, s));
                c.refuse();
            }
            None => clusters.push(Cluster::new(b, s)),
        }
    }

    while let Some((a, b)) = first_overlapping_pair(&clusters, cfg.iou_thresh) {
        let absorbed = clusters.remove(b);
        clusters[a].members.extend(absorbed.members);
        clusters[a].refuse();
    }

    let mut fused: Vec<(BoundingBox, f64)> = clusters
        .iter()
        .map(|c| {
            let [x1, y1, x2, y2] = c.fused;
            BoundingBox::new(x1, y1, x2, y2).map(|b| (b, c.score(cfg.score_mode)))
        })
        .collect::<Result<_>>()?;
    fused.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (boxes, scores) = fused.into_iter().unzip();
    pred.with_detections(boxes, scores)
}

fn first_overlapping_pair(clusters: &[Cluster], thresh: f64) -> Option<(usize, usize)> {
    for a in 0..clusters.len() {
        for b in a + 1..clusters.len() {
            if iou_raw(&clusters[a].fused, &clusters[b].fused) >= thresh {
                return Some((a, b));
            }
        }
    }
    None
}

/// Threshold first, then fuse.
pub fn postprocess(
    pred: &PredictionSet,
    threshold: Option<f64>,
    fusion: Option<&FusionConfig>,
) -> Result<PredictionSet> {
    let filtered = match threshold {
        Some(t) => filter_by_confidence(pred, t),
        None => pred.clone(),
    };
    match fusion {
        Some(cfg) => weighted_box_fusion(&filtered, cfg),
        None => Ok(filtered),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn pset(dets: &[(BoundingBox, f64)]) -> PredictionSet {
        PredictionSet::new(
            "img",
            "p",
            dets.iter().map(|d| d.0).collect(),
            dets.iter().map(|d| d.1).collect(),
        )
        .unwrap()
    }

    #[test]
    fn filter_examples() {
        let p = pset(&[(bb(0.0, 0.0, 0.1, 0.1), 0.9), (bb(0.5, 0.5, 0.6, 0.6), 0.7)]);
        assert_eq!(filter_by_confidence(&p, 0.0), p);
        assert_eq!(filter_by_confidence(&p, 0.8).len(), 1);
        assert!(filter_by_confidence(&p, 1.0).is_empty());
    }

    #[test]
    fn default_grid_shape() {
        let g = default_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[15], 0.8);
        assert_eq!(g[18], 0.95);
    }

    #[test]
    fn fusion_identical_boxes() {
        let b = bb(0.1, 0.2, 0.4, 0.6);
        let out = weighted_box_fusion(&pset(&[(b, 0.8), (b, 0.4)]), &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.boxes()[0], b);
        assert!((out.scores()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn fusion_weighted_mean() {
        let p = pset(&[(BoundingBox::full(), 0.8), (bb(0.0, 0.2, 1.0, 1.0), 0.4)]);
        let out = weighted_box_fusion(&p, &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        let f = out.boxes()[0];
        assert!((f.y1() - 0.08 / 1.2).abs() < 1e-12);
        assert_eq!((f.x1(), f.x2(), f.y2()), (0.0, 1.0, 1.0));
        assert!((out.scores()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn fusion_keeps_disjoint_boxes() {
        let a = bb(0.0, 0.0, 0.2, 0.2);
        let b = bb(0.6, 0.6, 0.9, 0.9);
        let out = weighted_box_fusion(&pset(&[(a, 0.5), (b, 0.7)]), &FusionConfig::default()).unwrap();
        assert_eq!(out.boxes(), &[b, a]);
        assert_eq!(out.scores(), &[0.7, 0.5]);
    }

    #[test]
    fn fusion_max_mode() {
        let b = bb(0.1, 0.2, 0.4, 0.6);
        let cfg = FusionConfig {
            score_mode: ScoreMode::Max,
            ..Default::default()
        };
        let out = weighted_box_fusion(&pset(&[(b, 0.3), (b, 0.9)]), &cfg).unwrap();
        assert_eq!(out.scores(), &[0.9]);
    }

    #[test]
    fn fusion_config_range() {
        assert!(FusionConfig::new(0.0).is_err());
        assert!(FusionConfig::new(1.0).is_err());
        assert!(FusionConfig::new(0.55).is_ok());
    }

    fn negative_and_positive() -> (Vec<GroundingSample>, Vec<PredictionSet>) {
        let gt = bb(0.2, 0.2, 0.4, 0.4);
        let samples = vec![
            GroundingSample::new("i", "pos", "", vec![gt]),
            GroundingSample::new("i", "neg", "", vec![]),
        ];
        let preds = vec![
            PredictionSet::new("i", "pos", vec![gt], vec![0.82]).unwrap(),
            PredictionSet::new("i", "neg", vec![gt], vec![0.78]).unwrap(),
        ];
        (samples, preds)
    }

    #[test]
    fn tune_picks_unique_peak() {
        let (s, p) = negative_and_positive();
        let sweep = tune_threshold(&s, &p, &default_grid()).unwrap();
        assert_eq!(sweep.best_threshold, 0.8);
        let best = sweep.entries.iter().find(|e| e.threshold == 0.8).unwrap();
        assert_eq!(best.ch_f1, 100.0);
        assert!(sweep.entries.iter().filter(|e| e.ch_f1 == 100.0).count() == 1);
    }

    #[test]
    fn tune_breaks_ties_upwards() {
        let gt = bb(0.2, 0.2, 0.4, 0.4);
        let s = vec![GroundingSample::new("i", "a", "", vec![gt])];
        let p = vec![PredictionSet::new("i", "a", vec![gt], vec![0.99]).unwrap()];
        assert_eq!(tune_threshold(&s, &p, &default_grid()).unwrap().best_threshold, 0.95);
        let p = vec![PredictionSet::empty("i", "a")];
        let sweep = tune_threshold(&s, &p, &default_grid()).unwrap();
        assert!(sweep.entries.iter().all(|e| e.ch_f1 == 0.0));
        assert_eq!(sweep.best_threshold, 0.95);
    }

    #[test]
    fn tune_rejects_bad_inputs() {
        let (s, p) = negative_and_positive();
        assert!(matches!(
            tune_threshold(&[], &[], &default_grid()),
            Err(Error::EmptyInput(_))
        ));
        assert!(tune_threshold(&s, &p, &[0.5, 0.5]).is_err());
        assert!(tune_threshold(&s, &p, &[]).is_err());
    }
}
