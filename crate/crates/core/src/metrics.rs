//! Set-level grounding metrics with the no/single/multi grouping.
//!
//! * P@F1=1: share of samples whose prediction set matches the ground truth
//!   exactly under a one-to-one IoU ≥ 0.5 matching. Abstaining on a
//!   zero-box sample counts as a match.
//! * N-Acc: share of zero-box samples with an empty prediction set.
//! * CH-F1: micro F1 over all samples, where a prediction hits a ground-truth
//!   box when its center lies inside it (one-to-one).
//! * Mask IoU accuracy / mIoU: IoU of the covered regions, over samples
//!   with at least one ground-truth box only.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_in, iou, mask_iou, BoundingBox, ImageGeom};

pub const SCHEMA_VERSION: &str = "1.0";
pub const DEFAULT_IOU_THRESH: f64 = 0.5;
pub const MASK_ACC_THRESH: f64 = 0.5;

/// Cardinality group of a sample's ground-truth set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    No,
    Single,
    Multi,
}

impl Group {
    pub fn from_count(k: usize) -> Self {
        match k {
            0 => Group::No,
            1 => Group::Single,
            _ => Group::Multi,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::No => "no",
            Group::Single => "single",
            Group::Multi => "multi",
        }
    }
}

/// One image-phrase pair with its (possibly empty) ground-truth box set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub image_id: String,
    pub phrase_id: String,
    pub phrase: String,
    pub gt_boxes: Vec<BoundingBox>,
    pub finding_labels: Vec<String>,
    pub image_geom: Option<ImageGeom>,
}

impl GroundingSample {
    pub fn new(
        image_id: impl Into<String>,
        phrase_id: impl Into<String>,
        phrase: impl Into<String>,
        gt_boxes: Vec<BoundingBox>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            phrase_id: phrase_id.into(),
            phrase: phrase.into(),
            gt_boxes,
            finding_labels: Vec::new(),
            image_geom: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.finding_labels = labels;
        self
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.image_id, &self.phrase_id)
    }

    pub fn group(&self) -> Group {
        Group::from_count(self.gt_boxes.len())
    }
}

/// Scored boxes predicted for one image-phrase pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub image_id: String,
    pub phrase_id: String,
    boxes: Vec<BoundingBox>,
    scores: Vec<f64>,
}

impl PredictionSet {
    pub fn new(
        image_id: impl Into<String>,
        phrase_id: impl Into<String>,
        boxes: Vec<BoundingBox>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if boxes.len() != scores.len() {
            return Err(Error::InvalidParameter(format!(
                "{} boxes but {} scores",
                boxes.len(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidParameter(format!("score {s} outside [0, 1]")));
        }
        Ok(Self {
            image_id: image_id.into(),
            phrase_id: phrase_id.into(),
            boxes,
            scores,
        })
    }

    pub fn empty(image_id: impl Into<String>, phrase_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            phrase_id: phrase_id.into(),
            boxes: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.image_id, &self.phrase_id)
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BoundingBox, f64)> {
        self.boxes.iter().zip(self.scores.iter().copied())
    }

    /// Same ids, different detections. Lengths and ranges are re-checked.
    pub fn with_detections(&self, boxes: Vec<BoundingBox>, scores: Vec<f64>) -> Result<Self> {
        Self::new(self.image_id.clone(), self.phrase_id.clone(), boxes, scores)
    }
}

/// Size of a maximum-cardinality matching in a bipartite graph given by
/// an edge predicate (augmenting paths, exact).
pub fn max_bipartite_matching(n_left: usize, n_right: usize, edge: impl Fn(usize, usize) -> bool) -> usize {
    let adj: Vec<Vec<usize>> = (0..n_left)
        .map(|i| (0..n_right).filter(|&j| edge(i, j)).collect())
        .collect();
    let mut match_right: Vec<Option<usize>> = vec![None; n_right];

    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], match_right: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            let free = match match_right[v] {
                None => true,
                Some(w) => augment(w, adj, seen, match_right),
            };
            if free {
                match_right[v] = Some(u);
                return true;
            }
        }
        false
    }

    let mut size = 0;
    for u in 0..n_left {
        let mut seen = vec![false; n_right];
        if augment(u, &adj, &mut seen, &mut match_right) {
            size += 1;
        }
    }
    size
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    fn from_matching(n_pred: usize, n_gt: usize, matched: usize) -> Self {
        Self {
            tp: matched,
            fp: n_pred - matched,
            fn_: n_gt - matched,
        }
    }

    /// `2tp / (2tp + fp + fn)`; 1.0 when there is nothing to count.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn is_perfect(&self) -> bool {
        self.fp == 0 && self.fn_ == 0
    }
}

impl std::ops::Add for MatchCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for MatchCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// One-to-one matching on the edge set `{IoU ≥ iou_thresh}`.
pub fn sample_f1_at_iou(preds: &[BoundingBox], gts: &[BoundingBox], iou_thresh: f64) -> MatchCounts {
    let m = max_bipartite_matching(preds.len(), gts.len(), |i, j| iou(&preds[i], &gts[j]) >= iou_thresh);
    MatchCounts::from_matching(preds.len(), gts.len(), m)
}

/// One-to-one matching on the edge set `{center of pred inside gt}`.
pub fn sample_center_hits(preds: &[BoundingBox], gts: &[BoundingBox]) -> MatchCounts {
    let m = max_bipartite_matching(preds.len(), gts.len(), |i, j| center_in(&preds[i], &gts[j]));
    MatchCounts::from_matching(preds.len(), gts.len(), m)
}

/// Per-sample results that every aggregate is computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub group: Group,
    pub n_pred: usize,
    pub iou_counts: MatchCounts,
    pub center_counts: MatchCounts,
    pub mask_iou: f64,
}

impl SampleOutcome {
    pub fn compute(pred: &PredictionSet, gt: &GroundingSample, iou_thresh: f64) -> Self {
        Self {
            group: gt.group(),
            n_pred: pred.len(),
            iou_counts: sample_f1_at_iou(pred.boxes(), &gt.gt_boxes, iou_thresh),
            center_counts: sample_center_hits(pred.boxes(), &gt.gt_boxes),
            mask_iou: mask_iou(pred.boxes(), &gt.gt_boxes),
        }
    }

    pub fn is_groundable(&self) -> bool {
        self.group != Group::No
    }

    pub fn exact_match(&self) -> bool {
        self.iou_counts.f1() == 1.0
    }
}

fn percent(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Percentage of samples with F1 = 1.
pub fn p_at_f1_eq_1(outcomes: &[SampleOutcome]) -> Option<f64> {
    percent(outcomes.iter().filter(|o| o.exact_match()).count(), outcomes.len())
}

/// Percentage of zero-box samples left without predictions; `None` when the
/// input holds no zero-box sample.
pub fn n_acc(outcomes: &[SampleOutcome]) -> Option<f64> {
    let negatives: Vec<_> = outcomes.iter().filter(|o| !o.is_groundable()).collect();
    percent(negatives.iter().filter(|o| o.n_pred == 0).count(), negatives.len())
}

/// Pooled center-hit counts over all samples.
pub fn pooled_center_counts(outcomes: &[SampleOutcome]) -> MatchCounts {
    outcomes.iter().map(|o| o.center_counts).sum()
}

/// Micro center-hit F1 in percent.
pub fn ch_f1(outcomes: &[SampleOutcome]) -> Option<f64> {
    (!outcomes.is_empty()).then(|| 100.0 * pooled_center_counts(outcomes).f1())
}

/// `(mask_acc, miou)` in percent over groundable samples.
pub fn mask_metrics(outcomes: &[SampleOutcome]) -> Option<(f64, f64)> {
    let g: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.is_groundable())
        .map(|o| o.mask_iou)
        .collect();
    if g.is_empty() {
        return None;
    }
    let hits = g.iter().filter(|&&v| v >= MASK_ACC_THRESH).count();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    Some((100.0 * hits as f64 / g.len() as f64, 100.0 * mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub p_at_f1: Option<f64>,
    pub ch_f1: Option<f64>,
    pub mask_acc: Option<f64>,
    pub miou: Option<f64>,
    pub n_acc: Option<f64>,
    pub center_counts: MatchCounts,
}

impl GroupMetrics {
    pub fn from_outcomes(outcomes: &[SampleOutcome]) -> Self {
        let mask = mask_metrics(outcomes);
        Self {
            n: outcomes.len(),
            p_at_f1: p_at_f1_eq_1(outcomes),
            ch_f1: ch_f1(outcomes),
            mask_acc: mask.map(|m| m.0),
            miou: mask.map(|m| m.1),
            n_acc: n_acc(outcomes),
            center_counts: pooled_center_counts(outcomes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    pub iou_thresh: f64,
    pub no: GroupMetrics,
    pub single: GroupMetrics,
    pub multi: GroupMetrics,
    pub overall: GroupMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_label: Option<BTreeMap<String, GroupMetrics>>,
}

impl EvalReport {
    pub fn from_outcomes(outcomes: &[SampleOutcome], iou_thresh: f64) -> Self {
        let of = |g: Group| -> Vec<SampleOutcome> { outcomes.iter().filter(|o| o.group == g).cloned().collect() };
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            iou_thresh,
            no: GroupMetrics::from_outcomes(&of(Group::No)),
            single: GroupMetrics::from_outcomes(&of(Group::Single)),
            multi: GroupMetrics::from_outcomes(&of(Group::Multi)),
            overall: GroupMetrics::from_outcomes(outcomes),
            by_label: None,
        }
    }

    pub fn group(&self, g: Group) -> &GroupMetrics {
        match g {
            Group::No => &self.no,
            Group::Single => &self.single,
            Group::Multi => &self.multi,
        }
    }

    /// Parses a serialized report, refusing unknown major schema versions.
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let version = v
            .get("schema_version")
            .and_then(|x| x.as_str())
            .ok_or_else(|| Error::SchemaVersion("<missing>".into()))?;
        check_schema_major(version)?;
        Ok(serde_json::from_value(v)?)
    }

    /// Fixed-width text table, one decimal place.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
        let mut out = format!(
            "{:<10}{:>7}{:>9}{:>9}{:>9}{:>9}{:>9}\n",
            "group", "n", "N-Acc", "P@F1=1", "CH-F1", "Acc", "mIoU"
        );
        let mut row = |name: &str, m: &GroupMetrics| {
            out.push_str(&format!(
                "{:<10}{:>7}{:>9}{:>9}{:>9}{:>9}{:>9}\n",
                name,
                m.n,
                fmt(m.n_acc),
                fmt(m.p_at_f1),
                fmt(m.ch_f1),
                fmt(m.mask_acc),
                fmt(m.miou)
            ));
        };
        row("no", &self.no);
        row("single", &self.single);
        row("multi", &self.multi);
        row("overall", &self.overall);
        if let Some(labels) = &self.by_label {
            for (name, m) in labels {
                row(name, m);
            }
        }
        out
    }
}

pub fn check_schema_major(version: &str) -> Result<()> {
    let major = SCHEMA_VERSION.split('.').next();
    if version.split('.').next() == major {
        Ok(())
    } else {
        Err(Error::SchemaVersion(version.to_string()))
    }
}

/// Pairs every sample with its prediction set.
///
/// Every failure (duplicate keys on either side, predictions without a
/// sample, samples without predictions) is collected into a single error.
pub fn join<'a>(
    samples: &'a [GroundingSample],
    preds: &'a [PredictionSet],
) -> Result<Vec<(&'a GroundingSample, &'a PredictionSet)>> {
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.key()) {
            return Err(Error::DuplicateKey {
                image_id: s.image_id.clone(),
                phrase_id: s.phrase_id.clone(),
            });
        }
    }
    let mut by_key: HashMap<(&str, &str), &PredictionSet> = HashMap::new();
    let mut problems = Vec::new();
    for p in preds {
        if by_key.insert(p.key(), p).is_some() {
            problems.push(format!("duplicate prediction ({}, {})", p.image_id, p.phrase_id));
        }
        if !seen.contains(&p.key()) {
            problems.push(format!("dangling prediction ({}, {})", p.image_id, p.phrase_id));
        }
    }
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        match by_key.get(&s.key()) {
            Some(p) => out.push((s, *p)),
            None => problems.push(format!("no prediction for ({}, {})", s.image_id, s.phrase_id)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Join(problems.join("; ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub iou_thresh: f64,
    pub by_label: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_thresh: DEFAULT_IOU_THRESH,
            by_label: false,
        }
    }
}

/// Scores every sample (in parallel) and aggregates into a report.
pub fn evaluate(samples: &[GroundingSample], preds: &[PredictionSet], opts: &EvalOptions) -> Result<EvalReport> {
    if !(opts.iou_thresh > 0.0 && opts.iou_thresh <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "IoU threshold {} outside (0, 1]",
            opts.iou_thresh
        )));
    }
    let pairs = join(samples, preds)?;
    let outcomes: Vec<SampleOutcome> = pairs
        .par_iter()
        .map(|(s, p)| SampleOutcome::compute(p, s, opts.iou_thresh))
        .collect();
    let mut report = EvalReport::from_outcomes(&outcomes, opts.iou_thresh);
    if opts.by_label {
        let mut per: BTreeMap<String, Vec<SampleOutcome>> = BTreeMap::new();
        for ((s, _), o) in pairs.iter().zip(&outcomes) {
            for label in &s.finding_labels {
                per.entry(label.clone()).or_default().push(o.clone());
            }
        }
        report.by_label = Some(
            per.into_iter()
                .map(|(k, v)| (k, GroupMetrics::from_outcomes(&v)))
                .collect(),
        );
    }
    Ok(report)
}

/// A published per-group figure: sample count and a rounded percentage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupFigure {
    pub n: usize,
    pub percent: f64,
}

impl GroupFigure {
    pub fn new(n: usize, percent: f64) -> Self {
        Self { n, percent }
    }

    /// Integer number of successes closest to `n * percent / 100`.
    pub fn implied_count(&self) -> usize {
        (self.n as f64 * self.percent / 100.0).round().max(0.0) as usize
    }
}

/// Recombines rounded per-group rates into the pooled rate.
///
/// Each group's rate is a ratio of integer counts, so the success count is
/// recovered first and the pooled percentage is formed from the summed counts.
pub fn recombine_groups(groups: &[GroupFigure]) -> Result<f64> {
    let total: usize = groups.iter().map(|g| g.n).sum();
    if total == 0 {
        return Err(Error::EmptyInput("no samples in any group".into()));
    }
    if let Some(g) = groups.iter().find(|g| !(0.0..=100.0).contains(&g.percent)) {
        return Err(Error::InvalidParameter(format!(
            "percentage {} outside [0, 100]",
            g.percent
        )));
    }
    let hits: usize = groups.iter().map(GroupFigure::implied_count).sum();
    Ok(100.0 * hits as f64 / total as f64)
}

/// Count-weighted mean of per-group percentages.
pub fn weighted_group_mean(groups: &[GroupFigure]) -> Result<f64> {
    let total: usize = groups.iter().map(|g| g.n).sum();
    if total == 0 {
        return Err(Error::EmptyInput("no samples in any group".into()));
    }
    Ok(groups.iter().map(|g| g.n as f64 * g.percent).sum::<f64>() / total as f64)
}
