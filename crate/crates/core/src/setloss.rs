//! Reference forward computation of the set-prediction training objective.
//!
//! `L = L_cls + L_box` where
//!
//! * `L_cls = (1/N_Q) sum_j alpha_{t_j} BCE(c_j, t_j)` over all queries, with
//!   `t_j = 1` iff query `j` is matched, and
//! * `L_box = (1/max(1,K)) sum_k [l1 |b_pi(k) - b_k|_1 + giou (1 - GIoU)]`
//!   over matched pairs, in `cxcywh`.
//!
//! Also provides the analytic gradient of `L_box` with respect to the
//! predicted `cxcywh` coordinates and a central-difference estimator to
//! check it against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_raw, BoundingBox};
use crate::matching::{hungarian_match, l1_cxcywh, Assignment, MatchWeights, QueryPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_pos: 1.0,
            alpha_neg: 0.1,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_pos, self.alpha_neg, self.lambda_l1, self.lambda_giou];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "loss weights must be non-negative: {self:?}"
            )))
        }
    }

    /// The matcher shares the box weights with the loss.
    pub fn match_weights(&self) -> MatchWeights {
        MatchWeights {
            l1: self.lambda_l1,
            giou: self.lambda_giou,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub total: f64,
}

/// Binary cross-entropy from a logit, `max(z,0) - z t + ln(1 + e^{-|z|})`.
pub fn bce_with_logit(logit: f64, target: bool) -> f64 {
    let t = if target { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p()
}

pub fn cls_loss(queries: &[QueryPrediction], assignment: &Assignment, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    assignment.validate(assignment.pairs.len(), queries.len())?;
    if queries.is_empty() {
        return Ok(0.0);
    }
    let targets = assignment.targets(queries.len());
    let mut sum = 0.0;
    for (j, (q, &t)) in queries.iter().zip(&targets).enumerate() {
        let logit = q.logit.ok_or(Error::MissingLogit(j))?;
        let alpha = if t { weights.alpha_pos } else { weights.alpha_neg };
        sum += alpha * bce_with_logit(logit, t);
    }
    Ok(sum / queries.len() as f64)
}

/// Returns `(box_l1, box_giou)`, both normalized by `max(1, K)`.
pub fn box_loss(
    queries: &[QueryPrediction],
    gts: &[BoundingBox],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    weights.validate()?;
    assignment.validate(gts.len(), queries.len())?;
    let norm = gts.len().max(1) as f64;
    let mut l1 = 0.0;
    let mut g = 0.0;
    for &(k, j) in &assignment.pairs {
        let pred = &queries[j].bbox;
        l1 += weights.lambda_l1 * l1_cxcywh(pred, &gts[k].to_cxcywh());
        g += weights.lambda_giou * (1.0 - giou_raw(&pred.to_xyxy_raw(), &gts[k].to_array()));
    }
    Ok((l1 / norm, g / norm))
}

/// Matches, then evaluates both objectives.
pub fn total_loss(queries: &[QueryPrediction], gts: &[BoundingBox], weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let assignment = hungarian_match(queries, gts, &weights.match_weights())?;
    let cls = cls_loss(queries, &assignment, weights)?;
    let (box_l1, box_giou) = box_loss(queries, gts, &assignment, weights)?;
    Ok(LossBreakdown {
        cls,
        box_l1,
        box_giou,
        total: cls + box_l1 + box_giou,
    })
}

/// Gradient of `box_l1 + box_giou` with respect to each query's
/// `[cx, cy, w, h]`. Unmatched queries get zeros.
///
/// Where two box edges coincide the GIoU term takes the one-sided
/// derivative with the ground-truth edge held active.
pub fn grad_box_loss(
    queries: &[QueryPrediction],
    gts: &[BoundingBox],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<Vec<[f64; 4]>> {
    weights.validate()?;
    assignment.validate(gts.len(), queries.len())?;
    let norm = gts.len().max(1) as f64;
    let mut grads = vec![[0.0; 4]; queries.len()];

    for &(k, j) in &assignment.pairs {
        let pred = queries[j].bbox;
        let gt = gts[k];
        if pred.w <= 0.0 || pred.h <= 0.0 {
            return Err(Error::NonDifferentiable(format!("query {j} has a zero-area box")));
        }
        if gt.width() <= 0.0 || gt.height() <= 0.0 {
            return Err(Error::NonDifferentiable(format!("ground-truth box {k} has zero area")));
        }
        let p = pred.to_array();
        let g = gt.to_cxcywh().to_array();
        if let Some(i) = (0..4).find(|&i| p[i] == g[i]) {
            return Err(Error::NonDifferentiable(format!(
                "L1 kink: component {i} of query {j} equals ground truth {k}"
            )));
        }

        let dgiou = giou_grad_xyxy(&pred.to_xyxy_raw(), &gt.to_array());
        let dgiou_c = xyxy_to_cxcywh_grad(&dgiou);
        let out = &mut grads[j];
        for i in 0..4 {
            let sign = (p[i] - g[i]).signum();
            out[i] = (weights.lambda_l1 * sign - weights.lambda_giou * dgiou_c[i]) / norm;
        }
    }
    Ok(grads)
}

/// d GIoU / d (x1, y1, x2, y2) of the first box.
fn giou_grad_xyxy(p: &[f64; 4], g: &[f64; 4]) -> [f64; 4] {
    let [px1, py1, px2, py2] = *p;
    let [gx1, gy1, gx2, gy2] = *g;

    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let (inter, d_inter) = if iw > 0.0 && ih > 0.0 {
        let d = [
            if px1 > gx1 { -ih } else { 0.0 },
            if py1 > gy1 { -iw } else { 0.0 },
            if px2 < gx2 { ih } else { 0.0 },
            if py2 < gy2 { iw } else { 0.0 },
        ];
        (iw * ih, d)
    } else {
        (0.0, [0.0; 4])
    };

    let (pw, ph) = (px2 - px1, py2 - py1);
    let d_area = [-ph, -pw, ph, pw];
    let union = pw * ph + (gx2 - gx1) * (gy2 - gy1) - inter;
    let d_union: Vec<f64> = (0..4).map(|i| d_area[i] - d_inter[i]).collect();

    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let encl = cw * ch;
    let d_encl = [
        if px1 < gx1 { -ch } else { 0.0 },
        if py1 < gy1 { -cw } else { 0.0 },
        if px2 > gx2 { ch } else { 0.0 },
        if py2 > gy2 { cw } else { 0.0 },
    ];

    let mut out = [0.0; 4];
    for i in 0..4 {
        let d_iou = (d_inter[i] * union - inter * d_union[i]) / (union * union);
        let d_ratio = (d_union[i] * encl - union * d_encl[i]) / (encl * encl);
        out[i] = d_iou + d_ratio;
    }
    out
}

fn xyxy_to_cxcywh_grad(d: &[f64; 4]) -> [f64; 4] {
    [d[0] + d[2], d[1] + d[3], (d[2] - d[0]) / 2.0, (d[3] - d[1]) / 2.0]
}

/// Central-difference gradient estimate.
pub fn numeric_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidParameter(format!("step h={h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}
