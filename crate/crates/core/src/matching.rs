//! Optimal one-to-one matching of predicted queries to ground-truth boxes.
//!
//! The cost of pairing query `j` with ground-truth box `k` is
//! `-c_j + w_l1 * |b_j - b_k|_1 + w_giou * (1 - GIoU(b_j, b_k))`, with the L1
//! term taken over `cxcywh` components and `c_j` the post-sigmoid confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_raw, BoundingBox, CxCyWhBox};

/// Largest logit magnitude produced when a logit is inferred from a confidence.
pub const LOGIT_CAP: f64 = 30.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid clamped to `[-LOGIT_CAP, LOGIT_CAP]`.
pub fn clamped_logit(p: f64) -> f64 {
    let z = (p / (1.0 - p)).ln();
    if z.is_nan() {
        return 0.0;
    }
    z.clamp(-LOGIT_CAP, LOGIT_CAP)
}

/// One decoder query's output: a box and its groundability confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    #[serde(rename = "box")]
    pub bbox: CxCyWhBox,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit: Option<f64>,
}

impl QueryPrediction {
    pub fn from_logit(bbox: CxCyWhBox, logit: f64) -> Result<Self> {
        if logit.is_nan() {
            return Err(Error::InvalidParameter("logit is NaN".into()));
        }
        Ok(Self {
            bbox,
            confidence: sigmoid(logit),
            logit: Some(logit),
        })
    }

    /// A query without logit provenance. The loss module refuses these
    /// unless [`QueryPrediction::with_inferred_logit`] is applied first.
    pub fn from_confidence(bbox: CxCyWhBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidParameter(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            bbox,
            confidence,
            logit: None,
        })
    }

    /// Fills a missing logit by clamped inverse sigmoid. Lossy for
    /// confidences within ~1e-13 of 0 or 1.
    pub fn with_inferred_logit(mut self) -> Self {
        if self.logit.is_none() {
            self.logit = Some(clamped_logit(self.confidence));
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub l1: f64,
    pub giou: f64,
}

impl MatchWeights {
    pub fn new(l1: f64, giou: f64) -> Result<Self> {
        let w = Self { l1, giou };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l1 >= 0.0 && self.giou >= 0.0 && self.l1.is_finite() && self.giou.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "matching weights must be finite and non-negative (l1={}, giou={})",
                self.l1, self.giou
            )));
        }
        Ok(())
    }
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { l1: 5.0, giou: 2.0 }
    }
}

/// A one-to-one assignment of every ground-truth box to a distinct query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(gt_index, query_index)`, sorted by `gt_index`.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    /// Checks bijectivity on the ground-truth side against the given sizes.
    pub fn validate(&self, n_gts: usize, n_queries: usize) -> Result<()> {
        if self.pairs.len() != n_gts {
            return Err(Error::InvalidAssignment(format!(
                "{} pairs for {} ground-truth boxes",
                self.pairs.len(),
                n_gts
            )));
        }
        let mut seen_gt = vec![false; n_gts];
        let mut seen_q = vec![false; n_queries];
        for &(g, q) in &self.pairs {
            if g >= n_gts || q >= n_queries {
                return Err(Error::InvalidAssignment(format!("pair ({g}, {q}) out of range")));
            }
            if std::mem::replace(&mut seen_gt[g], true) {
                return Err(Error::InvalidAssignment(format!("gt {g} assigned twice")));
            }
            if std::mem::replace(&mut seen_q[q], true) {
                return Err(Error::InvalidAssignment(format!("query {q} assigned twice")));
            }
        }
        Ok(())
    }

    /// Binary matching targets, one per query.
    pub fn targets(&self, n_queries: usize) -> Vec<bool> {
        let mut t = vec![false; n_queries];
        for &(_, q) in &self.pairs {
            if q < n_queries {
                t[q] = true;
            }
        }
        t
    }
}

pub(crate) fn l1_cxcywh(a: &CxCyWhBox, b: &CxCyWhBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Pairwise matching cost of one query against one ground-truth box.
pub fn match_cost(query: &QueryPrediction, gt: &BoundingBox, weights: &MatchWeights) -> Result<f64> {
    weights.validate()?;
    Ok(cost_unchecked(query, gt, weights))
}

fn cost_unchecked(query: &QueryPrediction, gt: &BoundingBox, weights: &MatchWeights) -> f64 {
    let l1 = l1_cxcywh(&query.bbox, &gt.to_cxcywh());
    let g = giou_raw(&query.bbox.to_xyxy_raw(), &gt.to_array());
    -query.confidence + weights.l1 * l1 + weights.giou * (1.0 - g)
}

/// Cost matrix with one row per ground-truth box and one column per query.
pub fn cost_matrix(queries: &[QueryPrediction], gts: &[BoundingBox], weights: &MatchWeights) -> Result<Vec<Vec<f64>>> {
    weights.validate()?;
    Ok(gts
        .iter()
        .map(|gt| queries.iter().map(|q| cost_unchecked(q, gt, weights)).collect())
        .collect())
}

/// Globally optimal assignment under the matching cost.
pub fn hungarian_match(queries: &[QueryPrediction], gts: &[BoundingBox], weights: &MatchWeights) -> Result<Assignment> {
    if queries.len() < gts.len() {
        return Err(Error::InfeasibleAssignment {
            gts: gts.len(),
            queries: queries.len(),
        });
    }
    solve_assignment(&cost_matrix(queries, gts, weights)?)
}

/// Solves a rectangular assignment problem with rows ≤ columns.
///
/// Every row receives a distinct column. Among cost-optimal solutions the
/// one whose column sequence (read in row order) is lexicographically
/// smallest is returned, so results do not depend on solver internals.
/// `total_cost` is the left-to-right sum of the chosen entries in row order.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment::empty());
    }
    let m = cost[0].len();
    if cost.iter().any(|row| row.len() != m) {
        return Err(Error::InvalidParameter("ragged cost matrix".into()));
    }
    if m < n {
        return Err(Error::InfeasibleAssignment { gts: n, queries: m });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter("non-finite matching cost".into()));
    }

    let path_cost = |rows: std::ops::Range<usize>, cols: &[usize]| -> f64 {
        rows.zip(cols).fold(0.0, |acc, (r, &c)| acc + cost[r][c])
    };

    let all_cols: Vec<usize> = (0..m).collect();
    let mut current = hungarian(n, m, |i, j| cost[i][j]);
    let mut free: Vec<usize> = all_cols;
    let mut chosen = Vec::with_capacity(n);

    for r in 0..n {
        let target = path_cost(r..n, &current);
        let tol = 1e-12 * (1.0 + target.abs());
        let rest = n - r - 1;
        for &c in free.iter().take_while(|&&c| c < current[0]) {
            let sub_cols: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let sub = if rest == 0 {
                Vec::new()
            } else {
                hungarian(rest, sub_cols.len(), |i, j| cost[r + 1 + i][sub_cols[j]])
                    .into_iter()
                    .map(|j| sub_cols[j])
                    .collect()
            };
            let value = cost[r][c] + path_cost(r + 1..n, &sub);
            if value <= target + tol {
                current = std::iter::once(c).chain(sub).collect();
                break;
            }
        }
        let c = current[0];
        chosen.push(c);
        free.retain(|&x| x != c);
        current.remove(0);
    }

    let pairs: Vec<(usize, usize)> = chosen.into_iter().enumerate().collect();
    let total_cost = pairs.iter().fold(0.0, |acc, &(r, c)| acc + cost[r][c]);
    Ok(Assignment { pairs, total_cost })
}

/// Shortest-augmenting-path Hungarian algorithm, O(n^2 m) for n rows ≤ m columns.
/// Returns the column assigned to each row.
fn hungarian(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j]: row (1-based) currently holding column j; 0 = free.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut ans = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> CxCyWhBox {
        CxCyWhBox::new(cx, cy, w, h).unwrap()
    }

    fn gt_box(c: CxCyWhBox) -> BoundingBox {
        c.to_xyxy().unwrap()
    }

    #[test]
    fn cost_examples() {
        let w = MatchWeights::default();
        let g = cxcywh(0.5, 0.5, 0.2, 0.2);
        let q = QueryPrediction::from_confidence(g, 1.0).unwrap();
        assert!((match_cost(&q, &gt_box(g), &w).unwrap() + 1.0).abs() < 1e-12);
        let q = QueryPrediction::from_confidence(g, 0.0).unwrap();
        assert!(match_cost(&q, &gt_box(g), &w).unwrap().abs() < 1e-12);
        let q = QueryPrediction::from_confidence(cxcywh(0.6, 0.5, 0.2, 0.2), 0.5).unwrap();
        let c = match_cost(&q, &gt_box(g), &w).unwrap();
        assert!((c - 4.0 / 3.0).abs() < 1e-12, "{c}");
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(MatchWeights::new(-1.0, 2.0).is_err());
        let g = cxcywh(0.5, 0.5, 0.2, 0.2);
        let q = QueryPrediction::from_confidence(g, 1.0).unwrap();
        let bad = MatchWeights { l1: 5.0, giou: -0.5 };
        assert!(match_cost(&q, &gt_box(g), &bad).is_err());
    }

    #[test]
    fn solver_examples() {
        let a = solve_assignment(&[]).unwrap();
        assert_eq!(a, Assignment::empty());

        let a = solve_assignment(&[vec![1.0, 2.0], vec![2.0, 100.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 4.0);

        let a = solve_assignment(&[vec![5.0, -1.0, 3.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(a.total_cost, -1.0);
    }

    #[test]
    fn ties_break_lexicographically() {
        let a = solve_assignment(&[vec![1.0; 4], vec![1.0; 4]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        // two optima: (0->2, 1->0) and (0->0, 1->2) both cost 2
        let a = solve_assignment(&[vec![1.0, 5.0, 1.0], vec![1.0, 5.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 2)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn infeasible_when_fewer_queries() {
        let err = solve_assignment(&[vec![1.0], vec![2.0]]);
        assert!(matches!(err, Err(Error::InfeasibleAssignment { gts: 2, queries: 1 })));
        let g = gt_box(cxcywh(0.5, 0.5, 0.2, 0.2));
        let err = hungarian_match(&[], &[g], &MatchWeights::default());
        assert!(matches!(err, Err(Error::InfeasibleAssignment { .. })));
    }

    #[test]
    fn zero_gts_gives_empty_assignment() {
        let q = QueryPrediction::from_confidence(cxcywh(0.5, 0.5, 0.2, 0.2), 0.3).unwrap();
        let a = hungarian_match(&[q, q], &[], &MatchWeights::default()).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn assignment_validation() {
        let a = Assignment {
            pairs: vec![(0, 1), (1, 1)],
            total_cost: 0.0,
        };
        assert!(a.validate(2, 3).is_err());
        let a = Assignment {
            pairs: vec![(0, 2)],
            total_cost: 0.0,
        };
        assert!(a.validate(1, 3).is_ok());
        assert_eq!(a.targets(3), vec![false, false, true]);
    }

    #[test]
    fn logit_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(clamped_logit(1.0), LOGIT_CAP);
        assert_eq!(clamped_logit(0.0), -LOGIT_CAP);
        assert!((clamped_logit(sigmoid(2.5)) - 2.5).abs() < 1e-12);
        let q = QueryPrediction::from_logit(cxcywh(0.5, 0.5, 0.1, 0.1), -3.0).unwrap();
        assert!((q.confidence - sigmoid(-3.0)).abs() < 1e-15);
    }
}
