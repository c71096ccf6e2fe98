//! Per-disease data characteristics and their correlation with performance.
//!
//! The spatial dispersion score (SDS) is defined here as the mean of the
//! population standard deviations of gt-box centers along x and y, in
//! percent of the image side.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::metrics::{EvalReport, GroundingSample, SCHEMA_VERSION};

/// Mean box area in percent of the image.
pub fn avg_box_area(boxes: &[BoundingBox]) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("no boxes for average area".into()));
    }
    Ok(100.0 * boxes.iter().map(BoundingBox::area).sum::<f64>() / boxes.len() as f64)
}

fn population_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Spatial dispersion score in percent.
pub fn spatial_dispersion(boxes: &[BoundingBox]) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("no boxes for spatial dispersion".into()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = boxes.iter().map(BoundingBox::center).unzip();
    Ok(100.0 * (population_sd(&xs) + population_sd(&ys)) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub r: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub n: usize,
}

impl CorrelationCell {
    pub fn stars(&self) -> &'static str {
        if self.p < 0.01 {
            "**"
        } else if self.p < 0.05 {
            "*"
        } else {
            ""
        }
    }
}

const R_SNAP: f64 = 8.0 * f64::EPSILON;

/// Pearson r with a two-sided p-value from the t distribution on n−2 df.
///
/// The t tail is evaluated through the regularized incomplete beta,
/// `p = I_{1−r²}((n−2)/2, 1/2)`, which avoids forming t explicitly.
pub fn pearson_with_p(x: &[f64], y: &[f64]) -> Result<CorrelationCell> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 pairs, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("series contain non-finite values".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series".into()));
    }
    let mut r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    // Exactly collinear data can land a few ulps short of ±1.
    if 1.0 - r.abs() < R_SNAP {
        r = r.signum();
    }
    let one_minus_r2 = 1.0 - r * r;
    let p = if one_minus_r2 <= 0.0 {
        0.0
    } else {
        beta_reg((n - 2) as f64 / 2.0, 0.5, one_minus_r2).clamp(0.0, 1.0)
    };
    Ok(CorrelationCell { r, p, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseProfile {
    pub name: String,
    pub n: usize,
    pub avg_area_pct: f64,
    pub sds_pct: f64,
    pub p_at_f1: Option<f64>,
    pub ch_f1: Option<f64>,
    pub miou: Option<f64>,
}

pub const PERF_KEYS: [&str; 3] = ["p_at_f1", "ch_f1", "miou"];
pub const CHAR_KEYS: [&str; 3] = ["n", "avg_area_pct", "sds_pct"];

impl DiseaseProfile {
    /// Looks up a column by its JSON field name.
    pub fn value(&self, key: &str) -> Result<Option<f64>> {
        Ok(match key {
            "n" => Some(self.n as f64),
            "avg_area_pct" => Some(self.avg_area_pct),
            "sds_pct" => Some(self.sds_pct),
            "p_at_f1" => self.p_at_f1,
            "ch_f1" => self.ch_f1,
            "miou" => self.miou,
            other => return Err(Error::InvalidParameter(format!("unknown profile key '{other}'"))),
        })
    }
}

/// One profile per finding label that has at least one gt box.
///
/// Characteristics come from `samples`; performance columns from the
/// report's per-label breakdown when present.
pub fn disease_profiles(samples: &[GroundingSample], report: Option<&EvalReport>) -> Vec<DiseaseProfile> {
    let mut per: BTreeMap<&str, (usize, Vec<BoundingBox>)> = BTreeMap::new();
    for s in samples {
        for label in &s.finding_labels {
            let entry = per.entry(label.as_str()).or_default();
            entry.0 += 1;
            entry.1.extend_from_slice(&s.gt_boxes);
        }
    }
    let by_label = report.and_then(|r| r.by_label.as_ref());
    per.into_iter()
        .filter_map(|(name, (n, boxes))| {
            let avg_area_pct = avg_box_area(&boxes).ok()?;
            let sds_pct = spatial_dispersion(&boxes).ok()?;
            let m = by_label.and_then(|b| b.get(name));
            Some(DiseaseProfile {
                name: name.to_string(),
                n,
                avg_area_pct,
                sds_pct,
                p_at_f1: m.and_then(|m| m.p_at_f1),
                ch_f1: m.and_then(|m| m.ch_f1),
                miou: m.and_then(|m| m.miou),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub perf: String,
    pub characteristic: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell: Option<CorrelationCell>,
    pub stars: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHeatmap {
    pub schema_version: String,
    pub perf_keys: Vec<String>,
    pub char_keys: Vec<String>,
    /// Row-major over `perf_keys` × `char_keys`.
    pub entries: Vec<HeatmapEntry>,
}

impl CorrelationHeatmap {
    pub fn get(&self, perf: &str, characteristic: &str) -> Option<&HeatmapEntry> {
        self.entries
            .iter()
            .find(|e| e.perf == perf && e.characteristic == characteristic)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10}", "");
        for c in &self.char_keys {
            out += &format!(" {c:>22}");
        }
        out.push('\n');
        for p in &self.perf_keys {
            out += &format!("{p:<10}");
            for c in &self.char_keys {
                let text = match self.get(p, c).and_then(|e| e.cell.map(|cell| (cell, &e.stars))) {
                    Some((cell, stars)) => format!("{:+.2}{stars} (p={:.3})", cell.r, cell.p),
                    None => "n/a".to_string(),
                };
                out += &format!(" {text:>22}");
            }
            out.push('\n');
        }
        out
    }
}

/// Correlates every performance column with every characteristic column.
/// Failures are reported per cell.
pub fn correlation_heatmap(
    profiles: &[DiseaseProfile],
    perf_keys: &[&str],
    char_keys: &[&str],
) -> Result<CorrelationHeatmap> {
    if profiles.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 profiles, got {}",
            profiles.len()
        )));
    }
    let column = |key: &str| -> Result<Option<Vec<f64>>> {
        profiles
            .iter()
            .map(|p| p.value(key))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().collect())
    };
    let mut entries = Vec::with_capacity(perf_keys.len() * char_keys.len());
    for &pk in perf_keys {
        let xs = column(pk)?;
        for &ck in char_keys {
            let ys = column(ck)?;
            let result = match (&xs, &ys) {
                (Some(x), Some(y)) => pearson_with_p(x, y),
                _ => Err(Error::EmptyInput("a profile lacks this column".into())),
            };
            let (cell, error) = match result {
                Ok(c) => (Some(c), None),
                Err(e) => (None, Some(e.to_string())),
            };
            entries.push(HeatmapEntry {
                perf: pk.to_string(),
                characteristic: ck.to_string(),
                stars: cell.map(|c| c.stars().to_string()).unwrap_or_default(),
                cell,
                error,
            });
        }
    }
    Ok(CorrelationHeatmap {
        schema_version: SCHEMA_VERSION.to_string(),
        perf_keys: perf_keys.iter().map(|s| s.to_string()).collect(),
        char_keys: char_keys.iter().map(|s| s.to_string()).collect(),
        entries,
    })
}
