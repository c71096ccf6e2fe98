//! JSONL file formats, dataset statistics and the synthetic predictor.
//!
//! Ground truth, one record per line:
//!
//! ```json
//! {"image_id":"i1","phrase_id":"p1","phrase":"left effusion","boxes":[[0.1,0.5,0.4,0.9]],"labels":["Pleural Effusion"]}
//! ```
//!
//! Predictions:
//!
//! ```json
//! {"image_id":"i1","phrase_id":"p1","boxes":[[0.1,0.5,0.4,0.9]],"scores":[0.93]}
//! ```
//!
//! Coordinates are normalized `xyxy` unless `"pixel_coords": true`, in which
//! case `width_px`/`height_px` must be present and boxes are divided by them.
//! Output is canonical: fixed key order and shortest round-trip float
//! formatting, so `save(load(save(x)))` is byte-identical to `save(x)`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ImageGeom, PixelBox};
use crate::metrics::{GroundingSample, Group, PredictionSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroundTruthRecord {
    image_id: String,
    phrase_id: String,
    phrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height_px: Option<u32>,
    boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pixel_coords: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionRecord {
    image_id: String,
    phrase_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height_px: Option<u32>,
    boxes: Vec<[f64; 4]>,
    scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pixel_coords: bool,
}

/// Reads a JSONL file line by line, skipping blank lines.
pub fn read_jsonl<T, R>(reader: R, source: &str) -> Result<Vec<(usize, T)>>
where
    T: DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, value));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: impl IntoIterator<Item = T>, mut writer: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, &item)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    writer.flush().map_err(|e| Error::io("<output>", e))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn geometry_of(width: Option<u32>, height: Option<u32>, source: &str, line: usize) -> Result<Option<ImageGeom>> {
    match (width, height) {
        (Some(w), Some(h)) => ImageGeom::new(w, h).map(Some).map_err(|e| Error::Parse {
            path: source.to_string(),
            line,
            message: e.to_string(),
        }),
        (None, None) => Ok(None),
        _ => Err(Error::Parse {
            path: source.to_string(),
            line,
            message: "width_px and height_px must be given together".into(),
        }),
    }
}

fn convert_boxes(
    raw: &[[f64; 4]],
    pixel_coords: bool,
    geom: Option<ImageGeom>,
    source: &str,
    line: usize,
) -> Result<Vec<BoundingBox>> {
    let fail = |i: usize, e: Error| Error::Parse {
        path: source.to_string(),
        line,
        message: format!("boxes[{i}]: {e}"),
    };
    raw.iter()
        .enumerate()
        .map(|(i, b)| {
            if pixel_coords {
                let geom = geom.ok_or_else(|| Error::Parse {
                    path: source.to_string(),
                    line,
                    message: "pixel_coords requires width_px and height_px".into(),
                })?;
                PixelBox::new(b[0], b[1], b[2], b[3])
                    .normalize(&geom)
                    .map_err(|e| fail(i, e))
            } else {
                BoundingBox::try_from(*b).map_err(|e| fail(i, e))
            }
        })
        .collect()
}

pub fn read_ground_truth<R: BufRead>(reader: R, source: &str) -> Result<Vec<GroundingSample>> {
    let records: Vec<(usize, GroundTruthRecord)> = read_jsonl(reader, source)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, r) in records {
        if !seen.insert((r.image_id.clone(), r.phrase_id.clone())) {
            return Err(Error::Parse {
                path: source.to_string(),
                line,
                message: Error::DuplicateKey {
                    image_id: r.image_id,
                    phrase_id: r.phrase_id,
                }
                .to_string(),
            });
        }
        let geom = geometry_of(r.width_px, r.height_px, source, line)?;
        let gt_boxes = convert_boxes(&r.boxes, r.pixel_coords, geom, source, line)?;
        out.push(GroundingSample {
            image_id: r.image_id,
            phrase_id: r.phrase_id,
            phrase: r.phrase,
            gt_boxes,
            finding_labels: r.labels.unwrap_or_default(),
            image_geom: geom,
        });
    }
    Ok(out)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundingSample>> {
    let path = path.as_ref();
    read_ground_truth(open(path)?, &path.display().to_string())
}

pub fn write_ground_truth<W: Write>(samples: &[GroundingSample], writer: W) -> Result<()> {
    let records = samples.iter().map(|s| GroundTruthRecord {
        image_id: s.image_id.clone(),
        phrase_id: s.phrase_id.clone(),
        phrase: s.phrase.clone(),
        width_px: s.image_geom.map(|g| g.width_px()),
        height_px: s.image_geom.map(|g| g.height_px()),
        boxes: s.gt_boxes.iter().map(BoundingBox::to_array).collect(),
        labels: (!s.finding_labels.is_empty()).then(|| s.finding_labels.clone()),
        pixel_coords: false,
    });
    write_jsonl(records, writer)
}

pub fn save_ground_truth(samples: &[GroundingSample], path: impl AsRef<Path>) -> Result<()> {
    write_ground_truth(samples, create(path.as_ref())?)
}

pub fn read_predictions<R: BufRead>(reader: R, source: &str) -> Result<Vec<PredictionSet>> {
    let records: Vec<(usize, PredictionRecord)> = read_jsonl(reader, source)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, r) in records {
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        if !seen.insert((r.image_id.clone(), r.phrase_id.clone())) {
            return Err(parse_err(
                Error::DuplicateKey {
                    image_id: r.image_id,
                    phrase_id: r.phrase_id,
                }
                .to_string(),
            ));
        }
        if r.boxes.len() != r.scores.len() {
            return Err(parse_err(format!(
                "{} boxes but {} scores",
                r.boxes.len(),
                r.scores.len()
            )));
        }
        if let Some((i, s)) = r.scores.iter().enumerate().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(parse_err(format!("scores[{i}]={s} outside [0, 1]")));
        }
        let geom = geometry_of(r.width_px, r.height_px, source, line)?;
        let boxes = convert_boxes(&r.boxes, r.pixel_coords, geom, source, line)?;
        out.push(PredictionSet::new(r.image_id, r.phrase_id, boxes, r.scores).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionSet>> {
    let path = path.as_ref();
    read_predictions(open(path)?, &path.display().to_string())
}

pub fn write_predictions<W: Write>(preds: &[PredictionSet], writer: W) -> Result<()> {
    let records = preds.iter().map(|p| PredictionRecord {
        image_id: p.image_id.clone(),
        phrase_id: p.phrase_id.clone(),
        width_px: None,
        height_px: None,
        boxes: p.boxes().iter().map(BoundingBox::to_array).collect(),
        scores: p.scores().to_vec(),
        pixel_coords: false,
    });
    write_jsonl(records, writer)
}

pub fn save_predictions(preds: &[PredictionSet], path: impl AsRef<Path>) -> Result<()> {
    write_predictions(preds, create(path.as_ref())?)
}

/// Percentages of samples with zero, one, and several boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCountDist {
    pub zero: f64,
    pub single: f64,
    pub multi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_images: usize,
    pub n_image_phrase: usize,
    pub n_boxes: usize,
    pub box_count_dist: BoxCountDist,
    pub sent_len_mean: f64,
    pub sent_len_sd: f64,
}

/// Whitespace token count.
pub fn sentence_length(phrase: &str) -> usize {
    phrase.split_whitespace().count()
}

pub fn compute_stats(samples: &[GroundingSample]) -> DatasetStats {
    let n = samples.len();
    let images: HashSet<&str> = samples.iter().map(|s| s.image_id.as_str()).collect();
    let count = |g: Group| samples.iter().filter(|s| s.group() == g).count();
    let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };

    let lens: Vec<f64> = samples.iter().map(|s| sentence_length(&s.phrase) as f64).collect();
    let mean = if n == 0 {
        0.0
    } else {
        lens.iter().sum::<f64>() / n as f64
    };
    let sd = if n < 2 {
        0.0
    } else {
        (lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };

    DatasetStats {
        n_images: images.len(),
        n_image_phrase: n,
        n_boxes: samples.iter().map(|s| s.gt_boxes.len()).sum(),
        box_count_dist: BoxCountDist {
            zero: pct(count(Group::No)),
            single: pct(count(Group::Single)),
            multi: pct(count(Group::Multi)),
        },
        sent_len_mean: mean,
        sent_len_sd: sd,
    }
}

/// Controls how [`synthesize_predictions`] corrupts the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionProfile {
    /// Probability that a ground-truth box is missed.
    pub drop_rate: f64,
    /// Probability that a sample receives one extra low-score box.
    pub spurious_rate: f64,
    /// Standard deviation of the per-coordinate noise.
    pub jitter_sd: f64,
    /// Probability that a kept box is emitted twice (slightly shifted).
    #[serde(default)]
    pub duplicate_rate: f64,
    pub seed: u64,
}

impl CorruptionProfile {
    pub fn identity(seed: u64) -> Self {
        Self {
            drop_rate: 0.0,
            spurious_rate: 0.0,
            jitter_sd: 0.0,
            duplicate_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("drop_rate", self.drop_rate),
            ("spurious_rate", self.spurious_rate),
            ("duplicate_rate", self.duplicate_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name}={p} outside [0, 1]")));
            }
        }
        if !(self.jitter_sd >= 0.0 && self.jitter_sd.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "jitter_sd={} must be non-negative",
                self.jitter_sd
            )));
        }
        Ok(())
    }
}

/// Score bands used by the synthetic predictor.
pub const TRUE_SCORE_BAND: (f64, f64) = (0.85, 1.0);
pub const DUPLICATE_SCORE_BAND: (f64, f64) = (0.6, 0.85);
pub const SPURIOUS_SCORE_BAND: (f64, f64) = (0.05, 0.5);
const DUPLICATE_SHIFT_SD: f64 = 0.005;

/// Normal noise truncated to ±2 sd by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sd).expect("sd is finite and positive");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * sd {
            return v;
        }
    }
}

fn jitter_box(rng: &mut ChaCha8Rng, b: &BoundingBox, sd: f64) -> BoundingBox {
    if sd == 0.0 {
        return *b;
    }
    let mut c = b.to_array();
    for v in c.iter_mut() {
        *v = (*v + truncated_normal(rng, sd)).clamp(0.0, 1.0);
    }
    let (x1, x2) = (c[0].min(c[2]), c[0].max(c[2]));
    let (y1, y2) = (c[1].min(c[3]), c[1].max(c[3]));
    BoundingBox::new(x1, y1, x2, y2).expect("clamped and ordered")
}

/// Corrupts the ground truth into plausible model output.
///
/// Deterministic for a given profile, including its seed.
pub fn synthesize_predictions(samples: &[GroundingSample], profile: &CorruptionProfile) -> Result<Vec<PredictionSet>> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for gt in &s.gt_boxes {
            if rng.random::<f64>() < profile.drop_rate {
                continue;
            }
            let kept = jitter_box(&mut rng, gt, profile.jitter_sd);
            boxes.push(kept);
            scores.push(rng.random_range(TRUE_SCORE_BAND.0..TRUE_SCORE_BAND.1));
            if rng.random::<f64>() < profile.duplicate_rate {
                boxes.push(jitter_box(&mut rng, &kept, DUPLICATE_SHIFT_SD));
                scores.push(rng.random_range(DUPLICATE_SCORE_BAND.0..DUPLICATE_SCORE_BAND.1));
            }
        }
        if rng.random::<f64>() < profile.spurious_rate {
            let w = rng.random_range(0.05..0.3);
            let h = rng.random_range(0.05..0.3);
            let x1 = rng.random_range(0.0..1.0 - w);
            let y1 = rng.random_range(0.0..1.0 - h);
            boxes.push(BoundingBox::new(x1, y1, x1 + w, y1 + h)?);
            scores.push(rng.random_range(SPURIOUS_SCORE_BAND.0..SPURIOUS_SCORE_BAND.1));
        }
        out.push(PredictionSet::new(
            s.image_id.clone(),
            s.phrase_id.clone(),
            boxes,
            scores,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt_from(text: &str) -> Result<Vec<GroundingSample>> {
        read_ground_truth(text.as_bytes(), "mem")
    }

    const THREE: &str = r#"{"image_id":"a","phrase_id":"0","phrase":"no effusion","boxes":[]}
{"image_id":"a","phrase_id":"1","phrase":"small left effusion","boxes":[[0.1,0.5,0.4,0.9]]}
{"image_id":"b","phrase_id":"0","phrase":"bilateral opacities","boxes":[[0.1,0.2,0.4,0.8],[0.6,0.2,0.9,0.8]],"labels":["Lung Opacity"]}
"#;

    #[test]
    fn empty_file_is_empty() {
        assert!(gt_from("").unwrap().is_empty());
        assert!(read_predictions("\n\n".as_bytes(), "mem").unwrap().is_empty());
    }

    #[test]
    fn groups_assigned_by_cardinality() {
        let s = gt_from(THREE).unwrap();
        let groups: Vec<Group> = s.iter().map(GroundingSample::group).collect();
        assert_eq!(groups, [Group::No, Group::Single, Group::Multi]);
        assert_eq!(s[2].finding_labels, ["Lung Opacity"]);
    }

    #[test]
    fn inverted_box_names_field_and_line() {
        let text = "{\"image_id\":\"a\",\"phrase_id\":\"0\",\"phrase\":\"x\",\"boxes\":[]}\n\
                    {\"image_id\":\"a\",\"phrase_id\":\"1\",\"phrase\":\"x\",\"boxes\":[[0.5,0.1,0.2,0.3]]}\n";
        let err = gt_from(text).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("x2"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = format!("{}not json\n", THREE);
        assert!(matches!(gt_from(&text), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn duplicate_key_rejected() {
        let line = "{\"image_id\":\"a\",\"phrase_id\":\"0\",\"phrase\":\"x\",\"boxes\":[]}\n";
        let err = gt_from(&format!("{line}{line}")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn pixel_coords_are_normalized() {
        let text = r#"{"image_id":"a","phrase_id":"0","phrase":"x","width_px":200,"height_px":100,"boxes":[[20,10,100,50]],"pixel_coords":true}"#;
        let s = gt_from(text).unwrap();
        assert_eq!(s[0].gt_boxes[0].to_array(), [0.1, 0.1, 0.5, 0.5]);
        let missing = r#"{"image_id":"a","phrase_id":"0","phrase":"x","boxes":[[20,10,100,50]],"pixel_coords":true}"#;
        assert!(gt_from(missing).is_err());
    }

    #[test]
    fn prediction_validation() {
        let ok = r#"{"image_id":"a","phrase_id":"0","boxes":[],"scores":[]}"#;
        assert!(read_predictions(ok.as_bytes(), "mem").unwrap()[0].is_empty());
        let bad = r#"{"image_id":"a","phrase_id":"0","boxes":[[0,0,1,1]],"scores":[1.2]}"#;
        assert!(read_predictions(bad.as_bytes(), "mem").is_err());
        let ragged = r#"{"image_id":"a","phrase_id":"0","boxes":[[0,0,1,1]],"scores":[]}"#;
        assert!(read_predictions(ragged.as_bytes(), "mem").is_err());
    }

    #[test]
    fn prediction_roundtrip_is_byte_identical() {
        let text = r#"{"image_id":"a","phrase_id":"0","boxes":[],"scores":[]}
{"image_id":"a","phrase_id":"1","boxes":[[0.1,0.2,0.30000000000000004,0.4],[0,0,1,1]],"scores":[0.123456789,1.0]}
"#;
        let preds = read_predictions(text.as_bytes(), "mem").unwrap();
        let mut first = Vec::new();
        write_predictions(&preds, &mut first).unwrap();
        let again = read_predictions(first.as_slice(), "mem").unwrap();
        let mut second = Vec::new();
        write_predictions(&again, &mut second).unwrap();
        assert_eq!(first, second);
        assert_eq!(again, preds);
    }

    #[test]
    fn stats_examples() {
        let s = gt_from(THREE).unwrap();
        let st = compute_stats(&s);
        assert_eq!((st.n_images, st.n_image_phrase, st.n_boxes), (2, 3, 3));
        for v in [
            st.box_count_dist.zero,
            st.box_count_dist.single,
            st.box_count_dist.multi,
        ] {
            assert!((v - 100.0 / 3.0).abs() < 1e-12);
        }

        let s = vec![
            GroundingSample::new("a", "0", "a b c", vec![]),
            GroundingSample::new("a", "1", "a b c d e", vec![]),
        ];
        let st = compute_stats(&s);
        assert_eq!(st.sent_len_mean, 4.0);
        assert!((st.sent_len_sd - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn synth_identity_reproduces_ground_truth() {
        let s = gt_from(THREE).unwrap();
        let p = synthesize_predictions(&s, &CorruptionProfile::identity(3)).unwrap();
        for (gt, pr) in s.iter().zip(&p) {
            assert_eq!(gt.gt_boxes, pr.boxes());
            assert!(pr.scores().iter().all(|&v| v >= TRUE_SCORE_BAND.0));
        }
    }

    #[test]
    fn synth_drop_all_abstains() {
        let s = gt_from(THREE).unwrap();
        let profile = CorruptionProfile {
            drop_rate: 1.0,
            ..CorruptionProfile::identity(1)
        };
        assert!(synthesize_predictions(&s, &profile)
            .unwrap()
            .iter()
            .all(|p| p.is_empty()));
    }

    #[test]
    fn synth_is_deterministic() {
        let s = gt_from(THREE).unwrap();
        let profile = CorruptionProfile {
            drop_rate: 0.3,
            spurious_rate: 0.5,
            jitter_sd: 0.02,
            duplicate_rate: 0.5,
            seed: 42,
        };
        assert_eq!(
            synthesize_predictions(&s, &profile).unwrap(),
            synthesize_predictions(&s, &profile).unwrap()
        );
        let bad = CorruptionProfile {
            drop_rate: 1.5,
            ..profile
        };
        assert!(synthesize_predictions(&s, &bad).is_err());
    }
}
