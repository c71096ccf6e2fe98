//! Axis-aligned box arithmetic in normalized image coordinates.
//!
//! Boxes are stored as `xyxy` fractions of the image width and height.
//! Zero-area boxes are legal everywhere; every ratio defines its value
//! for the degenerate case instead of returning NaN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the square canvas images are letterboxed onto.
pub const LETTERBOX_SIDE: u32 = 640;

/// Axis-aligned box in normalized `[0, 1]` coordinates.
///
/// Serialized as a four-element array `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let coords = [("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)];
        for (name, v) in coords {
            if !v.is_finite() {
                return Err(Error::InvalidBox(format!("{name} is not finite")));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidBox(format!("{name}={v} outside [0, 1]")));
            }
        }
        if x2 < x1 {
            return Err(Error::InvalidBox(format!("x2={x2} < x1={x1}")));
        }
        if y2 < y1 {
            return Err(Error::InvalidBox(format!("y2={y2} < y1={y1}")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// The whole image.
    pub const fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_cxcywh(&self) -> CxCyWhBox {
        let (cx, cy) = self.center();
        CxCyWhBox {
            cx,
            cy,
            w: self.width(),
            h: self.height(),
        }
    }

    /// Boundary-inclusive point containment.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        intersection_area_raw(&self.to_array(), &other.to_array())
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Center/size view of a box, used by the set-prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CxCyWhBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CxCyWhBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox("non-finite cxcywh component".into()));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!("negative size w={w} h={h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Corner coordinates without range validation.
    pub fn to_xyxy_raw(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn to_xyxy(&self) -> Result<BoundingBox> {
        let [x1, y1, x2, y2] = self.to_xyxy_raw();
        BoundingBox::new(x1, y1, x2, y2)
    }
}

/// Pixel dimensions of a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeom {
    width_px: u32,
    height_px: u32,
}

impl ImageGeom {
    pub fn new(width_px: u32, height_px: u32) -> Result<Self> {
        if width_px == 0 || height_px == 0 {
            return Err(Error::InvalidParameter(format!(
                "image dimensions must be positive, got {width_px}x{height_px}"
            )));
        }
        Ok(Self { width_px, height_px })
    }

    pub fn width_px(&self) -> u32 {
        self.width_px
    }

    pub fn height_px(&self) -> u32 {
        self.height_px
    }

    fn longer_side(&self) -> f64 {
        f64::from(self.width_px.max(self.height_px))
    }
}

/// Box in source-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    fn check_within(&self, geom: &ImageGeom) -> Result<()> {
        let (w, h) = (f64::from(geom.width_px), f64::from(geom.height_px));
        let ok = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && 0.0 <= self.x1
            && self.x1 <= self.x2
            && self.x2 <= w
            && 0.0 <= self.y1
            && self.y1 <= self.y2
            && self.y2 <= h;
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfBounds(format!(
                "[{}, {}, {}, {}] in {}x{} image",
                self.x1, self.y1, self.x2, self.y2, geom.width_px, geom.height_px
            )))
        }
    }

    /// Plain normalization by the image's own width and height.
    pub fn normalize(&self, geom: &ImageGeom) -> Result<BoundingBox> {
        self.check_within(geom)?;
        let (w, h) = (f64::from(geom.width_px), f64::from(geom.height_px));
        BoundingBox::new(self.x1 / w, self.y1 / h, self.x2 / w, self.y2 / h)
    }
}

pub(crate) fn intersection_area_raw(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

fn area_raw(a: &[f64; 4]) -> f64 {
    (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0)
}

pub(crate) fn iou_raw(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = intersection_area_raw(a, b);
    let union = area_raw(a) + area_raw(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub(crate) fn giou_raw(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = intersection_area_raw(a, b);
    let union = area_raw(a) + area_raw(b) - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let enclosure = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if enclosure <= 0.0 {
        return iou;
    }
    iou - (enclosure - union) / enclosure
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    iou_raw(&a.to_array(), &b.to_array())
}

/// Generalized IoU, in `[-1, 1]`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    giou_raw(&a.to_array(), &b.to_array())
}

/// Whether the center of `pred` lies inside `gt`, boundary-inclusive.
pub fn center_in(pred: &BoundingBox, gt: &BoundingBox) -> bool {
    let (cx, cy) = pred.center();
    gt.contains_point(cx, cy)
}

/// Exact area of a union of rectangles by coordinate compression.
pub fn union_area(boxes: &[BoundingBox]) -> f64 {
    let (_, union) = compressed_overlap(boxes, &[]);
    union
}

/// IoU of the regions covered by two box sets.
///
/// Both unions are computed exactly on the grid induced by all box edges,
/// so no rasterization resolution is involved. Two empty sets score 1.0,
/// exactly one empty set scores 0.0.
pub fn mask_iou(preds: &[BoundingBox], gts: &[BoundingBox]) -> f64 {
    match (preds.is_empty(), gts.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (inter, union) = compressed_overlap(preds, gts);
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Returns (area covered by both sets, area covered by either set).
fn compressed_overlap(a: &[BoundingBox], b: &[BoundingBox]) -> (f64, f64) {
    let mut xs: Vec<f64> = a.iter().chain(b).flat_map(|r| [r.x1, r.x2]).collect();
    let mut ys: Vec<f64> = a.iter().chain(b).flat_map(|r| [r.y1, r.y2]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();

    let mut inter = 0.0;
    let mut union = 0.0;
    for xw in xs.windows(2) {
        let mx = (xw[0] + xw[1]) / 2.0;
        let in_a: Vec<&BoundingBox> = a.iter().filter(|r| r.x1 < mx && mx < r.x2).collect();
        let in_b: Vec<&BoundingBox> = b.iter().filter(|r| r.x1 < mx && mx < r.x2).collect();
        if in_a.is_empty() && in_b.is_empty() {
            continue;
        }
        let dx = xw[1] - xw[0];
        for yw in ys.windows(2) {
            let my = (yw[0] + yw[1]) / 2.0;
            let ca = in_a.iter().any(|r| r.y1 < my && my < r.y2);
            let cb = in_b.iter().any(|r| r.y1 < my && my < r.y2);
            let cell = dx * (yw[1] - yw[0]);
            if ca && cb {
                inter += cell;
            }
            if ca || cb {
                union += cell;
            }
        }
    }
    (inter, union)
}

/// Maps a pixel box onto the letterboxed `target x target` canvas.
///
/// The image is scaled so its longer side equals `target` and padded on the
/// bottom/right; the result is normalized by `target`.
pub fn letterbox_transform(box_px: &PixelBox, geom: &ImageGeom, target: u32) -> Result<BoundingBox> {
    if target == 0 {
        return Err(Error::InvalidParameter("letterbox target must be positive".into()));
    }
    box_px.check_within(geom)?;
    let scale = f64::from(target) / geom.longer_side();
    let t = f64::from(target);
    let f = |v: f64| (v * scale / t).clamp(0.0, 1.0);
    BoundingBox::new(f(box_px.x1), f(box_px.y1), f(box_px.x2), f(box_px.y2))
}

/// Inverse of [`letterbox_transform`].
pub fn letterbox_inverse(b: &BoundingBox, geom: &ImageGeom, target: u32) -> Result<PixelBox> {
    if target == 0 {
        return Err(Error::InvalidParameter("letterbox target must be positive".into()));
    }
    let scale = f64::from(target) / geom.longer_side();
    let t = f64::from(target);
    let f = |v: f64| v * t / scale;
    let px = PixelBox::new(f(b.x1), f(b.y1), f(b.x2), f(b.y2));
    let (w, h) = (f64::from(geom.width_px), f64::from(geom.height_px));
    if px.x2 > w + 1e-9 || px.y2 > h + 1e-9 {
        return Err(Error::OutOfBounds(format!(
            "box {:?} lies in the padding of a {}x{} image",
            b.to_array(),
            geom.width_px,
            geom.height_px
        )));
    }
    Ok(px)
}

/// Fraction of `bbox` that survives inside `crop`.
///
/// A zero-area box counts as its center point.
pub fn crop_visibility(bbox: &BoundingBox, crop: &BoundingBox) -> f64 {
    let area = bbox.area();
    if area <= 0.0 {
        let (cx, cy) = bbox.center();
        return if crop.contains_point(cx, cy) { 1.0 } else { 0.0 };
    }
    (bbox.intersection_area(crop) / area).clamp(0.0, 1.0)
}
