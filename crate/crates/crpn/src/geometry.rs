//! Anchor boxes, overlap computation, offset encoding and label assignment.
//! Boxes are center-form (cx, cy, w, h) in f64; files on disk use corner form
//! (x, y, w, h) and are converted at the harness boundary.

use crate::error::{Error, Result};

/// Smallest width/height a refined box may reach before it is clamped.
pub const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// From corner form (x, y, w, h): x, y is the top-left corner.
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    /// Back to corner form (x, y, w, h).
    pub fn to_corner(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }

    pub fn area(&self) -> f64 {
        if self.w <= 0.0 || self.h <= 0.0 {
            0.0
        } else {
            self.w * self.h
        }
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    /// Geometric-mean side length.
    pub fn scale(&self) -> f64 {
        (self.w * self.h).max(0.0).sqrt()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1() && x <= self.x2() && y >= self.y1() && y <= self.y2()
    }
}

/// Regression offsets: center shifts normalized by anchor extent, log scales.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Offsets {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Offsets {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Offsets { dx, dy, dw, dh }
    }
}

/// Intersection-over-union of two boxes. Degenerate (non-positive area)
/// inputs give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let aa = a.area();
    let ab = b.area();
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let union = aa + ab - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Offsets that carry `anchor` onto `gt`.
pub fn encode_offsets(anchor: &BBox, gt: &BBox) -> Result<Offsets> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 || gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::Config(format!(
            "encode_offsets: non-positive extent (anchor {}x{}, gt {}x{})",
            anchor.w, anchor.h, gt.w, gt.h
        )));
    }
    Ok(Offsets {
        dx: (gt.cx - anchor.cx) / anchor.w,
        dy: (gt.cy - anchor.cy) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dh: (gt.h / anchor.h).ln(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Refined {
    pub bbox: BBox,
    /// True when a side hit the minimum-extent floor and was clamped.
    pub clamped: bool,
}

/// Apply offsets to an anchor: shift the center by the normalized deltas,
/// scale the extent exponentially. Sides are floored at `MIN_BOX_SIDE`.
pub fn decode_refine(anchor: &BBox, off: &Offsets) -> Refined {
    let mut w = anchor.w * off.dw.exp();
    let mut h = anchor.h * off.dh.exp();
    let mut clamped = false;
    if !(w >= MIN_BOX_SIDE) {
        w = MIN_BOX_SIDE;
        clamped = true;
    }
    if !(h >= MIN_BOX_SIDE) {
        h = MIN_BOX_SIDE;
        clamped = true;
    }
    Refined {
        bbox: BBox {
            cx: anchor.cx + anchor.w * off.dx,
            cy: anchor.cy + anchor.h * off.dy,
            w,
            h,
        },
        clamped,
    }
}

/// Stable identity of one anchor: encodes (ratio slot, row, col) of the score
/// grid it was born at, which is also where its scores are read at every
/// stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AnchorId(pub u32);

#[derive(Debug, Clone)]
pub struct AnchorSet {
    /// 1-based cascade stage this set feeds. Stage 1 is the initial grid.
    pub stage: usize,
    /// Score-grid geometry: (ratio count, rows, cols).
    pub grid: (usize, usize, usize),
    pub entries: Vec<(AnchorId, BBox)>,
    /// Set when a stage kept top-scoring anchors because filtering left too
    /// few survivors.
    pub fallback_fired: bool,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// (ratio slot, row, col) of an anchor id under this grid.
    pub fn site(&self, id: AnchorId) -> (usize, usize, usize) {
        let (_, h, w) = self.grid;
        let hw = (h * w) as u32;
        let slot = id.0 / hw;
        let rem = id.0 % hw;
        (slot as usize, (rem / w as u32) as usize, (rem % w as u32) as usize)
    }
}

/// Lay a grid of anchors over a feature map. One anchor per ratio per site;
/// every anchor has area base_size^2 with aspect ratio h/w = ratio. Centers
/// sit at origin_offset + site * stride in image coordinates. Ids are
/// slot-major then row-major, matching score-map channel layout.
pub fn generate_anchors(
    rows: usize,
    cols: usize,
    stride: f64,
    base_size: f64,
    ratios: &[f64],
    origin_offset: f64,
) -> Result<AnchorSet> {
    if rows == 0 || cols == 0 || ratios.is_empty() {
        return Err(Error::Config(format!(
            "generate_anchors: empty geometry ({rows}x{cols}, {} ratios)",
            ratios.len()
        )));
    }
    if base_size <= 0.0 || stride <= 0.0 || ratios.iter().any(|&r| r <= 0.0) {
        return Err(Error::Config(
            "generate_anchors: stride, base size and ratios must be positive".into(),
        ));
    }
    let mut entries = Vec::with_capacity(rows * cols * ratios.len());
    for (slot, &ratio) in ratios.iter().enumerate() {
        let w = base_size / ratio.sqrt();
        let h = base_size * ratio.sqrt();
        for r in 0..rows {
            for c in 0..cols {
                let id = AnchorId((slot * rows * cols + r * cols + c) as u32);
                let bbox = BBox {
                    cx: origin_offset + c as f64 * stride,
                    cy: origin_offset + r as f64 * stride,
                    w,
                    h,
                };
                entries.push((id, bbox));
            }
        }
    }
    Ok(AnchorSet {
        stage: 1,
        grid: (ratios.len(), rows, cols),
        entries,
        fallback_fired: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
pub struct LabeledAnchor {
    pub id: AnchorId,
    pub label: Label,
    /// Regression target, present for positives.
    pub target: Option<Offsets>,
}

#[derive(Debug, Clone)]
pub struct LabelAssignment {
    pub labels: Vec<LabeledAnchor>,
    pub positives: usize,
    pub negatives: usize,
    pub ignored: usize,
}

impl LabelAssignment {
    pub fn no_positives(&self) -> bool {
        self.positives == 0
    }
}

/// Threshold anchors against one ground-truth box. Strictly above `tau_pos`
/// is positive, strictly below `tau_neg` negative, anything else (including
/// exact threshold hits) is ignored.
pub fn assign_labels(
    anchors: &AnchorSet,
    gt: &BBox,
    tau_pos: f64,
    tau_neg: f64,
) -> Result<LabelAssignment> {
    if !(0.0 < tau_neg && tau_neg < tau_pos && tau_pos < 1.0) {
        return Err(Error::Config(format!(
            "assign_labels: need 0 < tau_neg < tau_pos < 1, got {tau_neg}, {tau_pos}"
        )));
    }
    if gt.area() <= 0.0 {
        return Err(Error::Config(format!(
            "assign_labels: degenerate ground truth {}x{}",
            gt.w, gt.h
        )));
    }
    let mut labels = Vec::with_capacity(anchors.len());
    let (mut pos, mut neg, mut ign) = (0usize, 0usize, 0usize);
    for &(id, ref bbox) in &anchors.entries {
        let v = iou(bbox, gt);
        let (label, target) = if v > tau_pos {
            pos += 1;
            (Label::Positive, Some(encode_offsets(bbox, gt)?))
        } else if v < tau_neg {
            neg += 1;
            (Label::Negative, None)
        } else {
            ign += 1;
            (Label::Ignore, None)
        };
        labels.push(LabeledAnchor { id, label, target });
    }
    Ok(LabelAssignment {
        labels,
        positives: pos,
        negatives: neg,
        ignored: ign,
    })
}
