//! Axis-aligned boxes, IoU and the center/size offset parameterization used
//! for every regression label.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box [{0}, {1}, {2}, {3}]: width and height must be positive and finite")]
    Degenerate(f64, f64, f64, f64),
    #[error("non-finite offset component")]
    NonFiniteDelta,
    #[error("offset (dw={dw}, dh={dh}) overflows the size exponential")]
    SizeOverflow { dw: f64, dh: f64 },
    #[error("normalization stdev must be strictly positive and finite, got {0:?}")]
    BadStdev([f64; 4]),
}

/// Axis-aligned rectangle stored by corners, continuous coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x2 > x1 && y2 > y1;
        if !ok {
            return Err(GeometryError::Degenerate(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Build from center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
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
    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }
    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }
    pub fn w(&self) -> f64 {
        self.x2 - self.x1
    }
    pub fn h(&self) -> f64 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> f64 {
        self.w() * self.h()
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clip to `[0, width] x [0, height]`; `None` when nothing of positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width),
            self.y2.min(height),
        )
        .ok()
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.corners().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    // Identical boxes must give exactly 1 even under rounding.
    if a == b {
        return 1.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Regression offset `(dx, dy, dw, dh)` in center/log-size form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Delta {
    pub const ZERO: Delta = Delta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    fn zip_with(self, other: Delta, f: impl Fn(f64, f64) -> f64) -> Delta {
        Delta::new(
            f(self.dx, other.dx),
            f(self.dy, other.dy),
            f(self.dw, other.dw),
            f(self.dh, other.dh),
        )
    }
}

/// Normalization factors applied to raw offsets before they reach the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    mean: Delta,
    stdev: Delta,
}

impl DeltaStats {
    pub fn new(mean: Delta, stdev: Delta) -> Result<Self, GeometryError> {
        let s = stdev.to_array();
        if !mean.is_finite() || s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GeometryError::BadStdev(s));
        }
        Ok(Self { mean, stdev })
    }

    pub fn mean(&self) -> Delta {
        self.mean
    }

    pub fn stdev(&self) -> Delta {
        self.stdev
    }
}

impl Default for DeltaStats {
    /// Zero mean, stdev `(0.1, 0.1, 0.2, 0.2)`.
    fn default() -> Self {
        Self {
            mean: Delta::ZERO,
            stdev: Delta::new(0.1, 0.1, 0.2, 0.2),
        }
    }
}

/// Offset that moves `b` onto `g`.
pub fn encode_offsets(b: &BBox, g: &BBox) -> Delta {
    Delta::new(
        (g.cx() - b.cx()) / b.w(),
        (g.cy() - b.cy()) / b.h(),
        (g.w() / b.w()).ln(),
        (g.h() / b.h()).ln(),
    )
}

/// Inverse of [`encode_offsets`].
pub fn decode_offsets(b: &BBox, d: &Delta) -> Result<BBox, GeometryError> {
    if !d.is_finite() {
        return Err(GeometryError::NonFiniteDelta);
    }
    let w = b.w() * d.dw.exp();
    let h = b.h() * d.dh.exp();
    let cx = b.cx() + d.dx * b.w();
    let cy = b.cy() + d.dy * b.h();
    if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
        return Err(GeometryError::SizeOverflow { dw: d.dw, dh: d.dh });
    }
    BBox::from_center(cx, cy, w, h).map_err(|_| GeometryError::SizeOverflow { dw: d.dw, dh: d.dh })
}

pub fn normalize(d: &Delta, s: &DeltaStats) -> Delta {
    d.zip_with(s.mean, |v, m| v - m).zip_with(s.stdev, |v, sd| v / sd)
}

pub fn denormalize(d: &Delta, s: &DeltaStats) -> Delta {
    d.zip_with(s.stdev, |v, sd| v * sd).zip_with(s.mean, |v, m| v + m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Rasterize both boxes on a fine grid and count cells.
    fn raster_iou(a: &BBox, b: &BBox, step: f64) -> f64 {
        let (lo_x, hi_x) = (a.x1.min(b.x1), a.x2.max(b.x2));
        let (lo_y, hi_y) = (a.y1.min(b.y1), a.y2.max(b.y2));
        let inside = |r: &BBox, x: f64, y: f64| x >= r.x1 && x < r.x2 && y >= r.y1 && y < r.y2;
        let (mut inter, mut union) = (0u64, 0u64);
        let nx = ((hi_x - lo_x) / step).round() as usize;
        let ny = ((hi_y - lo_y) / step).round() as usize;
        for i in 0..nx {
            for j in 0..ny {
                let x = lo_x + (i as f64 + 0.5) * step;
                let y = lo_y + (j as f64 + 0.5) * step;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let b = bx(0.3, 0.1, 4.2, 7.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        let (a, c) = (bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 1.0, 3.0, 3.0));
        let oracle = raster_iou(&a, &c, 0.01);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9);
        assert!((iou(&a, &c) - oracle).abs() < 1e-12);
        // touching edges share no interior
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn encode_decode_examples() {
        let b = BBox::from_center(1.0, 1.0, 2.0, 2.0).unwrap();
        let g = BBox::from_center(2.0, 1.0, 4.0, 2.0).unwrap();
        assert_eq!(encode_offsets(&b, &b), Delta::ZERO);
        let d = encode_offsets(&b, &g);
        assert_eq!(d, Delta::new(0.5, 0.0, 2f64.ln(), 0.0));
        let back = decode_offsets(&b, &d).unwrap();
        for (u, v) in back.corners().iter().zip(g.corners()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(decode_offsets(&b, &Delta::ZERO).unwrap(), b);
    }

    #[test]
    fn decode_rejects_overflow() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(
            decode_offsets(&b, &Delta::new(0.0, 0.0, 800.0, 0.0)),
            Err(GeometryError::SizeOverflow { .. })
        ));
        assert!(matches!(
            decode_offsets(&b, &Delta::new(0.0, 0.0, 0.0, -800.0)),
            Err(GeometryError::SizeOverflow { .. })
        ));
        assert!(decode_offsets(&b, &Delta::new(f64::NAN, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = DeltaStats::default();
        assert_eq!(normalize(&s.mean(), &s), Delta::ZERO);
        let n = normalize(&Delta::new(0.1, 0.0, 0.0, 0.0), &s);
        assert!((n.dx - 1.0).abs() < 1e-15 && n.dy == 0.0 && n.dw == 0.0 && n.dh == 0.0);
        assert!(DeltaStats::new(Delta::ZERO, Delta::new(0.1, 0.0, 0.1, 0.1)).is_err());
    }

    #[test]
    fn box_json_is_corner_array() {
        let b = bx(1.0, 2.0, 3.5, 4.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.5,4.0]");
        let back: BBox = serde_json::from_str("[1.0,2.0,3.5,4.0]").unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox>("[1.0,2.0,0.5,4.0]").is_err());
    }
}
