//! Normalized rectangle algebra.
//!
//! Every box lives in a unit canvas: origin at the top-left, x to the right,
//! y downward, all coordinates in `[0, 1]`. Model-facing text carries boxes as
//! integer thousandths (`[0, 1000]`), see [`QuantBBox`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scale of the integer serialization form.
pub const QUANT_SCALE: i32 = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box ({x0}, {y0}, {x1}, {y1}): need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("invalid quantized box {0:?}: need 0 <= q0 < q1 <= 1000 on both axes")]
    InvalidQuantBox([i32; 4]),
    #[error("box ({x0}, {y0}, {x1}, {y1}) collapses to zero area when quantized")]
    DegenerateBox { x0: f64, y0: f64, x1: f64, y1: f64 },
}

/// Axis-aligned box in normalized canvas coordinates with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite())
            && (0.0..1.0).contains(&x0)
            && (0.0..1.0).contains(&y0)
            && x0 < x1
            && y0 < y1
            && x1 <= 1.0
            && y1 <= 1.0;
        if ok {
            Ok(Self { x0, y0, x1, y1 })
        } else {
            Err(GeometryError::InvalidBox { x0, y0, x1, y1 })
        }
    }

    /// The whole canvas.
    pub const fn unit() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the intersection. Boxes sharing only an edge intersect in zero area.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    pub fn contains(&self, inner: &BBox) -> bool {
        contains(self, inner)
    }

    pub fn dilate(&self, margin: f64) -> BBox {
        dilate(self, margin)
    }

    pub fn quantize(&self) -> Result<QuantBBox, GeometryError> {
        quantize(self)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// True iff `inner` lies entirely within `outer`; touching the boundary is allowed.
pub fn contains(outer: &BBox, inner: &BBox) -> bool {
    outer.x0 <= inner.x0 && outer.y0 <= inner.y0 && inner.x1 <= outer.x1 && inner.y1 <= outer.y1
}

/// Grow `b` by `margin` on every side, clipped to the unit square.
///
/// Negative margins are treated as zero.
pub fn dilate(b: &BBox, margin: f64) -> BBox {
    let m = if margin.is_finite() {
        margin.max(0.0)
    } else {
        0.0
    };
    BBox {
        x0: (b.x0 - m).max(0.0),
        y0: (b.y0 - m).max(0.0),
        x1: (b.x1 + m).min(1.0),
        y1: (b.y1 + m).min(1.0),
    }
}

/// Integer-thousandths box, the form used in every model-facing payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i32; 4]", into = "[i32; 4]")]
pub struct QuantBBox {
    qx0: i32,
    qy0: i32,
    qx1: i32,
    qy1: i32,
}

impl QuantBBox {
    pub fn new(qx0: i32, qy0: i32, qx1: i32, qy1: i32) -> Result<Self, GeometryError> {
        let in_range = |v: i32| (0..=QUANT_SCALE).contains(&v);
        if [qx0, qy0, qx1, qy1].into_iter().all(in_range) && qx0 < qx1 && qy0 < qy1 {
            Ok(Self { qx0, qy0, qx1, qy1 })
        } else {
            Err(GeometryError::InvalidQuantBox([qx0, qy0, qx1, qy1]))
        }
    }

    pub fn to_array(&self) -> [i32; 4] {
        [self.qx0, self.qy0, self.qx1, self.qy1]
    }

    pub fn dequantize(&self) -> BBox {
        dequantize(self)
    }
}

impl TryFrom<[i32; 4]> for QuantBBox {
    type Error = GeometryError;

    fn try_from(v: [i32; 4]) -> Result<Self, Self::Error> {
        QuantBBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<QuantBBox> for [i32; 4] {
    fn from(q: QuantBBox) -> Self {
        q.to_array()
    }
}

/// Round half up to the nearest thousandth, independent of platform rounding mode.
fn round_half_up(v: f64) -> i32 {
    (v * QUANT_SCALE as f64 + 0.5).floor() as i32
}

pub fn quantize(b: &BBox) -> Result<QuantBBox, GeometryError> {
    let q = [b.x0, b.y0, b.x1, b.y1].map(round_half_up);
    if q[0] >= q[2] || q[1] >= q[3] {
        return Err(GeometryError::DegenerateBox {
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
        });
    }
    Ok(QuantBBox {
        qx0: q[0],
        qy0: q[1],
        qx1: q[2],
        qy1: q[3],
    })
}

pub fn dequantize(q: &QuantBBox) -> BBox {
    let s = QUANT_SCALE as f64;
    BBox {
        x0: q.qx0 as f64 / s,
        y0: q.qy0 as f64 / s,
        x1: q.qx1 as f64 / s,
        y1: q.qy1 as f64 / s,
    }
}
