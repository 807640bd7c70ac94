//! Box geometry and circular-angle arithmetic.
//!
//! Boxes are stored in center-size form, in pixels. Angles are carried both in
//! degrees `[0, 360)` and in the unit form `[0, 1)` used by the sigmoid head.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard added to the aspect-ratio weight denominator of CIoU.
pub const CIOU_EPS: f64 = 1e-7;

/// Axis-aligned box in center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// Axis-aligned box in corner form `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite field in ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "non-positive size w={w} h={h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Detection-benchmark layout: top-left corner plus size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn from_corners(c: Corners) -> Result<Self> {
        let w = c.x2 - c.x1;
        let h = c.y2 - c.y1;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidBox(format!(
                "corners ({}, {}, {}, {}) are not strictly ordered",
                c.x1, c.y1, c.x2, c.y2
            )));
        }
        Self::new((c.x1 + c.x2) / 2.0, (c.y1 + c.y2) / 2.0, w, h)
    }

    pub fn to_corners(&self) -> Corners {
        Corners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Body orientation, `0 <= degrees < 360`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrientationAngle(f64);

impl OrientationAngle {
    /// Accepts `[0, 360]`; exactly 360 folds to 0.
    pub fn from_degrees(degrees: f64) -> Result<Self> {
        if !degrees.is_finite() || !(0.0..=360.0).contains(&degrees) {
            return Err(Error::AngleOutOfRange(format!(
                "{degrees} degrees is outside [0, 360]"
            )));
        }
        Ok(Self(if degrees == 360.0 { 0.0 } else { degrees }))
    }

    /// Accepts `[0, 1]`; exactly 1 folds to 0.
    pub fn from_unit(unit: f64) -> Result<Self> {
        if !unit.is_finite() || !(0.0..=1.0).contains(&unit) {
            return Err(Error::AngleOutOfRange(format!(
                "{unit} is outside the unit range [0, 1]"
            )));
        }
        let deg = unit * 360.0;
        Ok(Self(if deg >= 360.0 { 0.0 } else { deg }))
    }

    pub fn degrees(&self) -> f64 {
        self.0
    }

    pub fn unit(&self) -> f64 {
        self.0 / 360.0
    }
}

fn check_unit(x: f64) -> Result<()> {
    if x.is_finite() && (0.0..1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::AngleOutOfRange(format!("{x} is outside [0, 1)")))
    }
}

fn check_degrees(x: f64) -> Result<()> {
    if x.is_finite() && (0.0..360.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::AngleOutOfRange(format!("{x} is outside [0, 360)")))
    }
}

/// Circular distance between two unit angles, in `[0, 0.5]`.
pub fn wrapped_unit_distance(a: f64, b: f64) -> Result<f64> {
    check_unit(a)?;
    check_unit(b)?;
    let d = (a - b).abs();
    Ok(d.min(1.0 - d))
}

/// Circular distance between two angles in degrees, in `[0, 180]`.
pub fn wrapped_deg_error(a: f64, b: f64) -> Result<f64> {
    check_degrees(a)?;
    check_degrees(b)?;
    let d = (a - b).abs();
    Ok(d.min(360.0 - d))
}

pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let iw = (ca.x2.min(cb.x2) - ca.x1.max(cb.x1)).max(0.0);
    let ih = (ca.y2.min(cb.y2) - ca.y1.max(cb.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn ciou(a: &Box2D, b: &Box2D) -> f64 {
    overlap_with_grad(a, b).ciou
}

/// IoU and CIoU of `pred` against a fixed `target`, with gradients of both
/// with respect to `pred`'s `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy)]
pub struct OverlapGrad {
    pub iou: f64,
    pub ciou: f64,
    pub d_iou: [f64; 4],
    pub d_ciou: [f64; 4],
}

pub fn overlap_with_grad(pred: &Box2D, target: &Box2D) -> OverlapGrad {
    let p = pred.to_corners();
    let t = target.to_corners();

    // intersection
    let ix2 = p.x2.min(t.x2);
    let ix1 = p.x1.max(t.x1);
    let iy2 = p.y2.min(t.y2);
    let iy1 = p.y1.max(t.y1);
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let union = pred.area() + target.area() - inter;
    let iou = inter / union;

    // enclosing box
    let cw = p.x2.max(t.x2) - p.x1.min(t.x1);
    let ch = p.y2.max(t.y2) - p.y1.min(t.y1);
    let c2 = cw * cw + ch * ch;
    let dx = pred.cx - target.cx;
    let dy = pred.cy - target.cy;
    let rho2 = dx * dx + dy * dy;

    // aspect-ratio consistency
    let k = 4.0 / (PI * PI);
    let delta = (pred.w / pred.h).atan() - (target.w / target.h).atan();
    let v = k * delta * delta;
    let denom = (1.0 - iou) + v + CIOU_EPS;
    let alpha = v / denom;
    let ciou = iou - rho2 / c2 - alpha * v;

    // reverse pass, through corner coordinates of pred
    let mut g_x1;
    let mut g_x2;
    let mut g_y1;
    let mut g_y2;

    // d iou / d corners
    let d_iou_d_inter = (union + inter) / (union * union);
    let d_iou_d_area = -inter / (union * union);
    let d_inter_d_iw = if iw_raw > 0.0 { ih } else { 0.0 };
    let d_inter_d_ih = if ih_raw > 0.0 { iw } else { 0.0 };
    let g_iw = d_iou_d_inter * d_inter_d_iw;
    let g_ih = d_iou_d_inter * d_inter_d_ih;
    g_x2 = if p.x2 < t.x2 { g_iw } else { 0.0 };
    g_x1 = if p.x1 > t.x1 { -g_iw } else { 0.0 };
    g_y2 = if p.y2 < t.y2 { g_ih } else { 0.0 };
    g_y1 = if p.y1 > t.y1 { -g_ih } else { 0.0 };
    let mut d_iou = corners_to_center_grad(g_x1, g_y1, g_x2, g_y2);
    // area = w * h
    d_iou[2] += d_iou_d_area * pred.h;
    d_iou[3] += d_iou_d_area * pred.w;

    // d ciou = g_iou * d iou - d(rho2/c2) - g_v * dv
    let g_iou = 1.0 - v * v / (denom * denom);
    let g_v = -(2.0 * v * denom - v * v) / (denom * denom);
    let g_c2 = rho2 / (c2 * c2);
    let g_rho2 = -1.0 / c2;

    let mut d_ciou = d_iou.map(|g| g * g_iou);
    d_ciou[0] += g_rho2 * 2.0 * dx;
    d_ciou[1] += g_rho2 * 2.0 * dy;

    let g_cw = g_c2 * 2.0 * cw;
    let g_ch = g_c2 * 2.0 * ch;
    g_x2 = if p.x2 > t.x2 { g_cw } else { 0.0 };
    g_x1 = if p.x1 < t.x1 { -g_cw } else { 0.0 };
    g_y2 = if p.y2 > t.y2 { g_ch } else { 0.0 };
    g_y1 = if p.y1 < t.y1 { -g_ch } else { 0.0 };
    let d_enclose = corners_to_center_grad(g_x1, g_y1, g_x2, g_y2);
    for (acc, g) in d_ciou.iter_mut().zip(d_enclose) {
        *acc += g;
    }

    let r2 = pred.w * pred.w + pred.h * pred.h;
    let dv_dw = 2.0 * k * delta * pred.h / r2;
    let dv_dh = -2.0 * k * delta * pred.w / r2;
    d_ciou[2] += g_v * dv_dw;
    d_ciou[3] += g_v * dv_dh;

    OverlapGrad {
        iou,
        ciou,
        d_iou,
        d_ciou,
    }
}

fn corners_to_center_grad(g_x1: f64, g_y1: f64, g_x2: f64, g_y2: f64) -> [f64; 4] {
    [
        g_x1 + g_x2,
        g_y1 + g_y2,
        0.5 * (g_x2 - g_x1),
        0.5 * (g_y2 - g_y1),
    ]
}

/// Smallest distance between any edge of `a` and any same-axis edge of `b`.
/// The overlap measures above are non-differentiable where this is zero.
pub fn edge_margin(a: &Box2D, b: &Box2D) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let xs = [ca.x1, ca.x2];
    let ys = [ca.y1, ca.y2];
    let mut m = f64::INFINITY;
    for x in xs {
        m = m.min((x - cb.x1).abs()).min((x - cb.x2).abs());
    }
    for y in ys {
        m = m.min((y - cb.y1).abs()).min((y - cb.y2).abs());
    }
    m
}
