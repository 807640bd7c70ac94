//! SVG rendering of boxes with orientation arrows drawn from the box centre.
//!
//! By default 0 degrees points up the screen (towards -y) and angles grow
//! clockwise. Both the zero direction and the handedness are configurable.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinds::Box2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroDirection {
    #[default]
    Up,
    Right,
    Down,
    Left,
}

impl ZeroDirection {
    fn vector(self) -> (f64, f64) {
        match self {
            ZeroDirection::Up => (0.0, -1.0),
            ZeroDirection::Right => (1.0, 0.0),
            ZeroDirection::Down => (0.0, 1.0),
            ZeroDirection::Left => (-1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotStyle {
    pub zero_direction: ZeroDirection,
    pub clockwise: bool,
    /// Arrow length as a fraction of the box's shorter side.
    pub arrow_scale: f64,
    pub stroke_width: f64,
}

impl Default for PlotStyle {
    fn default() -> Self {
        Self {
            zero_direction: ZeroDirection::Up,
            clockwise: true,
            arrow_scale: 0.8,
            stroke_width: 2.0,
        }
    }
}

impl PlotStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrow_scale.is_finite() && self.arrow_scale > 0.0) || !(self.stroke_width.is_finite() && self.stroke_width > 0.0) {
            return Err(Error::Config("plot.arrow_scale and plot.stroke_width must be > 0".into()));
        }
        Ok(())
    }

    /// Unit screen vector (y down) for an angle in degrees.
    pub fn direction(&self, degrees: f64) -> (f64, f64) {
        let t = degrees.to_radians() * if self.clockwise { 1.0 } else { -1.0 };
        let (x, y) = self.zero_direction.vector();
        let (s, c) = t.sin_cos();
        (x * c - y * s, x * s + y * c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotItem {
    pub bbox: Box2D,
    pub orientation_deg: Option<f64>,
    /// Drawn dashed.
    pub weak: bool,
    pub label: Option<String>,
}

/// Two decimals, with negative zero folded.
fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(width: u32, height: u32, items: &[PlotItem], style: &PlotStyle) -> String {
    let sw = num(style.stroke_width);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    s.push_str(concat!(
        r#"<defs><marker id="head" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto">"#,
        r#"<path d="M0,0 L6,3 L0,6 z" fill="cyan"/></marker></defs>"#,
        "\n"
    ));
    writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    for item in items {
        let c = item.bbox.to_corners();
        let dash = if item.weak { r#" stroke-dasharray="4 3""# } else { "" };
        writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="lime" stroke-width="{sw}"{dash}/>"#,
            num(c.x1),
            num(c.y1),
            num(item.bbox.w()),
            num(item.bbox.h()),
        )
        .unwrap();
        if let Some(deg) = item.orientation_deg {
            let (dx, dy) = style.direction(deg);
            let len = style.arrow_scale * item.bbox.w().min(item.bbox.h());
            let (x0, y0) = (item.bbox.cx(), item.bbox.cy());
            writeln!(
                s,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="cyan" stroke-width="{sw}" marker-end="url(#head)"/>"#,
                num(x0),
                num(y0),
                num(x0 + len * dx),
                num(y0 + len * dy),
            )
            .unwrap();
        }
        if let Some(label) = &item.label {
            writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="10" font-family="monospace" fill="black">{}</text>"#,
                num(c.x1),
                num((c.y1 - 2.0).max(10.0)),
                escape(label)
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: (f64, f64), b: (f64, f64)) -> bool {
        (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12
    }

    #[test]
    fn default_convention() {
        let st = PlotStyle::default();
        assert!(close(st.direction(0.0), (0.0, -1.0)));
        assert!(close(st.direction(90.0), (1.0, 0.0)));
        assert!(close(st.direction(180.0), (0.0, 1.0)));
        assert!(close(st.direction(270.0), (-1.0, 0.0)));
    }

    #[test]
    fn switchable_convention() {
        let ccw = PlotStyle {
            clockwise: false,
            ..Default::default()
        };
        assert!(close(ccw.direction(90.0), (-1.0, 0.0)));
        let right = PlotStyle {
            zero_direction: ZeroDirection::Right,
            ..Default::default()
        };
        assert!(close(right.direction(0.0), (1.0, 0.0)));
        assert!(close(right.direction(90.0), (0.0, 1.0)));
    }

    #[test]
    fn empty_canvas() {
        let svg = render_svg(64, 48, &[], &PlotStyle::default());
        assert!(svg.starts_with("<svg "));
        assert!(svg.ends_with("</svg>\n"));
        assert!(!svg.contains("<line"));
        assert!(svg.contains(r#"width="64" height="48""#));
    }

    #[test]
    fn arrow_for_ninety_points_right() {
        let item = PlotItem {
            bbox: Box2D::new(50.0, 50.0, 20.0, 40.0).unwrap(),
            orientation_deg: Some(90.0),
            weak: true,
            label: Some("a<b".into()),
        };
        let svg = render_svg(100, 100, std::slice::from_ref(&item), &PlotStyle::default());
        assert!(svg.contains(r#"x1="50.00" y1="50.00" x2="66.00" y2="50.00""#), "{svg}");
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg, render_svg(100, 100, &[item], &PlotStyle::default()));
    }
}
