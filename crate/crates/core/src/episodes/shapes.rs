//! Parametric shapes rasterised at pixel centres.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::HseError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
    Diamond,
    Ellipse,
    LShape,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 9] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Bar,
        ShapeKind::Diamond,
        ShapeKind::Ellipse,
        ShapeKind::LShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Bar => "bar",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::LShape => "l-shape",
        }
    }

    /// Membership test in the shape's unit frame.
    fn contains_unit(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => {
                let verts = [(0.0, -1.0), (0.866, 0.5), (-0.866, 0.5)];
                (0..3).all(|i| {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % 3];
                    (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
                })
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + 4.0 * v * v <= 1.0,
            ShapeKind::LShape => {
                ((-0.8..=-0.2).contains(&u) && (-0.9..=0.9).contains(&v))
                    || ((-0.8..=0.8).contains(&u) && (0.3..=0.9).contains(&v))
            }
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = HseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HseError::Argument(format!("unknown shape {s:?}")))
    }
}

/// One placed shape: centre and radius in pixels, rotation in radians,
/// colour as RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

impl ShapeInstance {
    /// Whether the centre of pixel `(x, y)` lies inside.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.radius;
        let v = (-s * dx + c * dy) / self.radius;
        self.kind.contains_unit(u, v)
    }

    /// Row-major coverage over a `width×height` grid.
    pub fn rasterize(&self, width: usize, height: usize) -> Vec<bool> {
        let mut out = vec![false; width * height];
        let r = self.radius * 1.5;
        let y0 = (self.cy - r).floor().max(0.0) as usize;
        let y1 = ((self.cy + r).ceil().max(0.0) as usize).min(height);
        let x0 = (self.cx - r).floor().max(0.0) as usize;
        let x1 = ((self.cx + r).ceil().max(0.0) as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                out[y * width + x] = self.covers(x, y);
            }
        }
        out
    }
}

/// Union of the rasters of `instances`.
pub fn rasterize_union(instances: &[ShapeInstance], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; width * height];
    for inst in instances {
        for (o, c) in out.iter_mut().zip(inst.rasterize(width, height)) {
            *o |= c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in ShapeKind::ALL {
            assert_eq!(k.name().parse::<ShapeKind>().unwrap(), k);
        }
    }

    #[test]
    fn every_shape_covers_some_pixels_but_not_all() {
        for kind in ShapeKind::ALL {
            let inst = ShapeInstance {
                kind,
                cx: 16.0,
                cy: 16.0,
                radius: 8.0,
                angle: 0.3,
                color: [1.0; 3],
            };
            let n = inst.rasterize(32, 32).iter().filter(|&&b| b).count();
            assert!(n > 20 && n < 300, "{kind}: {n}");
        }
    }

    #[test]
    fn ring_has_a_hole() {
        let inst = ShapeInstance {
            kind: ShapeKind::Ring,
            cx: 10.0,
            cy: 10.0,
            radius: 8.0,
            angle: 0.0,
            color: [0.0; 3],
        };
        assert!(!inst.covers(9, 9));
        assert!(inst.covers(9, 3));
    }
}
