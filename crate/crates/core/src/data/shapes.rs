//! Procedural furniture families built as unions of closed boxes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, TriMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Table,
    Chair,
    Cabinet,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Table, Family::Chair, Family::Cabinet];

    pub fn name(self) -> &'static str {
        match self {
            Family::Table => "table",
            Family::Chair => "chair",
            Family::Cabinet => "cabinet",
        }
    }

    /// Declared parameter ranges, in parameter-vector order.
    pub fn ranges(self) -> &'static [ParamRange] {
        match self {
            Family::Table => TABLE,
            Family::Chair => CHAIR,
            Family::Cabinet => CABINET,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape family `{s}`")))
    }
}

/// Inclusive range of one shape parameter. Integer parameters are sampled on
/// `[lo, hi + 1)` and floored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRange {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
    pub integer: bool,
}

const fn real(name: &'static str, lo: f64, hi: f64) -> ParamRange {
    ParamRange {
        name,
        lo,
        hi,
        integer: false,
    }
}

const TABLE: &[ParamRange] = &[
    real("top_width", 0.8, 1.6),
    real("top_depth", 0.5, 1.0),
    real("top_thickness", 0.03, 0.08),
    real("leg_height", 0.4, 0.9),
    real("leg_thickness", 0.03, 0.1),
    real("leg_inset", 0.0, 0.15),
];

const CHAIR: &[ParamRange] = &[
    real("seat_width", 0.4, 0.7),
    real("seat_depth", 0.4, 0.7),
    real("seat_thickness", 0.03, 0.08),
    real("leg_height", 0.35, 0.55),
    real("leg_thickness", 0.03, 0.07),
    real("leg_inset", 0.0, 0.05),
    real("back_height", 0.3, 0.7),
    real("back_tilt", 0.0, 0.3),
];

const CABINET: &[ParamRange] = &[
    real("width", 0.5, 1.2),
    real("depth", 0.3, 0.6),
    real("height", 0.6, 1.8),
    real("panel_thickness", 0.015, 0.04),
    ParamRange {
        name: "shelf_count",
        lo: 0.0,
        hi: 4.0,
        integer: true,
    },
    real("door_split", 0.3, 0.7),
];

/// Gap left between cabinet doors.
const DOOR_GAP: f64 = 0.01;

/// Family plus parameter vector; `seed` drives surface sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: Family,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(family: Family, params: Vec<f64>, seed: u64) -> Result<Self> {
        let s = Self { family, params, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = self.family.ranges();
        if self.params.len() != ranges.len() {
            return Err(Error::InvalidArgument(format!(
                "{} needs {} parameters, got {}",
                self.family,
                ranges.len(),
                self.params.len()
            )));
        }
        for (v, r) in self.params.iter().zip(ranges) {
            if !(r.lo..=r.hi).contains(v) || (r.integer && v.fract() != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{} parameter {} = {v} outside [{}, {}]",
                    self.family, r.name, r.lo, r.hi
                )));
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.family
            .ranges()
            .iter()
            .position(|r| r.name == name)
            .map(|i| self.params[i])
    }
}

/// Accumulates closed hexahedra into one mesh.
#[derive(Default)]
struct BoxSoup {
    mesh: TriMesh,
}

impl BoxSoup {
    /// Corners in the order (x, y, z) bits: index = x + 2y + 4z.
    fn hexahedron(&mut self, c: [Point; 8]) {
        let base = self.mesh.vertices.len() as u32;
        self.mesh.vertices.extend_from_slice(&c);
        const QUADS: [[u32; 4]; 6] = [
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
        ];
        for q in QUADS {
            self.mesh.faces.push([base + q[0], base + q[1], base + q[2]]);
            self.mesh.faces.push([base + q[0], base + q[2], base + q[3]]);
        }
    }

    fn aabb(&mut self, lo: [f64; 3], hi: [f64; 3]) {
        self.hexahedron(std::array::from_fn(|i| {
            Point::new(
                if i & 1 == 0 { lo[0] } else { hi[0] },
                if i & 2 == 0 { lo[1] } else { hi[1] },
                if i & 4 == 0 { lo[2] } else { hi[2] },
            )
        }));
    }
}

/// Four legs of a rectangular frame standing on `y = 0`.
fn legs(soup: &mut BoxSoup, half_w: f64, half_d: f64, inset: f64, thick: f64, height: f64) {
    for sx in [-1.0, 1.0] {
        for sz in [-1.0, 1.0] {
            let (x0, x1) = (sx * (half_w - inset - thick), sx * (half_w - inset));
            let (z0, z1) = (sz * (half_d - inset - thick), sz * (half_d - inset));
            soup.aabb(
                [x0.min(x1), 0.0, z0.min(z1)],
                [x0.max(x1), height, z0.max(z1)],
            );
        }
    }
}

/// Builds the closed union-of-boxes mesh for `spec` (y up, standing on `y = 0`).
pub fn generate_shape(spec: &ShapeSpec) -> Result<TriMesh> {
    spec.validate()?;
    let p = &spec.params;
    let mut soup = BoxSoup::default();
    match spec.family {
        Family::Table => {
            let (w, d, t, h, l, s) = (p[0], p[1], p[2], p[3], p[4], p[5]);
            soup.aabb([-w / 2.0, h, -d / 2.0], [w / 2.0, h + t, d / 2.0]);
            legs(&mut soup, w / 2.0, d / 2.0, s, l, h);
        }
        Family::Chair => {
            let (w, d, t, h, l, s, b, tilt) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]);
            soup.aabb([-w / 2.0, h, -d / 2.0], [w / 2.0, h + t, d / 2.0]);
            legs(&mut soup, w / 2.0, d / 2.0, s, l, h);
            // Backrest: a slab on the rear edge, sheared backwards with height.
            let lean = b * tilt.tan();
            soup.hexahedron(std::array::from_fn(|i| {
                let x = if i & 1 == 0 { -w / 2.0 } else { w / 2.0 };
                let top = i & 2 != 0;
                let y = if top { h + t + b } else { h + t };
                let z = if i & 4 == 0 { -d / 2.0 } else { -d / 2.0 + t };
                Point::new(x, y, if top { z - lean } else { z })
            }));
        }
        Family::Cabinet => {
            let (w, d, ht, pt, shelves, split) = (p[0], p[1], p[2], p[3], p[4] as usize, p[5]);
            let (hw, hd) = (w / 2.0, d / 2.0);
            soup.aabb([-hw, 0.0, -hd], [-hw + pt, ht, hd]);
            soup.aabb([hw - pt, 0.0, -hd], [hw, ht, hd]);
            soup.aabb([-hw + pt, 0.0, -hd], [hw - pt, pt, hd]);
            soup.aabb([-hw + pt, ht - pt, -hd], [hw - pt, ht, hd]);
            soup.aabb([-hw + pt, pt, -hd], [hw - pt, ht - pt, -hd + pt]);
            let inner = ht - 2.0 * pt;
            for k in 1..=shelves {
                let y = pt + inner * k as f64 / (shelves + 1) as f64 - pt / 2.0;
                soup.aabb([-hw + pt, y, -hd + pt], [hw - pt, y + pt, hd]);
            }
            let xs = -hw + split * w;
            soup.aabb([-hw, 0.0, hd], [xs - DOOR_GAP / 2.0, ht, hd + pt]);
            soup.aabb([xs + DOOR_GAP / 2.0, 0.0, hd], [hw, ht, hd + pt]);
        }
    }
    soup.mesh.validate()?;
    Ok(soup.mesh)
}
