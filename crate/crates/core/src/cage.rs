//! Enclosing cages, 3D mean value coordinates, and keypoint-driven cage
//! deformation.
//!
//! Mean value coordinates follow the closed-triangle-mesh construction of
//! Ju, Schaefer and Warren: per-triangle spherical-angle weights are
//! accumulated onto each cage vertex and normalized.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, TriMesh};

/// Distance below which a query snaps to a cage vertex or face.
pub const MVC_SNAP_EPS: f64 = 1e-8;
/// Required clearance between enclosed points and every cage face plane.
pub const ENCLOSURE_CLEARANCE: f64 = 1e-6;
const CONVEXITY_TOL: f64 = 1e-9;
const MAX_INFLATION_STEPS: usize = 20;
const INFLATION_FACTOR: f64 = 1.05;
/// Lower bound on per-axis half extents, so flat inputs still get a volume.
const MIN_HALF_EXTENT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CageTemplate {
    /// Icosahedron, 12 vertices.
    Icosphere0,
    /// Once-subdivided icosahedron, 42 vertices.
    #[default]
    Icosphere1,
    /// Cube surface with a 3x3 vertex grid per face, 26 vertices.
    Box2,
}

impl CageTemplate {
    pub fn vertex_count(self) -> usize {
        match self {
            CageTemplate::Icosphere0 => 12,
            CageTemplate::Icosphere1 => 42,
            CageTemplate::Box2 => 26,
        }
    }

    /// Unit template centered at the origin, faces oriented outward.
    pub fn unit_mesh(self) -> TriMesh {
        match self {
            CageTemplate::Icosphere0 => icosahedron(),
            CageTemplate::Icosphere1 => subdivide_sphere(&icosahedron()),
            CageTemplate::Box2 => grid_box(),
        }
    }
}

impl FromStr for CageTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icosphere0" => Ok(Self::Icosphere0),
            "icosphere1" => Ok(Self::Icosphere1),
            "box2" => Ok(Self::Box2),
            other => Err(Error::InvalidArgument(format!("unknown cage template `{other}`"))),
        }
    }
}

fn icosahedron() -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let vertices = raw
        .iter()
        .map(|v| Point::from(Vector3::new(v[0], v[1], v[2]).normalize()))
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    orient_outward(TriMesh { vertices, faces })
}

fn subdivide_sphere(mesh: &TriMesh) -> TriMesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
    let mut midpoint = |a: u32, b: u32, vertices: &mut Vec<Point>| -> u32 {
        *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
            let m = (vertices[a as usize].coords + vertices[b as usize].coords).normalize();
            vertices.push(Point::from(m));
            (vertices.len() - 1) as u32
        })
    };
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let ab = midpoint(a, b, &mut vertices);
        let bc = midpoint(b, c, &mut vertices);
        let ca = midpoint(c, a, &mut vertices);
        faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
    }
    orient_outward(TriMesh { vertices, faces })
}

fn grid_box() -> TriMesh {
    let mut index: HashMap<(i32, i32, i32), u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vid = |p: (i32, i32, i32), vertices: &mut Vec<Point>| -> u32 {
        *index.entry(p).or_insert_with(|| {
            vertices.push(Point::new(p.0 as f64, p.1 as f64, p.2 as f64));
            (vertices.len() - 1) as u32
        })
    };
    for axis in 0..3 {
        for side in [-1, 1] {
            let cell = |u: i32, v: i32| -> (i32, i32, i32) {
                match axis {
                    0 => (side, u, v),
                    1 => (u, side, v),
                    _ => (u, v, side),
                }
            };
            for u in -1..1 {
                for v in -1..1 {
                    let a = vid(cell(u, v), &mut vertices);
                    let b = vid(cell(u + 1, v), &mut vertices);
                    let c = vid(cell(u + 1, v + 1), &mut vertices);
                    let d = vid(cell(u, v + 1), &mut vertices);
                    faces.push([a, b, c]);
                    faces.push([a, c, d]);
                }
            }
        }
    }
    orient_outward(TriMesh { vertices, faces })
}

/// Flips faces whose normal points toward the origin.
fn orient_outward(mut mesh: TriMesh) -> TriMesh {
    for f in mesh.faces.iter_mut() {
        let a = mesh.vertices[f[0] as usize];
        let b = mesh.vertices[f[1] as usize];
        let c = mesh.vertices[f[2] as usize];
        let n = (b - a).cross(&(c - a));
        let centroid = (a.coords + b.coords + c.coords) / 3.0;
        if n.dot(&centroid) < 0.0 {
            f.swap(1, 2);
        }
    }
    mesh
}

/// A closed convex control mesh enclosing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Cage {
    pub mesh: TriMesh,
    pub source_id: Option<String>,
}

impl Cage {
    pub fn new(mesh: TriMesh, source_id: Option<String>) -> Result<Self> {
        mesh.validate()?;
        if !mesh.is_watertight() {
            return Err(Error::CageConstruction("cage mesh is not watertight".into()));
        }
        Ok(Self { mesh, source_id })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.mesh.vertices
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertices.len()
    }

    /// Unit outward normal and offset for each face: `n . x - offset` is the signed distance.
    pub fn face_planes(&self) -> Vec<(Vector3<f64>, f64)> {
        (0..self.mesh.faces.len())
            .map(|f| {
                let [a, b, c] = self.mesh.triangle(f);
                let n = (b - a).cross(&(c - a)).normalize();
                (n, n.dot(&a.coords))
            })
            .collect()
    }

    /// Largest signed distance from `p` to any face plane (negative inside).
    pub fn max_signed_distance(&self, p: &Point) -> f64 {
        self.face_planes()
            .iter()
            .map(|(n, off)| n.dot(&p.coords) - off)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_convex(&self) -> bool {
        let planes = self.face_planes();
        self.mesh.vertices.iter().all(|v| {
            planes
                .iter()
                .all(|(n, off)| n.dot(&v.coords) - off <= CONVEXITY_TOL)
        })
    }

    /// True when every point is strictly inside all face planes.
    pub fn encloses(&self, pc: &PointCloud) -> bool {
        let planes = self.face_planes();
        pc.points().iter().all(|p| {
            planes
                .iter()
                .all(|(n, off)| n.dot(&p.coords) - off < -ENCLOSURE_CLEARANCE)
        })
    }
}

/// Scales a template around the bounding-box center, inflating until it encloses `pc`.
pub fn build_cage(pc: &PointCloud, template: CageTemplate, margin: f64) -> Result<Cage> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::InvalidArgument(format!("cage margin must be positive, got {margin}")));
    }
    let (lo, hi) = pc.bounding_box();
    let center = nalgebra::center(&lo, &hi);
    let half = (hi - lo) / 2.0;
    let half = half.map(|h| h.max(MIN_HALF_EXTENT));
    let unit = template.unit_mesh();
    let mut scale = margin;
    for _ in 0..=MAX_INFLATION_STEPS {
        let mesh = unit.map_vertices(|v| {
            Point::new(
                center.x + scale * half.x * v.x,
                center.y + scale * half.y * v.y,
                center.z + scale * half.z * v.z,
            )
        });
        let cage = Cage::new(mesh, None)?;
        if cage.encloses(pc) {
            return Ok(cage);
        }
        scale *= INFLATION_FACTOR;
    }
    Err(Error::CageConstruction(format!(
        "enclosure not reached after {MAX_INFLATION_STEPS} inflation steps"
    )))
}

fn barycentric(x: &Point, tri: &[Point; 3]) -> [f64; 3] {
    let v0 = tri[1] - tri[0];
    let v1 = tri[2] - tri[0];
    let v2 = x - tri[0];
    let d00 = v0.dot(&v0);
    let d01 = v0.dot(&v1);
    let d11 = v1.dot(&v1);
    let d20 = v2.dot(&v0);
    let d21 = v2.dot(&v1);
    let denom = d00 * d11 - d01 * d01;
    let v = (d11 * d20 - d01 * d21) / denom;
    let w = (d00 * d21 - d01 * d20) / denom;
    [1.0 - v - w, v, w]
}

/// Mean value coordinates of `x` with respect to the cage vertices.
///
/// Queries within [`MVC_SNAP_EPS`] of a vertex return that vertex's indicator
/// row; queries on a face (within the same tolerance of its plane and inside
/// the triangle) return the triangle's barycentric coordinates.
pub fn mean_value_coordinates(x: &Point, cage: &Cage) -> Vec<f64> {
    let verts = cage.vertices();
    let n = verts.len();
    let mut weights = vec![0.0; n];

    let mut dist = Vec::with_capacity(n);
    let mut unit = Vec::with_capacity(n);
    for (j, v) in verts.iter().enumerate() {
        let d = (v - x).norm();
        if d < MVC_SNAP_EPS {
            weights[j] = 1.0;
            return weights;
        }
        dist.push(d);
        unit.push((v - x) / d);
    }

    for (fi, f) in cage.mesh.faces.iter().enumerate() {
        let tri = cage.mesh.triangle(fi);
        let normal = (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).normalize();
        if normal.dot(&(x - tri[0])).abs() < MVC_SNAP_EPS {
            let bc = barycentric(x, &tri);
            if bc.iter().all(|&b| b >= -MVC_SNAP_EPS) {
                for k in 0..3 {
                    weights[f[k] as usize] += bc[k];
                }
                return weights;
            }
        }
    }

    for f in &cage.mesh.faces {
        let ids = [f[0] as usize, f[1] as usize, f[2] as usize];
        let u = [unit[ids[0]], unit[ids[1]], unit[ids[2]]];
        let mut theta = [0.0; 3];
        for k in 0..3 {
            let l = (u[(k + 1) % 3] - u[(k + 2) % 3]).norm();
            theta[k] = 2.0 * (l / 2.0).min(1.0).asin();
        }
        let h = (theta[0] + theta[1] + theta[2]) / 2.0;
        if PI - h < MVC_SNAP_EPS {
            // On the triangle's interior; handled above except for round-off.
            let mut w = [0.0; 3];
            for k in 0..3 {
                w[k] = theta[k].sin() * dist[ids[(k + 2) % 3]] * dist[ids[(k + 1) % 3]];
            }
            let s: f64 = w.iter().sum();
            weights.iter_mut().for_each(|w| *w = 0.0);
            for k in 0..3 {
                weights[ids[k]] = w[k] / s;
            }
            return weights;
        }
        let det = u[0].dot(&u[1].cross(&u[2]));
        let sign = if det < 0.0 { -1.0 } else { 1.0 };
        let mut c = [0.0; 3];
        let mut s = [0.0; 3];
        for k in 0..3 {
            c[k] = 2.0 * h.sin() * (h - theta[k]).sin()
                / (theta[(k + 1) % 3].sin() * theta[(k + 2) % 3].sin())
                - 1.0;
            s[k] = sign * (1.0 - c[k] * c[k]).max(0.0).sqrt();
        }
        if s.iter().any(|v| v.abs() <= MVC_SNAP_EPS) {
            // x lies in the triangle's plane but outside it: no contribution.
            continue;
        }
        for k in 0..3 {
            let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
            weights[ids[k]] += (theta[k] - c[k1] * theta[k2] - c[k2] * theta[k1])
                / (dist[ids[k]] * theta[k1].sin() * s[k2]);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

/// Dense row-major `rows x cols` matrix of mean value coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MvcWeights {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MvcWeights {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn mvc_matrix(points: &[Point], cage: &Cage) -> MvcWeights {
    let cols = cage.vertex_count();
    let rows: Vec<Vec<f64>> = points
        .par_iter()
        .map(|p| mean_value_coordinates(p, cage))
        .collect();
    MvcWeights {
        rows: points.len(),
        cols,
        data: rows.concat(),
    }
}

/// Per-keypoint scalar influence over cage vertices, with its support mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceField {
    pub n_keypoints: usize,
    pub n_cage: usize,
    /// Row-major `n_keypoints x n_cage`.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl InfluenceField {
    pub fn new(n_keypoints: usize, n_cage: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != n_keypoints * n_cage || mask.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "influence field expects {} entries, got values {} / mask {}",
                n_keypoints * n_cage,
                values.len(),
                mask.len()
            )));
        }
        if let Some(k) = (0..values.len()).find(|&k| !mask[k] && values[k] != 0.0) {
            return Err(Error::Invariant(format!(
                "influence entry ({}, {}) is nonzero outside its support mask",
                k / n_cage,
                k % n_cage
            )));
        }
        Ok(Self {
            n_keypoints,
            n_cage,
            values,
            mask,
        })
    }

    pub fn get(&self, keypoint: usize, vertex: usize) -> f64 {
        self.values[keypoint * self.n_cage + vertex]
    }
}

/// Support mask: cage vertex `j` belongs to keypoint `i` iff it lies within
/// `radius` of it. Vertices claimed by no keypoint go to their nearest one.
pub fn influence_mask(cage_vertices: &[Point], keypoints: &[Point], radius: f64) -> Vec<bool> {
    let n_c = cage_vertices.len();
    let mut mask = vec![false; keypoints.len() * n_c];
    let r2 = radius * radius;
    for (j, c) in cage_vertices.iter().enumerate() {
        let mut covered = false;
        let mut nearest = (0usize, f64::INFINITY);
        for (i, k) in keypoints.iter().enumerate() {
            let d = (c - k).norm_squared();
            if d <= r2 {
                mask[i * n_c + j] = true;
                covered = true;
            }
            if d < nearest.1 {
                nearest = (i, d);
            }
        }
        if !covered && !keypoints.is_empty() {
            mask[nearest.0 * n_c + j] = true;
        }
    }
    mask
}

/// Moves each cage vertex by `sum_i I[i][j] * (k_tgt[i] - k_src[i])`.
pub fn deform_cage(
    cage_vertices: &[Point],
    k_src: &[Point],
    k_tgt: &[Point],
    influence: &InfluenceField,
) -> Result<Vec<Point>> {
    if k_src.len() != k_tgt.len()
        || k_src.len() != influence.n_keypoints
        || cage_vertices.len() != influence.n_cage
    {
        return Err(Error::DimensionMismatch(format!(
            "deform_cage: {} source / {} target keypoints, {} cage vertices, influence {}x{}",
            k_src.len(),
            k_tgt.len(),
            cage_vertices.len(),
            influence.n_keypoints,
            influence.n_cage
        )));
    }
    let deltas: Vec<Vector3<f64>> = k_src.iter().zip(k_tgt).map(|(s, t)| t - s).collect();
    Ok(cage_vertices
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let shift = deltas
                .iter()
                .enumerate()
                .fold(Vector3::zeros(), |acc, (i, d)| acc + d * influence.get(i, j));
            c + shift
        })
        .collect())
}

/// Interpolates deformed cage vertices onto the points encoded by `weights`.
pub fn apply_cage(weights: &MvcWeights, deformed_vertices: &[Point]) -> Result<Vec<Point>> {
    if weights.cols != deformed_vertices.len() {
        return Err(Error::DimensionMismatch(format!(
            "apply_cage: weights have {} columns but the cage has {} vertices",
            weights.cols,
            deformed_vertices.len()
        )));
    }
    Ok((0..weights.rows)
        .map(|i| {
            let p = weights
                .row(i)
                .iter()
                .zip(deformed_vertices)
                .fold(Vector3::zeros(), |acc, (w, c)| acc + c.coords * *w);
            Point::from(p)
        })
        .collect())
}

/// Deforms a mesh through the cage; `weights` must hold one row per mesh vertex.
pub fn apply_cage_mesh(mesh: &TriMesh, weights: &MvcWeights, deformed_vertices: &[Point]) -> Result<TriMesh> {
    if weights.rows != mesh.vertices.len() {
        return Err(Error::DimensionMismatch(format!(
            "apply_cage_mesh: {} weight rows for {} mesh vertices",
            weights.rows,
            mesh.vertices.len()
        )));
    }
    Ok(TriMesh {
        vertices: apply_cage(weights, deformed_vertices)?,
        faces: mesh.faces.clone(),
    })
}

/// Faces whose orientation flipped between the rest cage and a deformed one.
///
/// Deformed cages are not validated; this is a cheap indicator of fold-overs.
pub fn inverted_faces(cage: &Cage, deformed_vertices: &[Point]) -> Vec<usize> {
    cage.mesh
        .faces
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            let n = |v: &[Point]| {
                let [a, b, c] = [v[f[0] as usize], v[f[1] as usize], v[f[2] as usize]];
                (b - a).cross(&(c - a))
            };
            n(cage.vertices()).dot(&n(deformed_vertices)) <= 0.0
        })
        .map(|(i, _)| i)
        .collect()
}
