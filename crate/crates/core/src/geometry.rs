//! Point-cloud and triangle-mesh primitives.
//!
//! Everything here works in 64-bit floats on unit-cube normalized
//! coordinates. Distances used by the Chamfer family are squared Euclidean
//! and mean-reduced per direction.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Point = Point3<f64>;
pub type Vector = Vector3<f64>;

/// An ordered set of 3D positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Point::new(p[0], p[1], p[2])).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounding_box(&self) -> (Point, Point) {
        bounding_box(&self.points)
    }

    /// Points at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> Point {
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point::from(sum / self.points.len() as f64)
    }

    /// Flattened row-major `N x 3` coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "flat coordinate buffer of length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(
            flat.chunks_exact(3)
                .map(|c| Point::new(c[0], c[1], c[2]))
                .collect(),
        )
    }
}

pub(crate) fn bounding_box(points: &[Point]) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Triangle mesh with indexed faces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    /// Builds a mesh after checking face indices and triangle areas.
    pub fn new(vertices: Vec<Point>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(Error::DegenerateMesh(format!(
                    "face {fi} references a vertex index >= {n}"
                )));
            }
            if self.triangle_area(fi) <= 1e-12 {
                return Err(Error::DegenerateMesh(format!("face {fi} has zero area")));
            }
        }
        if let Some(i) = self
            .vertices
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(i));
        }
        Ok(())
    }

    pub fn triangle(&self, face: usize) -> [Point; 3] {
        let f = self.faces[face];
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }

    pub fn triangle_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }

    /// True when every undirected edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        use std::collections::HashMap;
        if self.faces.is_empty() {
            return false;
        }
        let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        edges.values().all(|&c| c == 2)
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(&Point) -> Point) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

/// Record of the affine map applied by [`normalize_unit_cube`].
///
/// `normalized = (p - center) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnitCubeTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl UnitCubeTransform {
    pub fn apply(&self, p: &Point) -> Point {
        Point::new(
            (p.x - self.center[0]) * self.scale,
            (p.y - self.center[1]) * self.scale,
            (p.z - self.center[2]) * self.scale,
        )
    }

    pub fn invert(&self, p: &Point) -> Point {
        Point::new(
            p.x / self.scale + self.center[0],
            p.y / self.scale + self.center[1],
            p.z / self.scale + self.center[2],
        )
    }

    pub fn apply_cloud(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            points: pc.points.iter().map(|p| self.apply(p)).collect(),
        }
    }

    pub fn invert_cloud(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            points: pc.points.iter().map(|p| self.invert(p)).collect(),
        }
    }
}

/// Centers the bounding box at the origin and scales the longest extent to 1.
pub fn normalize_unit_cube(pc: &PointCloud) -> Result<(PointCloud, UnitCubeTransform)> {
    let (lo, hi) = pc.bounding_box();
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(Error::ZeroExtent);
    }
    let center = nalgebra::center(&lo, &hi);
    let transform = UnitCubeTransform {
        center: [center.x, center.y, center.z],
        scale: 1.0 / extent,
    };
    Ok((transform.apply_cloud(pc), transform))
}

/// Draws `n` points uniformly over the surface (area weighted).
pub fn sample_mesh_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.triangle_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateMesh("zero total surface area".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.random::<f64>() * total;
        let face = cumulative
            .partition_point(|&c| c <= target)
            .min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.triangle(face);
        let r1 = rng.random::<f64>().sqrt();
        let r2 = rng.random::<f64>();
        let p = a.coords * (1.0 - r1) + b.coords * (r1 * (1.0 - r2)) + c.coords * (r1 * r2);
        points.push(Point::from(p));
    }
    PointCloud::new(points)
}

/// Choice of the first farthest-point-sampling index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FpsStart {
    /// Lexicographically smallest point (x, then y, then z; lowest index on ties).
    #[default]
    Lexicographic,
    /// Uniformly random start drawn from the seed.
    Random(u64),
}

pub fn farthest_point_sampling(pc: &PointCloud, k: usize, start: FpsStart) -> Result<Vec<usize>> {
    let pts = pc.points();
    if k > pts.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {k} points from a cloud of {}",
            pts.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let first = match start {
        FpsStart::Lexicographic => {
            let mut best = 0;
            for (i, p) in pts.iter().enumerate().skip(1) {
                let q = &pts[best];
                let less = (p.x, p.y, p.z)
                    .partial_cmp(&(q.x, q.y, q.z))
                    .is_some_and(|o| o.is_lt());
                if less {
                    best = i;
                }
            }
            best
        }
        FpsStart::Random(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..pts.len()),
    };
    let mut picked = Vec::with_capacity(k);
    picked.push(first);
    let mut min_d: Vec<f64> = pts
        .iter()
        .map(|p| (p - pts[first]).norm_squared())
        .collect();
    while picked.len() < k {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        picked.push(best);
        let c = pts[best];
        for (d, p) in min_d.iter_mut().zip(pts) {
            *d = d.min((p - c).norm_squared());
        }
    }
    Ok(picked)
}

/// Index of the nearest point in `to` for every point in `from`, and its squared distance.
pub fn nearest_neighbors(from: &[Point], to: &[Point]) -> Vec<(usize, f64)> {
    let nn = |a: &Point| {
        let mut best = (0usize, f64::INFINITY);
        for (j, b) in to.iter().enumerate() {
            let d = (a - b).norm_squared();
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    };
    if from.len() * to.len() > 1 << 16 {
        from.par_iter().map(nn).collect()
    } else {
        from.iter().map(nn).collect()
    }
}

/// Mean over `from` of the squared distance to the nearest point of `to`.
pub fn unilateral_chamfer(from: &PointCloud, to: &PointCloud) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sum: f64 = nearest_neighbors(from.points(), to.points())
        .iter()
        .map(|&(_, d)| d)
        .sum();
    Ok(sum / from.len() as f64)
}

/// Symmetric Chamfer distance: the sum of both unilateral directions.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(unilateral_chamfer(a, b)? + unilateral_chamfer(b, a)?)
}

/// Result of [`random_slice`].
#[derive(Debug, Clone)]
pub struct Slice {
    pub cloud: PointCloud,
    /// Indices into the input cloud of the kept points, ascending.
    pub kept: Vec<usize>,
    pub normal: Vector3<f64>,
}

/// Removes the `ceil(gamma * N)` points lying farthest along a random direction.
pub fn random_slice(pc: &PointCloud, gamma: f64, seed: u64) -> Result<Slice> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "occlusion ratio {gamma} outside [0, 1)"
        )));
    }
    let n = pc.len();
    let remove = (gamma * n as f64).ceil() as usize;
    if remove >= n {
        return Err(Error::InvalidArgument(format!(
            "slicing {remove} of {n} points leaves nothing"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let rho = (1.0 - z * z).max(0.0).sqrt();
    let normal = Vector3::new(rho * phi.cos(), rho * phi.sin(), z);

    let proj: Vec<f64> = pc.points().iter().map(|p| p.coords.dot(&normal)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(a.cmp(&b)));
    let mut keep_mask = vec![true; n];
    for &i in &order[..remove] {
        keep_mask[i] = false;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| keep_mask[i]).collect();
    Ok(Slice {
        cloud: pc.select(&kept)?,
        kept,
        normal,
    })
}

/// Points within a ball around one center.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub indices: Vec<usize>,
    pub density: f64,
}

impl Region {
    pub fn count(&self) -> usize {
        self.indices.len()
    }
}

/// Ball-region membership for a set of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAssignment {
    pub regions: Vec<Region>,
    pub radius: f64,
}

impl RegionAssignment {
    pub fn densities(&self) -> Vec<f64> {
        self.regions.iter().map(|r| r.density).collect()
    }
}

/// Collects, per center, the indices of points within `radius` (inclusive).
pub fn region_query(
    pc: &PointCloud,
    centers: &[Point],
    radius: f64,
    n_ref: f64,
) -> Result<RegionAssignment> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "region radius must be positive, got {radius}"
        )));
    }
    let r2 = radius * radius;
    let regions = centers
        .iter()
        .map(|c| {
            let indices: Vec<usize> = pc
                .points()
                .iter()
                .enumerate()
                .filter(|(_, p)| (*p - c).norm_squared() <= r2)
                .map(|(i, _)| i)
                .collect();
            let density = region_density(indices.len(), n_ref);
            Region { indices, density }
        })
        .collect();
    Ok(RegionAssignment { regions, radius })
}

/// Clipped normalized point count `min(count / n_ref, 1)`.
pub fn region_density(count: usize, n_ref: f64) -> f64 {
    debug_assert!(n_ref > 0.0);
    (count as f64 / n_ref).min(1.0)
}
