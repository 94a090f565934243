//! Latin-hypercube dataset generation, database/train/test splits, and the
//! on-disk dataset layout.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{encode_ply_binary, format_obj, load_obj, load_ply};
use super::shapes::{generate_shape, Family, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_cube, sample_mesh_surface, PointCloud, TriMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Database,
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Database => "database",
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub database: usize,
    pub train: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            database: 50,
            train: 200,
            test: 50,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.database + self.train + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub database: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Database => &self.database,
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Pairwise disjoint and non-empty.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in [Split::Database, Split::Train, Split::Test] {
            if self.ids(s).is_empty() {
                return Err(Error::Invariant(format!("{} split is empty", s.name())));
            }
            for id in self.ids(s) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Invariant(format!("id `{id}` appears in more than one split")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub id: String,
    pub spec: ShapeSpec,
}

/// Generated shape specs with their split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub family: Family,
    pub seed: u64,
    pub shapes: Vec<ShapeEntry>,
    pub split: DatasetSplit,
}

/// `n` Latin-hypercube samples of the family's parameter box: each parameter
/// range is cut into `n` strata, each stratum used exactly once.
pub fn latin_hypercube(family: Family, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let ranges = family.ranges();
    let mut samples = vec![Vec::with_capacity(ranges.len()); n];
    for r in ranges {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (s, &k) in samples.iter_mut().zip(&strata) {
            let u = (k as f64 + rng.random::<f64>()) / n as f64;
            let v = if r.integer {
                (r.lo + u * (r.hi - r.lo + 1.0)).floor().min(r.hi)
            } else {
                r.lo + u * (r.hi - r.lo)
            };
            s.push(v);
        }
    }
    samples
}

pub fn generate_dataset(family: Family, counts: SplitCounts, seed: u64) -> Result<Dataset> {
    if counts.database == 0 || counts.train == 0 || counts.test == 0 {
        return Err(Error::InvalidArgument("every split needs at least one shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = latin_hypercube(family, counts.total(), &mut rng);
    let shapes: Vec<ShapeEntry> = params
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(ShapeEntry {
                id: format!("{}_{i:04}", family.name()),
                spec: ShapeSpec::new(family, p, rng.random())?,
            })
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.shuffle(&mut rng);
    let pick = |range: std::ops::Range<usize>| {
        let mut ids: Vec<String> = order[range].iter().map(|&i| shapes[i].id.clone()).collect();
        ids.sort();
        ids
    };
    let (a, b) = (counts.database, counts.database + counts.train);
    let split = DatasetSplit {
        database: pick(0..a),
        train: pick(a..b),
        test: pick(b..counts.total()),
    };
    split.validate()?;
    Ok(Dataset {
        family,
        seed,
        shapes,
        split,
    })
}

/// A generated shape: its mesh and sampled points, both normalized to the unit cube.
#[derive(Debug, Clone)]
pub struct Materialized {
    pub id: String,
    pub mesh: TriMesh,
    pub points: PointCloud,
}

/// Meshes the spec, samples `n_points` surface points, and normalizes both
/// with the transform of the points.
pub fn materialize(entry: &ShapeEntry, n_points: usize) -> Result<Materialized> {
    let mesh = generate_shape(&entry.spec)?;
    let raw = sample_mesh_surface(&mesh, n_points, entry.spec.seed)?;
    let (points, tf) = normalize_unit_cube(&raw)?;
    Ok(Materialized {
        id: entry.id.clone(),
        mesh: mesh.map_vertices(|v| tf.apply(v)),
        points,
    })
}

/// One row of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestShape {
    pub id: String,
    pub split: Split,
    pub spec: ShapeSpec,
    /// Relative to the dataset directory.
    pub mesh: PathBuf,
    pub points: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub family: Family,
    pub seed: u64,
    pub n_points: usize,
    pub counts: SplitCounts,
    pub shapes: Vec<ManifestShape>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

/// Writes meshes (`meshes/<id>.obj`), points (`points/<id>.ply`, binary) and the manifest.
pub fn write_dataset(dataset: &Dataset, n_points: usize, dir: &Path) -> Result<DatasetManifest> {
    for sub in ["meshes", "points"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let split_of = |id: &str| {
        [Split::Database, Split::Train, Split::Test]
            .into_iter()
            .find(|s| dataset.split.ids(*s).iter().any(|x| x == id))
            .expect("every shape is in a split")
    };
    let rows: Vec<ManifestShape> = dataset
        .shapes
        .par_iter()
        .map(|e| {
            let m = materialize(e, n_points)?;
            let mesh_rel = PathBuf::from("meshes").join(format!("{}.obj", e.id));
            let pts_rel = PathBuf::from("points").join(format!("{}.ply", e.id));
            let mp = dir.join(&mesh_rel);
            fs::write(&mp, format_obj(&m.mesh)).map_err(|err| Error::io(&mp, err))?;
            let pp = dir.join(&pts_rel);
            fs::write(&pp, encode_ply_binary(m.points.points(), &[])).map_err(|err| Error::io(&pp, err))?;
            Ok(ManifestShape {
                id: e.id.clone(),
                split: split_of(&e.id),
                spec: e.spec.clone(),
                mesh: mesh_rel,
                points: pts_rel,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        family: dataset.family,
        seed: dataset.seed,
        n_points,
        counts: SplitCounts {
            database: dataset.split.database.len(),
            train: dataset.split.train.len(),
            test: dataset.split.test.len(),
        },
        shapes: rows,
    };
    let path = dir.join(DATASET_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// A shape loaded back from a dataset directory.
#[derive(Debug, Clone)]
pub struct LoadedShape {
    pub id: String,
    pub points: PointCloud,
    pub mesh: TriMesh,
}

/// Loads every shape of one split, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<LoadedShape>> {
    let manifest = read_manifest(dir)?;
    manifest
        .shapes
        .par_iter()
        .filter(|s| s.split == split)
        .map(|s| {
            Ok(LoadedShape {
                id: s.id.clone(),
                points: load_ply(&dir.join(&s.points))?.into_cloud()?,
                mesh: load_obj(&dir.join(&s.mesh))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_disjointness() {
        let counts = SplitCounts { database: 5, train: 8, test: 3 };
        let d = generate_dataset(Family::Chair, counts, 9).unwrap();
        assert_eq!(d.split.database.len(), 5);
        assert_eq!(d.split.train.len(), 8);
        assert_eq!(d.split.test.len(), 3);
        d.split.validate().unwrap();
        assert_eq!(generate_dataset(Family::Chair, counts, 9).unwrap(), d);
    }

    #[test]
    fn latin_hypercube_hits_every_stratum() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = latin_hypercube(Family::Table, n, &mut rng);
        for (k, r) in Family::Table.ranges().iter().enumerate() {
            let mut hit = vec![false; n];
            for row in &s {
                let u = (row[k] - r.lo) / (r.hi - r.lo);
                hit[((u * n as f64) as usize).min(n - 1)] = true;
            }
            assert!(hit.iter().all(|&h| h), "{}", r.name);
        }
    }

    #[test]
    fn different_seeds_give_different_parameters() {
        // A collision needs one 53-bit uniform draw to repeat exactly within the
        // same stratum: at most n^2 * 2^-52 for n samples, far below 1e-6.
        let n = 300.0f64;
        assert!(n * n * 2f64.powi(-52) < 1e-6);
        let counts = SplitCounts::default();
        let a = generate_dataset(Family::Table, counts, 1).unwrap();
        let b = generate_dataset(Family::Table, counts, 2).unwrap();
        let pa: HashSet<Vec<u64>> = a.shapes.iter().map(|s| s.spec.params.iter().map(|v| v.to_bits()).collect()).collect();
        assert!(b
            .shapes
            .iter()
            .all(|s| !pa.contains(&s.spec.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
    }

    #[test]
    fn materialized_shapes_are_normalized_and_round_trip() {
        let counts = SplitCounts { database: 1, train: 1, test: 1 };
        let d = generate_dataset(Family::Cabinet, counts, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&d, 128, dir.path()).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
        let shapes = load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(shapes.len(), 1);
        let fresh = materialize(d.shapes.iter().find(|s| s.id == shapes[0].id).unwrap(), 128).unwrap();
        assert_eq!(shapes[0].points, fresh.points);
        assert!(shapes[0].mesh.is_watertight());
        let (lo, hi) = shapes[0].points.bounding_box();
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        assert!((extent - 1.0).abs() < 1e-12);
    }
}
