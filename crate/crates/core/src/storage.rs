//! Bit-exact persistence: `KPRD` tensor blobs, network checkpoints, and
//! token database directories.
//!
//! Blob layout (little-endian): magic `KPRD`, `u16` version (1), `u16` dtype
//! (0 = f32, 1 = f64, 2 = u32), `u16` rank, `u16` reserved (0), `rank` x `u32`
//! dims, then the row-major payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cage::{mvc_matrix, Cage, MvcWeights};
use crate::deform::{fps_targets, SourceGeometry};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, TriMesh};
use crate::nets::{points_tensor, tensor_points, ArchConfig, Keypoints, NetBundle};
use crate::retrieval::{ShapeRecord, TokenDatabase};

pub const BLOB_MAGIC: &[u8; 4] = b"KPRD";
pub const BLOB_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl BlobData {
    fn dtype(&self) -> u16 {
        match self {
            BlobData::F32(_) => 0,
            BlobData::F64(_) => 1,
            BlobData::U32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
            BlobData::U32(v) => v.len(),
        }
    }
}

/// A shaped array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dims: Vec<u32>,
    pub data: BlobData,
}

impl TensorBlob {
    pub fn new(dims: Vec<u32>, data: BlobData) -> Result<Self> {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        if n != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "blob dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            data: BlobData::F64(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.data {
            BlobData::F64(v) => Tensor::new(self.dims.iter().map(|&d| d as usize).collect(), v.clone()),
            BlobData::F32(v) => Tensor::new(
                self.dims.iter().map(|&d| d as usize).collect(),
                v.iter().map(|&x| x as f64).collect(),
            ),
            BlobData::U32(_) => Err(Error::InvalidArgument("u32 blob is not a float tensor".into())),
        }
    }

    fn points(points: &[Point]) -> Self {
        Self::from_tensor(&points_tensor(points))
    }

    fn to_points(&self, path: &Path) -> Result<Vec<Point>> {
        if self.dims.len() != 2 || self.dims[1] != 3 {
            return Err(Error::Blob { path: path.to_path_buf(), field: "dims" });
        }
        Ok(tensor_points(&self.to_tensor()?))
    }

    fn faces(faces: &[[u32; 3]]) -> Self {
        Self {
            dims: vec![faces.len() as u32, 3],
            data: BlobData::U32(faces.iter().flatten().copied().collect()),
        }
    }

    fn to_faces(&self, path: &Path) -> Result<Vec<[u32; 3]>> {
        match &self.data {
            BlobData::U32(v) if self.dims.len() == 2 && self.dims[1] == 3 => {
                Ok(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
            }
            _ => Err(Error::Blob { path: path.to_path_buf(), field: "dtype" }),
        }
    }
}

pub fn encode_blob(blob: &TensorBlob) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * blob.dims.len() + 8 * blob.data.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&blob.data.dtype().to_le_bytes());
    out.extend_from_slice(&(blob.dims.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in &blob.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &blob.data {
        BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        BlobData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<TensorBlob> {
    let bad = |field: &'static str| Error::Blob { path: path.to_path_buf(), field };
    let u16_at = |o: usize| -> Option<u16> { bytes.get(o..o + 2).map(|b| u16::from_le_bytes([b[0], b[1]])) };
    if bytes.get(..4) != Some(BLOB_MAGIC.as_slice()) {
        return Err(bad("magic"));
    }
    if u16_at(4).ok_or_else(|| bad("version"))? != BLOB_VERSION {
        return Err(bad("version"));
    }
    let dtype = u16_at(6).ok_or_else(|| bad("dtype"))?;
    let rank = u16_at(8).ok_or_else(|| bad("rank"))? as usize;
    if u16_at(10).ok_or_else(|| bad("reserved"))? != 0 {
        return Err(bad("reserved"));
    }
    let header = 12 + 4 * rank;
    let dim_bytes = bytes.get(12..header).ok_or_else(|| bad("dims"))?;
    let dims: Vec<u32> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| bad("dims"))?;
    let size = match dtype {
        0 | 2 => 4,
        1 => 8,
        _ => return Err(bad("dtype")),
    };
    let payload = &bytes[header.min(bytes.len())..];
    if Some(payload.len()) != n.checked_mul(size) {
        return Err(bad("payload"));
    }
    let data = match dtype {
        0 => BlobData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        1 => BlobData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        _ => BlobData::U32(payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Ok(TensorBlob { dims, data })
}

pub fn write_blob(blob: &TensorBlob, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_blob(blob)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<TensorBlob> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(&bytes, path)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const ARCH_FILE: &str = "arch.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub value: PathBuf,
    pub adam_m: PathBuf,
    pub adam_v: PathBuf,
    pub adam_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u16,
    pub fingerprint: String,
    pub params: Vec<CheckpointParam>,
}

/// Writes one blob per parameter (plus Adam moments), `checkpoint.json`, and `arch.json`.
pub fn save_checkpoint(bundle: &NetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(bundle.store.len());
    for p in bundle.store.params() {
        let value = PathBuf::from("params").join(format!("{}.kprd", p.name));
        let adam_m = PathBuf::from("optim").join(format!("{}.m.kprd", p.name));
        let adam_v = PathBuf::from("optim").join(format!("{}.v.kprd", p.name));
        write_blob(&TensorBlob::from_tensor(&p.value), &dir.join(&value))?;
        write_blob(&TensorBlob::from_tensor(&p.m), &dir.join(&adam_m))?;
        write_blob(&TensorBlob::from_tensor(&p.v), &dir.join(&adam_v))?;
        params.push(CheckpointParam {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            value,
            adam_m,
            adam_v,
            adam_steps: p.steps,
        });
    }
    write_json(
        &CheckpointManifest {
            version: BLOB_VERSION,
            fingerprint: bundle.fingerprint(),
            params,
        },
        &dir.join(CHECKPOINT_MANIFEST),
    )?;
    write_json(&bundle.arch, &dir.join(ARCH_FILE))
}

pub fn load_arch(dir: &Path) -> Result<ArchConfig> {
    read_json(&dir.join(ARCH_FILE))
}

/// Rebuilds a bundle from `arch.json` and restores every parameter; missing,
/// extra or reshaped parameters are rejected.
pub fn load_checkpoint(dir: &Path) -> Result<NetBundle> {
    let arch = load_arch(dir)?;
    let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    let mut bundle = NetBundle::new(arch)?;
    if manifest.params.len() != bundle.store.len() {
        return Err(Error::ArchMismatch(format!(
            "checkpoint has {} parameters, architecture expects {}",
            manifest.params.len(),
            bundle.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = bundle
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::ArchMismatch(format!("unexpected parameter `{}`", entry.name)))?;
        let load = |rel: &Path| -> Result<Tensor> {
            let path = dir.join(rel);
            let t = read_blob(&path)?.to_tensor()?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Blob { path, field: "dims" });
            }
            Ok(t)
        };
        let expected = bundle.store.value(id).shape().to_vec();
        if expected != entry.shape {
            return Err(Error::ArchMismatch(format!(
                "parameter `{}` has shape {:?}, architecture expects {expected:?}",
                entry.name, entry.shape
            )));
        }
        let p = bundle.store.param_mut(id);
        p.value = load(&entry.value)?;
        p.m = load(&entry.adam_m)?;
        p.v = load(&entry.adam_v)?;
        p.steps = entry.adam_steps;
    }
    let fp = bundle.fingerprint();
    if fp != manifest.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: manifest.fingerprint,
            found: fp,
        });
    }
    Ok(bundle)
}

pub const DATABASE_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordFiles {
    pub points: PathBuf,
    pub keypoints: PathBuf,
    pub cage_v: PathBuf,
    pub cage_f: PathBuf,
    pub mvc: PathBuf,
    pub tokens: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_v: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_f: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseRecordEntry {
    pub id: String,
    pub files: RecordFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkippedEntry {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseManifest {
    pub version: u16,
    pub fingerprint: String,
    pub n_keypoints: usize,
    pub token_rows: usize,
    pub token_dim: usize,
    pub ids: Vec<String>,
    pub records: Vec<DatabaseRecordEntry>,
    pub skipped: Vec<SkippedEntry>,
}

pub fn save_database(db: &TokenDatabase, dir: &Path) -> Result<()> {
    db.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(db.len());
    for r in &db.records {
        let base = PathBuf::from("records").join(&r.id);
        let f = |name: &str| base.join(format!("{name}.kprd"));
        let files = RecordFiles {
            points: f("points"),
            keypoints: f("keypoints"),
            cage_v: f("cage_v"),
            cage_f: f("cage_f"),
            mvc: f("mvc"),
            tokens: f("tokens"),
            mesh_v: r.source.mesh.as_ref().map(|_| f("mesh_v")),
            mesh_f: r.source.mesh.as_ref().map(|_| f("mesh_f")),
        };
        let src = &r.source;
        write_blob(&TensorBlob::points(src.points.points()), &dir.join(&files.points))?;
        write_blob(&TensorBlob::points(r.keypoints.points()), &dir.join(&files.keypoints))?;
        write_blob(&TensorBlob::points(src.cage.vertices()), &dir.join(&files.cage_v))?;
        write_blob(&TensorBlob::faces(&src.cage.mesh.faces), &dir.join(&files.cage_f))?;
        write_blob(
            &TensorBlob::new(vec![src.mvc.rows as u32, src.mvc.cols as u32], BlobData::F64(src.mvc.data.clone()))?,
            &dir.join(&files.mvc),
        )?;
        write_blob(&TensorBlob::from_tensor(&r.tokens), &dir.join(&files.tokens))?;
        if let (Some(mesh), Some(v), Some(fc)) = (&src.mesh, &files.mesh_v, &files.mesh_f) {
            write_blob(&TensorBlob::points(&mesh.vertices), &dir.join(v))?;
            write_blob(&TensorBlob::faces(&mesh.faces), &dir.join(fc))?;
        }
        records.push(DatabaseRecordEntry { id: r.id.clone(), files });
    }
    write_json(
        &DatabaseManifest {
            version: BLOB_VERSION,
            fingerprint: db.fingerprint.clone(),
            n_keypoints: db.n_keypoints,
            token_rows: db.token_rows,
            token_dim: db.token_dim,
            ids: db.records.iter().map(|r| r.id.clone()).collect(),
            records,
            skipped: db
                .skipped
                .iter()
                .map(|(id, reason)| SkippedEntry { id: id.clone(), reason: reason.clone() })
                .collect(),
        },
        &dir.join(DATABASE_MANIFEST),
    )
}

pub fn read_database_manifest(dir: &Path) -> Result<DatabaseManifest> {
    read_json(&dir.join(DATABASE_MANIFEST))
}

/// Loads a database directory. With `expected_fingerprint` set, a database
/// produced by a different bundle is rejected.
pub fn load_database(dir: &Path, expected_fingerprint: Option<&str>) -> Result<TokenDatabase> {
    let m = read_database_manifest(dir)?;
    if m.version != BLOB_VERSION {
        return Err(Error::Invariant(format!("unsupported database version {}", m.version)));
    }
    if let Some(fp) = expected_fingerprint {
        if fp != m.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: m.fingerprint,
                found: fp.to_string(),
            });
        }
    }
    let ids: Vec<&String> = m.records.iter().map(|r| &r.id).collect();
    if ids != m.ids.iter().collect::<Vec<_>>() {
        return Err(Error::Invariant("manifest id list disagrees with its records".into()));
    }
    let mut records = Vec::with_capacity(m.records.len());
    for entry in &m.records {
        let f = &entry.files;
        let path = |rel: &Path| dir.join(rel);
        let points = PointCloud::new(read_blob(&path(&f.points))?.to_points(&path(&f.points))?)?;
        let keypoints = Keypoints(read_blob(&path(&f.keypoints))?.to_points(&path(&f.keypoints))?);
        let cage_mesh = TriMesh {
            vertices: read_blob(&path(&f.cage_v))?.to_points(&path(&f.cage_v))?,
            faces: read_blob(&path(&f.cage_f))?.to_faces(&path(&f.cage_f))?,
        };
        let cage = Cage::new(cage_mesh, None)?;
        let mvc_blob = read_blob(&path(&f.mvc))?;
        let mvc = match (&mvc_blob.dims[..], mvc_blob.data) {
            ([r, c], BlobData::F64(data)) if *r as usize == points.len() && *c as usize == cage.vertex_count() => {
                MvcWeights { rows: *r as usize, cols: *c as usize, data }
            }
            _ => return Err(Error::Blob { path: path(&f.mvc), field: "dims" }),
        };
        let tokens = read_blob(&path(&f.tokens))?.to_tensor()?;
        let mesh = match (&f.mesh_v, &f.mesh_f) {
            (Some(v), Some(fc)) => Some(TriMesh {
                vertices: read_blob(&path(v))?.to_points(&path(v))?,
                faces: read_blob(&path(fc))?.to_faces(&path(fc))?,
            }),
            _ => None,
        };
        let mesh_mvc = mesh.as_ref().map(|m| mvc_matrix(&m.vertices, &cage));
        let fps = fps_targets(&points, m.n_keypoints)?;
        records.push(ShapeRecord {
            id: entry.id.clone(),
            source: SourceGeometry {
                points,
                cage,
                mvc,
                fps,
                mesh,
                mesh_mvc,
            },
            keypoints,
            tokens,
        });
    }
    TokenDatabase::new(
        records,
        m.fingerprint,
        m.n_keypoints,
        m.token_rows,
        m.token_dim,
        m.skipped.into_iter().map(|s| (s.id, s.reason)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{build_database, verify_database, DatabaseInput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_arithmetic() {
        let b = TensorBlob::new(vec![2, 3], BlobData::F32(vec![0.5; 6])).unwrap();
        let bytes = encode_blob(&b);
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(&bytes[..4], b"KPRD");
        assert_eq!(decode_blob(&bytes, Path::new("m")).unwrap(), b);
    }

    #[test]
    fn f64_blob_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = TensorBlob::new(vec![4, 5], BlobData::F64((0..20).map(|_| rng.random::<f64>() - 0.5).collect())).unwrap();
        let bytes = encode_blob(&b);
        assert_eq!(decode_blob(&bytes, Path::new("m")).unwrap(), b);
        let field = |bytes: &[u8]| match decode_blob(bytes, Path::new("m")) {
            Err(Error::Blob { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(field(&bad), "magic");
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(field(&bad), "version");
        assert_eq!(field(&bytes[..bytes.len() - 1]), "payload");
        assert_eq!(field(&bytes[..13]), "dims");
    }

    fn cloud(seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..64).map(|_| Point::new(rng.random(), rng.random::<f64>() * 0.5, rng.random())).collect()).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut b = NetBundle::new(ArchConfig::toy()).unwrap();
        let id = b.store.expect_id("kp.queries").unwrap();
        b.store.param_mut(id).steps = 7;
        b.store.param_mut(id).m.data_mut()[0] = 0.125;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&b, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, b);

        let mut arch = ArchConfig::toy();
        arch.token_dim += 1;
        write_json(&arch, &dir.path().join(ARCH_FILE)).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn database_round_trip_is_byte_identical() {
        let b = NetBundle::new(ArchConfig::toy()).unwrap();
        let inputs: Vec<DatabaseInput> = (0..3)
            .map(|i| DatabaseInput {
                id: format!("s{i}"),
                points: cloud(i),
                mesh: (i == 0).then(|| crate::cage::CageTemplate::Icosphere0.unit_mesh()),
            })
            .collect();
        let db = build_database(&inputs, &b).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_database(&db, d1.path()).unwrap();
        let loaded = load_database(d1.path(), Some(&b.fingerprint())).unwrap();
        assert_eq!(loaded, db);
        save_database(&loaded, d2.path()).unwrap();
        for entry in walk(d1.path()) {
            let rel = entry.strip_prefix(d1.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(d2.path().join(rel)).unwrap(), "{rel:?}");
        }
        assert!(matches!(load_database(d1.path(), Some("nope")), Err(Error::FingerprintMismatch { .. })));

        // Tampering with a token blob is caught by regeneration.
        let tok = d1.path().join("records/s1/tokens.kprd");
        let mut blob = read_blob(&tok).unwrap();
        if let BlobData::F64(v) = &mut blob.data {
            v[0] += 1e-9;
        }
        write_blob(&blob, &tok).unwrap();
        let tampered = load_database(d1.path(), None).unwrap();
        assert_eq!(verify_database(&tampered, &b).unwrap(), vec!["s1".to_string()]);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn empty_database_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_json(
            &DatabaseManifest {
                version: 1,
                fingerprint: "x".into(),
                n_keypoints: 3,
                token_rows: 3,
                token_dim: 2,
                ids: vec![],
                records: vec![],
                skipped: vec![],
            },
            &dir.path().join(DATABASE_MANIFEST),
        )
        .unwrap();
        assert!(load_database(dir.path(), None).is_err());
    }
}
