use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use kpred_core::data::io::format_obj;
use kpred_core::data::{self, load_split, read_manifest, Split, SplitCounts};
use kpred_core::deform::{self, deform_forward, TargetShape};
use kpred_core::geometry::{normalize_unit_cube, random_slice, sample_mesh_surface};
use kpred_core::retrieval::{self, build_database, evaluate_target, evaluate_topk, verify_database, DatabaseInput};
use kpred_core::storage::{load_checkpoint, load_database, save_checkpoint, save_database, CHECKPOINT_MANIFEST};
use kpred_core::{
    Error, EvalOptions, EvalReport, Family, LossHistory, NetBundle, PointCloud, SourceGeometry, TriMesh,
};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{write_lock, RunConfig};
use crate::UsageError;

const CHECKPOINT_DIR: &str = "checkpoint";

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "database" => Ok(Split::Database),
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(UsageError(format!("unknown split `{s}` (expected database, train or test)")).into()),
    }
}

#[derive(Serialize)]
struct GenDataLock<'a> {
    command: &'static str,
    family: Family,
    counts: SplitCounts,
    seed: u64,
    points: usize,
    out: &'a Path,
}

pub fn gen_data(
    family: Family,
    db: usize,
    train: usize,
    test: usize,
    seed: u64,
    points: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let counts = SplitCounts {
        database: db,
        train,
        test,
    };
    if db == 0 || train == 0 || test == 0 || points == 0 {
        bail!(UsageError("split counts and --points must be positive".into()));
    }
    let dataset = data::generate_dataset(family, counts, seed)?;
    let manifest = data::write_dataset(&dataset, points, out)?;
    write_lock(
        out,
        &GenDataLock {
            command: "gen-data",
            family,
            counts,
            seed,
            points,
            out,
        },
    )?;
    info!("wrote {} shapes to {}", manifest.shapes.len(), out.display());
    Ok(())
}

/// Cage and MVC precomputation for every shape of a split; shapes whose cage
/// cannot be built are skipped with a warning.
fn load_sources(dir: &Path, split: Split, bundle: &NetBundle) -> anyhow::Result<Vec<SourceGeometry>> {
    check_point_count(dir, bundle)?;
    let shapes = load_split(dir, split).with_context(|| format!("loading {} split", split.name()))?;
    let built: Vec<Option<SourceGeometry>> = shapes
        .into_par_iter()
        .map(|s| match SourceGeometry::new(s.points, Some(s.mesh), bundle) {
            Ok(src) => Ok(Some(src)),
            Err(Error::CageConstruction(msg)) => {
                warn!("skipping {}: {msg}", s.id);
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect::<kpred_core::Result<_>>()?;
    Ok(built.into_iter().flatten().collect())
}

fn check_point_count(dir: &Path, bundle: &NetBundle) -> anyhow::Result<()> {
    let manifest = read_manifest(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if manifest.n_points != bundle.arch.n_points {
        bail!(UsageError(format!(
            "dataset has {} points per shape but the architecture expects {}",
            manifest.n_points, bundle.arch.n_points
        )));
    }
    Ok(())
}

fn load_prerequisite(cfg: &RunConfig, what: &str) -> anyhow::Result<NetBundle> {
    let Some(dir) = &cfg.checkpoint else {
        bail!(UsageError(format!("config needs `checkpoint` pointing to a {what} checkpoint")));
    };
    if !dir.join(CHECKPOINT_MANIFEST).is_file() {
        bail!(UsageError(format!("no {what} checkpoint at {}", dir.display())));
    }
    let bundle = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    bundle.arch.check_flags(cfg.gsa, cfg.lgf)?;
    if let Some(arch) = &cfg.arch {
        if *arch != bundle.arch {
            return Err(Error::ArchMismatch("config `arch` differs from the checkpoint's arch.json".into()).into());
        }
    }
    Ok(bundle)
}

#[derive(Serialize)]
struct TrainLock<'a> {
    command: &'static str,
    config: &'a RunConfig,
    fingerprint: String,
}

/// Saves the checkpoint, loss CSV and lock file. A non-finite loss still saves
/// the last good parameters before failing.
fn finish_training(
    command: &'static str,
    cfg: &RunConfig,
    bundle: &mut NetBundle,
    result: kpred_core::Result<LossHistory>,
    csv_name: &str,
) -> anyhow::Result<()> {
    bundle.store.set_all_trainable(true);
    let ckpt = cfg.out.join(CHECKPOINT_DIR);
    let history = match result {
        Ok(h) => h,
        Err(e @ Error::NonFiniteLoss { .. }) => {
            save_checkpoint(bundle, &ckpt)?;
            warn!("saved last good parameters to {}", ckpt.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(bundle, &ckpt)?;
    let csv = cfg.out.join(csv_name);
    fs::write(&csv, history.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let mut locked = cfg.clone();
    locked.arch = Some(bundle.arch.clone());
    write_lock(
        &cfg.out,
        &TrainLock {
            command,
            config: &locked,
            fingerprint: bundle.fingerprint(),
        },
    )?;
    info!("wrote {}", cfg.out.display());
    Ok(())
}

pub fn train_deform(config: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut bundle = match &cfg.checkpoint {
        Some(_) => load_prerequisite(&cfg, "initial")?,
        None => NetBundle::new(cfg.fresh_arch()?)?,
    };
    let sources = load_sources(&cfg.data, Split::Database, &bundle)?;
    let targets: Vec<TargetShape> = load_split(&cfg.data, Split::Train)?
        .into_iter()
        .map(|s| TargetShape::new(s.id, s.points, bundle.arch.n_keypoints))
        .collect::<kpred_core::Result<_>>()?;
    info!("training deformation on {} sources, {} targets", sources.len(), targets.len());
    let result = deform::train_deform(&mut bundle, &sources, &targets, &cfg.train);
    finish_training("train-deform", &cfg, &mut bundle, result, "loss_deform.csv")
}

pub fn train_retrieval(config: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut bundle = load_prerequisite(&cfg, "deformation")?;
    let shapes = load_sources(&cfg.data, Split::Train, &bundle)?;
    info!("training retrieval on {} shapes", shapes.len());
    let result = retrieval::train_retrieval(&mut bundle, &shapes, &cfg.train);
    finish_training("train-retrieval", &cfg, &mut bundle, result, "loss_retrieval.csv")
}

pub fn train_partial(config: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut bundle = load_prerequisite(&cfg, "full")?;
    let sources = load_sources(&cfg.data, Split::Database, &bundle)?;
    let shapes: Vec<PointCloud> = load_split(&cfg.data, Split::Train)?.into_iter().map(|s| s.points).collect();
    info!("training partial keypoints on {} shapes", shapes.len());
    let result = deform::train_partial(&mut bundle, &sources, &shapes, &cfg.train);
    finish_training("train-partial", &cfg, &mut bundle, result, "loss_partial.csv")
}

fn load_bundle(dir: &Path) -> anyhow::Result<NetBundle> {
    if !dir.join(CHECKPOINT_MANIFEST).is_file() {
        bail!(UsageError(format!("no checkpoint at {}", dir.display())));
    }
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// Normalizes a loose point cloud (and its mesh) into the unit cube.
fn normalized_input(id: String, points: PointCloud, mesh: Option<TriMesh>) -> anyhow::Result<DatabaseInput> {
    let (points, t) = normalize_unit_cube(&points)?;
    let mesh = mesh.map(|m| m.map_vertices(|p| t.apply(p)));
    Ok(DatabaseInput { id, points, mesh })
}

/// Database inputs from a dataset split, or from every `.ply`/`.obj` file in a
/// plain directory (sorted by name). Meshes are sampled to `n_points`.
fn load_inputs(dir: &Path, split: &str, bundle: &NetBundle) -> anyhow::Result<Vec<DatabaseInput>> {
    if dir.join(data::DATASET_MANIFEST).is_file() {
        check_point_count(dir, bundle)?;
        return Ok(load_split(dir, parse_split(split)?)?
            .into_iter()
            .map(|s| DatabaseInput {
                id: s.id,
                points: s.points,
                mesh: Some(s.mesh),
            })
            .collect());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ply" | "obj")))
        .collect();
    files.sort();
    files
        .par_iter()
        .map(|path| {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if path.extension().and_then(|e| e.to_str()) == Some("obj") {
                let mesh = data::load_obj(path)?;
                let points = sample_mesh_surface(&mesh, bundle.arch.n_points, 0)?;
                normalized_input(id, points, Some(mesh))
            } else {
                let ply = data::load_ply(path)?;
                if ply.faces.is_empty() {
                    normalized_input(id, ply.into_cloud()?, None)
                } else {
                    let mesh = ply.into_mesh();
                    let points = sample_mesh_surface(&mesh, bundle.arch.n_points, 0)?;
                    normalized_input(id, points, Some(mesh))
                }
            }
        })
        .collect()
}

#[derive(Serialize)]
struct BuildDbLock<'a> {
    command: &'static str,
    shapes: &'a Path,
    split: &'a str,
    bundle: &'a Path,
    fingerprint: String,
}

pub fn build_db(shapes: Option<&Path>, split: &str, bundle_dir: &Path, out: &Path, verify: bool) -> anyhow::Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    match shapes {
        Some(dir) => {
            let inputs = load_inputs(dir, split, &bundle)?;
            if inputs.is_empty() {
                bail!(UsageError(format!("no shapes found in {}", dir.display())));
            }
            let db = build_database(&inputs, &bundle)?;
            save_database(&db, out)?;
            write_lock(
                out,
                &BuildDbLock {
                    command: "build-db",
                    shapes: dir,
                    split,
                    bundle: bundle_dir,
                    fingerprint: bundle.fingerprint(),
                },
            )?;
            info!("wrote {} records ({} skipped) to {}", db.len(), db.skipped.len(), out.display());
        }
        None if !verify => bail!(UsageError("build-db needs --shapes, --verify, or both".into())),
        None => {}
    }
    if verify {
        let db = load_database(out, Some(&bundle.fingerprint()))?;
        let bad = verify_database(&db, &bundle)?;
        if !bad.is_empty() {
            bail!("{} records do not regenerate: {}", bad.len(), bad.join(", "));
        }
        info!("verified {} records", db.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct RedCandidate {
    rank: usize,
    id: String,
    token_distance: f64,
    metric: f64,
    undeformed_metric: f64,
    obj: String,
}

#[derive(Serialize)]
struct RedResult<'a> {
    target: &'a Path,
    partial: bool,
    cb: bool,
    topk: usize,
    fingerprint: &'a str,
    metric: &'static str,
    best_id: String,
    best_metric: f64,
    candidates: Vec<RedCandidate>,
}

pub fn red(target: &Path, db_dir: &Path, bundle_dir: &Path, partial: bool, topk: usize, cb: bool, out: &Path) -> anyhow::Result<()> {
    if topk == 0 {
        bail!(UsageError("--topk must be positive".into()));
    }
    let bundle = load_bundle(bundle_dir)?;
    let db = load_database(db_dir, Some(&bundle.fingerprint()))?;
    let raw = data::load_points(target).with_context(|| format!("reading target {}", target.display()))?;
    let (pc, transform) = normalize_unit_cube(&raw)?;
    let opts = EvalOptions { k: topk, partial, cb };
    let inst = evaluate_target("target", &pc, &db, &bundle, &opts)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut candidates = Vec::with_capacity(inst.candidates.len());
    for (rank, c) in inst.candidates.iter().enumerate() {
        let rec = db.get(&c.id).expect("retrieved ids exist");
        let result = deform_forward(&bundle, &rec.source, &pc, partial)?;
        let mesh = result.mesh.unwrap_or_else(|| TriMesh {
            vertices: result.deformed.points().to_vec(),
            faces: Vec::new(),
        });
        let mesh = mesh.map_vertices(|p| transform.invert(p));
        let name = format!("candidate_{:02}_{}.obj", rank + 1, c.id);
        let path = out.join(&name);
        fs::write(&path, format_obj(&mesh)).with_context(|| format!("writing {}", path.display()))?;
        candidates.push(RedCandidate {
            rank: rank + 1,
            id: c.id.clone(),
            token_distance: c.token_distance,
            metric: c.metric,
            undeformed_metric: c.undeformed_metric,
            obj: name,
        });
    }
    let result = RedResult {
        target,
        partial,
        cb,
        topk,
        fingerprint: &db.fingerprint,
        metric: if partial { "ucd" } else { "cd" },
        best_id: inst.candidates[inst.best].id.clone(),
        best_metric: inst.best_metric(),
        candidates,
    };
    let path = out.join("result.json");
    fs::write(&path, serde_json::to_string_pretty(&result)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    write_lock(
        out,
        &serde_json::json!({
            "command": "red",
            "target": target,
            "db": db_dir,
            "bundle": bundle_dir,
            "partial": partial,
            "topk": topk,
            "cb": cb,
        }),
    )?;
    info!("best candidate {} with {} {}", result.best_id, result.metric, result.best_metric);
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalArgs {
    pub split: String,
    pub data: PathBuf,
    pub db: PathBuf,
    pub bundle: PathBuf,
    pub occlusion: Vec<f64>,
    pub partial: bool,
    pub topk: usize,
    pub cb: bool,
    pub seed: u64,
    pub out: PathBuf,
}

/// Seed of the occlusion slice for target `index`.
pub fn slice_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    if args.topk == 0 {
        bail!(UsageError("--topk must be positive".into()));
    }
    if let Some(g) = args.occlusion.iter().find(|g| !(0.0..1.0).contains(*g)) {
        bail!(UsageError(format!("occlusion ratio {g} is outside [0, 1)")));
    }
    let split = parse_split(&args.split)?;
    let bundle = load_bundle(&args.bundle)?;
    let db = load_database(&args.db, Some(&bundle.fingerprint()))?;
    let shapes = load_split(&args.data, split)?;
    if shapes.is_empty() {
        bail!(UsageError(format!("split `{}` is empty", args.split)));
    }
    let mut csv = format!("{}\n", EvalReport::CSV_HEADER);
    let sweep: Vec<Option<f64>> = if args.occlusion.is_empty() {
        vec![None]
    } else {
        args.occlusion.iter().copied().map(Some).collect()
    };
    for gamma in sweep {
        let targets: Vec<(String, PointCloud)> = shapes
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let pc = match gamma {
                    Some(g) if g > 0.0 => random_slice(&s.points, g, slice_seed(args.seed, i))?.cloud,
                    _ => s.points.clone(),
                };
                Ok((s.id.clone(), pc))
            })
            .collect::<kpred_core::Result<_>>()?;
        let opts = EvalOptions {
            k: args.topk,
            partial: args.partial || gamma.is_some_and(|g| g > 0.0),
            cb: args.cb,
        };
        let report = evaluate_topk(&targets, &db, &bundle, &opts)?;
        let suffix = gamma.map(|g| format!("@g{g}")).unwrap_or_default();
        report.write_rows(&mut csv, &suffix);
        info!(
            "{}: mean {} {}",
            if suffix.is_empty() { "full" } else { suffix.as_str() },
            if opts.partial { "UCD" } else { "CD" },
            report.mean_best()
        );
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&args.out, &csv).with_context(|| format!("writing {}", args.out.display()))?;
    let lock = args.out.with_extension("lock.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "command": "eval", "args": args }))? + "\n";
    fs::write(&lock, text).with_context(|| format!("writing {}", lock.display()))?;
    Ok(())
}
