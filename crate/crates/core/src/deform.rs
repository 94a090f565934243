//! Keypoint-driven cage deformation: forward passes, losses, and the
//! full-shape and partial-shape (teacher-student) training loops.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, ParamId, Tensor, Var};
use crate::cage::{
    apply_cage, apply_cage_mesh, build_cage, deform_cage, influence_mask, mvc_matrix, Cage, InfluenceField,
    MvcWeights,
};
use crate::error::{Error, Result};
use crate::geometry::{
    chamfer_distance, farthest_point_sampling, random_slice, unilateral_chamfer, FpsStart, Point, PointCloud,
    TriMesh,
};
use crate::nets::{
    aggregate_local, encode_shape, influence_head, points_tensor, region_context, tensor_points, AttnSide, Branch,
    Encoded, Keypoints, NetBundle, DEFORM_GROUPS, PARTIAL_GROUPS,
};

/// Optimization settings shared by all training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_deform: f64,
    pub lr_retrieval: f64,
    pub lr_partial: f64,
    pub lambda_kpt: f64,
    pub lambda_wkpt: f64,
    /// Occlusion ratio range for slicing during partial training.
    pub gamma_range: [f64; 2],
    /// Regularize target keypoints toward FPS points as well as source keypoints.
    pub kpt_reg_both: bool,
    /// Keep the deformed-region reconstruction task in the retrieval objective.
    pub dar: bool,
    /// Density (confidence) weighting for partial keypoint loss and retrieval.
    pub cb: bool,
    /// Take deformed regions as the images of source region members instead of re-querying.
    pub track_regions: bool,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr_deform: 1e-3,
            lr_retrieval: 1e-2,
            lr_partial: 1e-3,
            lambda_kpt: 2.0,
            lambda_wkpt: 20.0,
            gamma_range: [0.25, 0.90],
            kpt_reg_both: true,
            dar: true,
            cb: true,
            track_regions: false,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lambda_kpt >= 0.0 && self.lambda_wkpt >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        let [lo, hi] = self.gamma_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return bad("gamma range must satisfy 0 <= lo <= hi < 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if [self.lr_deform, self.lr_retrieval, self.lr_partial]
            .iter()
            .any(|lr| !(lr.is_finite() && *lr >= 0.0))
        {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// Everything precomputed once for a shape used as a deformation source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceGeometry {
    pub points: PointCloud,
    pub cage: Cage,
    pub mvc: MvcWeights,
    /// `N_K` farthest-point samples, regularization targets for keypoints.
    pub fps: Vec<Point>,
    pub mesh: Option<TriMesh>,
    pub mesh_mvc: Option<MvcWeights>,
}

impl SourceGeometry {
    pub fn new(points: PointCloud, mesh: Option<TriMesh>, bundle: &NetBundle) -> Result<Self> {
        let arch = &bundle.arch;
        let cage = build_cage(&points, arch.cage_template, arch.cage_margin)?;
        Self::with_cage(points, mesh, cage, bundle)
    }

    /// Uses a given cage; MVC weights are recomputed against it.
    pub fn with_cage(points: PointCloud, mesh: Option<TriMesh>, cage: Cage, bundle: &NetBundle) -> Result<Self> {
        let mvc = mvc_matrix(points.points(), &cage);
        let mesh_mvc = mesh.as_ref().map(|m| mvc_matrix(&m.vertices, &cage));
        let fps = fps_targets(&points, bundle.arch.n_keypoints)?;
        Ok(Self {
            points,
            cage,
            mvc,
            fps,
            mesh,
            mesh_mvc,
        })
    }
}

/// FPS targets for the keypoint regularizer (first point lexicographic).
pub fn fps_targets(pc: &PointCloud, n_k: usize) -> Result<Vec<Point>> {
    let k = n_k.min(pc.len());
    let idx = farthest_point_sampling(pc, k, FpsStart::Lexicographic)?;
    Ok(idx.iter().map(|&i| pc.points()[i]).collect())
}

/// A target cloud with its cached FPS targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetShape {
    pub id: String,
    pub points: PointCloud,
    pub fps: Vec<Point>,
}

impl TargetShape {
    pub fn new(id: impl Into<String>, points: PointCloud, n_k: usize) -> Result<Self> {
        let fps = fps_targets(&points, n_k)?;
        Ok(Self {
            id: id.into(),
            points,
            fps,
        })
    }
}

/// Output of one source-to-target deformation.
#[derive(Debug, Clone)]
pub struct DeformResult {
    pub deformed: PointCloud,
    pub mesh: Option<TriMesh>,
    pub k_src: Keypoints,
    pub k_tgt: Keypoints,
    pub influence: InfluenceField,
    pub cage_vertices: Vec<Point>,
    /// Region densities of the target around its keypoints.
    pub target_densities: Vec<f64>,
    /// CD to the target for full shapes, UCD from the target for partial ones.
    pub similarity: f64,
}

/// Tape nodes of a deformation forward pass.
#[derive(Debug, Clone)]
pub struct DeformNodes {
    pub src: Encoded,
    pub tgt: Encoded,
    pub mask: Vec<bool>,
    /// `N_K x N_C`.
    pub influence: Var,
    /// Deformed cage, `N_C x 3`.
    pub cage: Var,
    /// Deformed source points, `N_P x 3`.
    pub deformed: Var,
}

/// Records the deformation of `src` toward `tgt` on `g`. Target keypoints come
/// from the partial predictor when `partial` is set.
pub fn deform_graph(
    g: &mut Graph,
    bundle: &NetBundle,
    src: &SourceGeometry,
    tgt: &PointCloud,
    partial: bool,
) -> Result<DeformNodes> {
    let src_enc = encode_shape(g, bundle, &src.points, Branch::Full)?;
    let branch = if partial { Branch::Partial } else { Branch::Full };
    let tgt_enc = encode_shape(g, bundle, tgt, branch)?;

    let mask = influence_mask(src.cage.vertices(), &src_enc.keypoint_values, bundle.arch.radius);
    let local = aggregate_local(g, src_enc.features, &src_enc.groups)?;
    let context = region_context(g, bundle, src_enc.features, local, AttnSide::Deform)?;
    let influence = influence_head(g, bundle, context, &mask)?;

    let delta = g.sub(tgt_enc.keypoints, src_enc.keypoints)?;
    let it = g.transpose(influence)?;
    let offset = g.matmul(it, delta)?;
    let rest = g.constant(points_tensor(src.cage.vertices()));
    let cage = g.add(rest, offset)?;
    let weights = g.constant(Tensor::matrix(src.mvc.rows, src.mvc.cols, src.mvc.data.clone())?);
    let deformed = g.matmul(weights, cage)?;
    Ok(DeformNodes {
        src: src_enc,
        tgt: tgt_enc,
        mask,
        influence,
        cage,
        deformed,
    })
}

/// Deforms `src` toward `tgt` and returns plain values. The output cloud is
/// recomposed from the cage deformation and MVC interpolation.
pub fn deform_forward(bundle: &NetBundle, src: &SourceGeometry, tgt: &PointCloud, partial: bool) -> Result<DeformResult> {
    let mut g = Graph::new();
    let nodes = deform_graph(&mut g, bundle, src, tgt, partial)?;
    let (n_k, n_c) = (bundle.arch.n_keypoints, src.cage.vertex_count());
    let influence = InfluenceField::new(n_k, n_c, g.value(nodes.influence).data().to_vec(), nodes.mask.clone())?;
    let k_src = nodes.src.keypoint_values.clone();
    let k_tgt = nodes.tgt.keypoint_values.clone();
    let cage_vertices = deform_cage(src.cage.vertices(), &k_src, &k_tgt, &influence)?;
    let deformed = PointCloud::new(apply_cage(&src.mvc, &cage_vertices)?)?;
    let mesh = match (&src.mesh, &src.mesh_mvc) {
        (Some(m), Some(w)) => Some(apply_cage_mesh(m, w, &cage_vertices)?),
        _ => None,
    };
    let similarity = if partial {
        unilateral_chamfer(tgt, &deformed)?
    } else {
        chamfer_distance(&deformed, tgt)?
    };
    Ok(DeformResult {
        deformed,
        mesh,
        k_src: Keypoints(k_src),
        k_tgt: Keypoints(k_tgt),
        influence,
        cage_vertices,
        target_densities: nodes.tgt.groups.densities(),
        similarity,
    })
}

/// Loss values of one step: a similarity term, a keypoint term, and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.sim.is_finite() && self.reg.is_finite() && self.total.is_finite()
    }
}

/// Column names of a loss history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Deform,
    Partial,
    Retrieval,
}

impl LossKind {
    pub fn columns(self) -> [&'static str; 3] {
        match self {
            LossKind::Deform => ["L_sim", "L_kpt", "L_def"],
            LossKind::Partial => ["L_usim", "L_wkpt", "L_pdef"],
            LossKind::Retrieval => ["L_rec", "L_defrec", "L_ret"],
        }
    }
}

/// `CD(S_src2tgt, S_tgt)`.
pub fn loss_sim(result: &DeformResult, tgt: &PointCloud) -> Result<f64> {
    chamfer_distance(&result.deformed, tgt)
}

/// Chamfer distance between keypoints and FPS samples of `pc`.
pub fn loss_kpt(keypoints: &[Point], pc: &PointCloud) -> Result<f64> {
    let fps = PointCloud::new(fps_targets(pc, keypoints.len())?)?;
    chamfer_distance(&PointCloud::new(keypoints.to_vec())?, &fps)
}

/// `L_sim + lambda_kpt * L_kpt`.
pub fn loss_def(result: &DeformResult, src: &PointCloud, tgt: &PointCloud, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let sim = loss_sim(result, tgt)?;
    let mut reg = loss_kpt(result.k_src.points(), src)?;
    if cfg.kpt_reg_both {
        reg = 0.5 * (reg + loss_kpt(result.k_tgt.points(), tgt)?);
    }
    Ok(LossBreakdown {
        sim,
        reg,
        total: sim + cfg.lambda_kpt * reg,
    })
}

/// `sum_i D_i * |K_full_i - K_part_i|_1`.
pub fn loss_wkpt(k_full: &[Point], k_part: &[Point], densities: &[f64]) -> Result<f64> {
    if k_full.len() != k_part.len() || k_full.len() != densities.len() {
        return Err(Error::DimensionMismatch(format!(
            "loss_wkpt: {} teacher / {} student keypoints, {} densities",
            k_full.len(),
            k_part.len(),
            densities.len()
        )));
    }
    Ok(k_full
        .iter()
        .zip(k_part)
        .zip(densities)
        .map(|((a, b), d)| d * (a - b).abs().sum())
        .sum())
}

/// `UCD(tgt_partial -> S_src2tgt) + lambda_wkpt * L_wkpt`.
pub fn loss_pdef(
    result: &DeformResult,
    tgt_partial: &PointCloud,
    k_full: &[Point],
    densities: &[f64],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let sim = unilateral_chamfer(tgt_partial, &result.deformed)?;
    let reg = loss_wkpt(k_full, result.k_tgt.points(), densities)?;
    Ok(LossBreakdown {
        sim,
        reg,
        total: sim + cfg.lambda_wkpt * reg,
    })
}

/// Tape version of [`loss_def`].
pub fn loss_def_graph(
    g: &mut Graph,
    nodes: &DeformNodes,
    src: &SourceGeometry,
    tgt: &TargetShape,
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let target = g.constant(points_tensor(tgt.points.points()));
    let sim = g.chamfer(nodes.deformed, target)?;
    let fps_src = g.constant(points_tensor(&src.fps));
    let mut reg = g.chamfer(nodes.src.keypoints, fps_src)?;
    if cfg.kpt_reg_both {
        let fps_tgt = g.constant(points_tensor(&tgt.fps));
        let r_tgt = g.chamfer(nodes.tgt.keypoints, fps_tgt)?;
        let both = g.add(reg, r_tgt)?;
        reg = g.scale(both, 0.5);
    }
    let weighted = g.scale(reg, cfg.lambda_kpt);
    let total = g.add(sim, weighted)?;
    let breakdown = LossBreakdown {
        sim: g.scalar(sim),
        reg: g.scalar(reg),
        total: g.scalar(total),
    };
    Ok((total, breakdown))
}

/// Tape version of [`loss_pdef`]. `k_full` is the teacher's prediction on the
/// unsliced target and enters as a constant.
pub fn loss_pdef_graph(
    g: &mut Graph,
    nodes: &DeformNodes,
    tgt_partial: &PointCloud,
    k_full: &[Point],
    densities: &[f64],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let target = g.constant(points_tensor(tgt_partial.points()));
    let sim = g.unilateral_chamfer(target, nodes.deformed)?;
    let teacher = g.constant(points_tensor(k_full));
    let l1 = g.l1_rows(teacher, nodes.tgt.keypoints)?;
    let d = g.constant(Tensor::vector(densities.to_vec()));
    let weighted = g.mul(l1, d)?;
    let reg = g.sum(weighted);
    let scaled = g.scale(reg, cfg.lambda_wkpt);
    let total = g.add(sim, scaled)?;
    let breakdown = LossBreakdown {
        sim: g.scalar(sim),
        reg: g.scalar(reg),
        total: g.scalar(total),
    };
    Ok((total, breakdown))
}

/// Keypoints predicted by the full (teacher) predictor.
pub fn predict_full_keypoints(bundle: &NetBundle, pc: &PointCloud) -> Result<Vec<Point>> {
    let mut g = Graph::new();
    Ok(encode_shape(&mut g, bundle, pc, Branch::Full)?.keypoint_values)
}

/// One optimizer step's record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Per-step losses plus per-epoch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub kind: LossKind,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<LossBreakdown>,
}

impl LossHistory {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            steps: Vec::new(),
            epochs: Vec::new(),
        }
    }

    /// `epoch,step,<sim>,<reg>,<total>` with one row per optimizer step.
    pub fn to_csv(&self) -> String {
        let [a, b, c] = self.kind.columns();
        let mut out = format!("epoch,step,{a},{b},{c}\n");
        for r in &self.steps {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.loss.sim, r.loss.reg, r.loss.total);
        }
        out
    }
}

type StepGrads = (Vec<(ParamId, Tensor)>, LossBreakdown);

/// Runs minibatch Adam over planned tasks. Batch items are evaluated in
/// parallel and their gradients summed in task order. On a non-finite loss
/// the bundle is left at its last good state and an error is returned.
pub(crate) fn run_training<T, P, L>(
    bundle: &mut NetBundle,
    groups: &[&str],
    lr: f64,
    cfg: &TrainConfig,
    kind: LossKind,
    mut plan_epoch: P,
    loss: L,
) -> Result<LossHistory>
where
    T: Sync,
    P: FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<T>>,
    L: Fn(&NetBundle, &T, &mut Graph) -> Result<(Var, LossBreakdown)> + Sync,
{
    cfg.validate()?;
    let adam = AdamConfig::with_lr(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = LossHistory::new(kind);
    bundle.store.train_only(groups);
    bundle.store.zero_grads();
    let result = (|| {
        for epoch in 0..cfg.epochs {
            let tasks = plan_epoch(epoch, &mut rng)?;
            let mut sum = LossBreakdown::default();
            let mut count = 0usize;
            for (step, batch) in tasks.chunks(cfg.batch_size).enumerate() {
                let frozen: &NetBundle = bundle;
                let outs: Vec<Result<StepGrads>> = batch
                    .par_iter()
                    .map(|task| {
                        let mut g = Graph::new();
                        let (l, breakdown) = loss(frozen, task, &mut g)?;
                        if !breakdown.is_finite() {
                            return Ok((Vec::new(), breakdown));
                        }
                        let grads = g.backward(l)?.param_grads(&g);
                        Ok((grads, breakdown))
                    })
                    .collect();
                let mut mean = LossBreakdown::default();
                let scale = 1.0 / batch.len() as f64;
                let mut reduced: Vec<(ParamId, Tensor)> = Vec::new();
                for out in outs {
                    let (grads, b) = out?;
                    if !b.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch, step });
                    }
                    mean.sim += b.sim * scale;
                    mean.reg += b.reg * scale;
                    mean.total += b.total * scale;
                    for (id, gr) in grads {
                        match reduced.iter_mut().find(|(i, _)| *i == id) {
                            Some((_, acc)) => acc.add_assign(&gr),
                            None => reduced.push((id, gr)),
                        }
                    }
                }
                for (id, mut gr) in reduced {
                    gr.data_mut().iter_mut().for_each(|v| *v *= scale);
                    bundle.store.accumulate_grad(id, &gr);
                }
                let norm = bundle.store.clip_grad_norm(cfg.clip_norm);
                bundle.store.adam_step(&adam)?;
                debug!("epoch {epoch} step {step}: loss {:.6} grad norm {norm:.4}", mean.total);
                history.steps.push(StepRecord { epoch, step, loss: mean });
                sum.sim += mean.sim * batch.len() as f64;
                sum.reg += mean.reg * batch.len() as f64;
                sum.total += mean.total * batch.len() as f64;
                count += batch.len();
            }
            let n = count.max(1) as f64;
            let epoch_mean = LossBreakdown {
                sim: sum.sim / n,
                reg: sum.reg / n,
                total: sum.total / n,
            };
            info!("epoch {epoch}: mean {} = {:.6}", kind.columns()[2], epoch_mean.total);
            history.epochs.push(epoch_mean);
        }
        Ok(())
    })();
    bundle.store.zero_grads();
    bundle.store.set_all_trainable(true);
    result.map(|_| history)
}

/// Trains the encoder, keypoint predictor, deformation attention and influence
/// head on random (database source, training target) pairs.
pub fn train_deform(
    bundle: &mut NetBundle,
    sources: &[SourceGeometry],
    targets: &[TargetShape],
    cfg: &TrainConfig,
) -> Result<LossHistory> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::InvalidArgument("deformation training needs sources and targets".into()));
    }
    run_training(
        bundle,
        DEFORM_GROUPS,
        cfg.lr_deform,
        cfg,
        LossKind::Deform,
        |_, rng| {
            let mut order: Vec<usize> = (0..targets.len()).collect();
            order.shuffle(rng);
            Ok(order
                .into_iter()
                .map(|t| (rng.random_range(0..sources.len()), t))
                .collect())
        },
        |b, &(s, t): &(usize, usize), g| {
            let nodes = deform_graph(g, b, &sources[s], &targets[t].points, false)?;
            loss_def_graph(g, &nodes, &sources[s], &targets[t], cfg)
        },
    )
}

/// One partial-training example: a sliced target and its teacher keypoints.
#[derive(Debug, Clone)]
pub struct PartialTask {
    pub source: usize,
    pub partial: PointCloud,
    pub teacher: Vec<Point>,
}

/// Trains only the partial keypoint predictor. Each step slices a full shape
/// with a random ratio and matches the teacher's keypoints on the full shape.
pub fn train_partial(
    bundle: &mut NetBundle,
    sources: &[SourceGeometry],
    shapes: &[PointCloud],
    cfg: &TrainConfig,
) -> Result<LossHistory> {
    if sources.is_empty() || shapes.is_empty() {
        return Err(Error::InvalidArgument("partial training needs sources and shapes".into()));
    }
    let teachers: Vec<Vec<Point>> = shapes
        .par_iter()
        .map(|pc| predict_full_keypoints(bundle, pc))
        .collect::<Result<_>>()?;
    let [lo, hi] = cfg.gamma_range;
    run_training(
        bundle,
        PARTIAL_GROUPS,
        cfg.lr_partial,
        cfg,
        LossKind::Partial,
        |_, rng| {
            let mut order: Vec<usize> = (0..shapes.len()).collect();
            order.shuffle(rng);
            order
                .into_iter()
                .map(|t| {
                    let gamma = if hi > lo { rng.random_range(lo..hi) } else { lo };
                    let slice = random_slice(&shapes[t], gamma, rng.random())?;
                    Ok(PartialTask {
                        source: rng.random_range(0..sources.len()),
                        partial: slice.cloud,
                        teacher: teachers[t].clone(),
                    })
                })
                .collect()
        },
        |b, task: &PartialTask, g| {
            let nodes = deform_graph(g, b, &sources[task.source], &task.partial, true)?;
            let densities = if cfg.cb {
                nodes.tgt.groups.densities()
            } else {
                vec![1.0; b.arch.n_keypoints]
            };
            loss_pdef_graph(g, &nodes, &task.partial, &task.teacher, &densities, cfg)
        },
    )
}

/// Helper for tests and tools: keypoint tensor values as points.
pub fn keypoints_of(g: &Graph, v: Var) -> Vec<Point> {
    tensor_points(g.value(v))
}
