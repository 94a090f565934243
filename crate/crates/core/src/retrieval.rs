//! Token database, L1 retrieval (plain and density-weighted), the auxiliary
//! reconstruction objective that trains the tokens, and top-k evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor, Var};
use crate::deform::{
    deform_forward, run_training, DeformResult, LossBreakdown, LossHistory, LossKind, SourceGeometry, TrainConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, region_query, unilateral_chamfer, PointCloud, TriMesh};
use crate::nets::{
    decode_region, encode_shape, points_tensor, shape_tokens, Branch, DecoderTask, Keypoints, NetBundle,
    RETRIEVAL_GROUPS,
};

/// A database shape with everything needed for retrieval and deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub id: String,
    pub source: SourceGeometry,
    pub keypoints: Keypoints,
    /// Region tokens, `N_T x d_T` with `N_T = N_K` (or 1 without local tokens).
    pub tokens: Tensor,
}

impl ShapeRecord {
    /// Concatenation of the region tokens in keypoint order.
    pub fn global_token(&self) -> &[f64] {
        self.tokens.data()
    }
}

/// Immutable set of records produced by one network bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDatabase {
    pub records: Vec<ShapeRecord>,
    pub fingerprint: String,
    pub n_keypoints: usize,
    pub token_rows: usize,
    pub token_dim: usize,
    /// Shapes that could not be added, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl TokenDatabase {
    pub fn new(
        records: Vec<ShapeRecord>,
        fingerprint: String,
        n_keypoints: usize,
        token_rows: usize,
        token_dim: usize,
        skipped: Vec<(String, String)>,
    ) -> Result<Self> {
        let db = Self {
            records,
            fingerprint,
            n_keypoints,
            token_rows,
            token_dim,
            skipped,
        };
        db.validate()?;
        Ok(db)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Invariant("database has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Invariant(format!("duplicate record id `{}`", r.id)));
            }
            if r.keypoints.len() != self.n_keypoints || r.tokens.shape() != [self.token_rows, self.token_dim] {
                return Err(Error::Invariant(format!(
                    "record `{}` has {} keypoints and tokens {:?}, expected {} and [{}, {}]",
                    r.id,
                    r.keypoints.len(),
                    r.tokens.shape(),
                    self.n_keypoints,
                    self.token_rows,
                    self.token_dim
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ShapeRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found: fingerprint.to_string(),
            });
        }
        Ok(())
    }
}

/// One shape handed to [`build_database`].
#[derive(Debug, Clone)]
pub struct DatabaseInput {
    pub id: String,
    pub points: PointCloud,
    pub mesh: Option<TriMesh>,
}

/// Keypoints and tokens of one shape under `bundle`.
pub fn shape_descriptor(bundle: &NetBundle, pc: &PointCloud) -> Result<(Keypoints, Tensor)> {
    let mut g = Graph::new();
    let enc = encode_shape(&mut g, bundle, pc, Branch::Full)?;
    let tokens = shape_tokens(&mut g, bundle, &enc)?;
    Ok((Keypoints(enc.keypoint_values), g.value(tokens).clone()))
}

/// Builds one record per shape. Shapes whose cage cannot be built are
/// skipped with a warning and listed in `skipped`.
pub fn build_database(shapes: &[DatabaseInput], bundle: &NetBundle) -> Result<TokenDatabase> {
    let built: Vec<Result<ShapeRecord>> = shapes
        .par_iter()
        .map(|s| {
            let source = SourceGeometry::new(s.points.clone(), s.mesh.clone(), bundle)?;
            let (keypoints, tokens) = shape_descriptor(bundle, &s.points)?;
            Ok(ShapeRecord {
                id: s.id.clone(),
                source,
                keypoints,
                tokens,
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (s, r) in shapes.iter().zip(built) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e @ Error::CageConstruction(_)) => {
                warn!("skipping `{}`: {e}", s.id);
                skipped.push((s.id.clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    TokenDatabase::new(
        records,
        bundle.fingerprint(),
        bundle.arch.n_keypoints,
        bundle.arch.token_count(),
        bundle.arch.token_dim,
        skipped,
    )
}

/// Recomputes every record's keypoints and tokens from its stored points and
/// returns the ids that differ bit-wise.
pub fn verify_database(db: &TokenDatabase, bundle: &NetBundle) -> Result<Vec<String>> {
    db.check_fingerprint(&bundle.fingerprint())?;
    let bad: Vec<Option<String>> = db
        .records
        .par_iter()
        .map(|r| {
            let (k, t) = shape_descriptor(bundle, &r.source.points)?;
            let mvc = crate::cage::mvc_matrix(r.source.points.points(), &r.source.cage);
            Ok((k != r.keypoints || t != r.tokens || mvc != r.source.mvc).then(|| r.id.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(bad.into_iter().flatten().collect())
}

/// Tokens of a query shape, tagged with the bundle that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenQuery {
    pub tokens: Tensor,
    pub keypoints: Keypoints,
    /// Region densities around the query keypoints.
    pub densities: Vec<f64>,
    pub fingerprint: String,
}

/// Encodes a target; `partial` selects the partial keypoint predictor.
pub fn query_tokens(bundle: &NetBundle, pc: &PointCloud, partial: bool) -> Result<TokenQuery> {
    let mut g = Graph::new();
    let branch = if partial { Branch::Partial } else { Branch::Full };
    let enc = encode_shape(&mut g, bundle, pc, branch)?;
    let tokens = shape_tokens(&mut g, bundle, &enc)?;
    Ok(TokenQuery {
        tokens: g.value(tokens).clone(),
        densities: enc.groups.densities(),
        keypoints: Keypoints(enc.keypoint_values),
        fingerprint: bundle.fingerprint(),
    })
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub id: String,
    pub distance: f64,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn rank(db: &TokenDatabase, scores: Vec<f64>, k: usize) -> Vec<Ranked> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then_with(|| db.records[a].id.cmp(&db.records[b].id))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| Ranked {
            index: i,
            id: db.records[i].id.clone(),
            distance: scores[i],
        })
        .collect()
}

fn check_query(query: &TokenQuery, db: &TokenDatabase) -> Result<()> {
    db.check_fingerprint(&query.fingerprint)?;
    if query.tokens.shape() != [db.token_rows, db.token_dim] {
        return Err(Error::DimensionMismatch(format!(
            "query tokens {:?} against database tokens [{}, {}]",
            query.tokens.shape(),
            db.token_rows,
            db.token_dim
        )));
    }
    Ok(())
}

/// L1 distance between two concatenated token sets, accumulated region by
/// region so that it equals the unit-weight per-region sum bit for bit.
pub fn global_l1(a: &[f64], b: &[f64], token_dim: usize) -> f64 {
    a.chunks(token_dim).zip(b.chunks(token_dim)).map(|(x, y)| l1(x, y)).sum()
}

/// The `k` records nearest in L1 over global tokens; ties go to the smaller id.
pub fn retrieve_full(query: &TokenQuery, db: &TokenDatabase, k: usize) -> Result<Vec<Ranked>> {
    check_query(query, db)?;
    let q = query.tokens.data();
    let scores = db
        .records
        .iter()
        .map(|r| global_l1(q, r.global_token(), db.token_dim))
        .collect();
    Ok(rank(db, scores, k))
}

/// The `k` records minimizing `sum_i w_i * L1(T_q_i, T_r_i)` over region tokens.
pub fn retrieve_partial(query: &TokenQuery, weights: &[f64], db: &TokenDatabase, k: usize) -> Result<Vec<Ranked>> {
    check_query(query, db)?;
    if weights.len() != db.token_rows {
        return Err(Error::DimensionMismatch(format!(
            "{} region weights for {} token rows",
            weights.len(),
            db.token_rows
        )));
    }
    let scores = db
        .records
        .iter()
        .map(|r| {
            (0..db.token_rows)
                .map(|i| weights[i] * l1(query.tokens.row(i), r.tokens.row(i)))
                .sum()
        })
        .collect();
    Ok(rank(db, scores, k))
}

/// Retrieval-side loss terms of one (S_x, S_y) pair, before reduction.
#[derive(Debug, Clone)]
pub struct RetrievalTerms {
    /// Chamfer terms for the region reconstruction task, `None` where the region is empty.
    pub rec: Vec<Option<Var>>,
    /// Chamfer terms for the deformed-region task.
    pub def: Vec<Option<Var>>,
}

/// Frozen inputs for one retrieval training pair.
#[derive(Debug, Clone)]
pub struct RetrievalPair {
    pub x: PointCloud,
    pub keypoints_x: Keypoints,
    pub keypoints_y: Keypoints,
    pub deformed: DeformResult,
}

/// Runs the frozen deformation of `x` toward `y`.
pub fn prepare_pair(bundle: &NetBundle, x: &SourceGeometry, y: &PointCloud) -> Result<RetrievalPair> {
    let deformed = deform_forward(bundle, x, y, false)?;
    Ok(RetrievalPair {
        x: x.points.clone(),
        keypoints_x: deformed.k_src.clone(),
        keypoints_y: deformed.k_tgt.clone(),
        deformed,
    })
}

/// Records both reconstruction tasks for a prepared pair.
pub fn retrieval_terms(g: &mut Graph, bundle: &NetBundle, pair: &RetrievalPair, cfg: &TrainConfig) -> Result<RetrievalTerms> {
    let arch = &bundle.arch;
    let n_k = arch.n_keypoints;
    let enc = encode_shape(g, bundle, &pair.x, Branch::Full)?;
    let tokens = shape_tokens(g, bundle, &enc)?;
    let token_row = |g: &mut Graph, i: usize| -> Result<Var> {
        let r = if arch.lgf { i } else { 0 };
        g.gather_rows(tokens, &[r])
    };
    let kx = g.constant(pair.keypoints_x.to_tensor());
    let ky = g.constant(pair.keypoints_y.to_tensor());

    let regions_x = &enc.groups.assignment.regions;
    let deformed_pts = pair.deformed.deformed.points();
    let regions_y: Vec<Vec<usize>> = if cfg.track_regions {
        regions_x.iter().map(|r| r.indices.clone()).collect()
    } else {
        region_query(&pair.deformed.deformed, pair.keypoints_y.points(), arch.radius, arch.density_reference())?
            .regions
            .into_iter()
            .map(|r| r.indices)
            .collect()
    };

    let mut rec = Vec::with_capacity(n_k);
    let mut def = Vec::with_capacity(n_k);
    for i in 0..n_k {
        let members = &regions_x[i].indices;
        rec.push(if members.is_empty() {
            None
        } else {
            let tok = token_row(g, i)?;
            let out = decode_region(g, bundle, DecoderTask::Reconstruct, tok, kx, i)?;
            let gt: Vec<_> = members.iter().map(|&j| pair.x.points()[j]).collect();
            let gt = g.constant(points_tensor(&gt));
            Some(g.chamfer(out, gt)?)
        });
        if !cfg.dar {
            continue;
        }
        let members = &regions_y[i];
        def.push(if members.is_empty() {
            None
        } else {
            let tok = token_row(g, i)?;
            let out = decode_region(g, bundle, DecoderTask::Deformed, tok, ky, i)?;
            let gt: Vec<_> = members.iter().map(|&j| deformed_pts[j]).collect();
            let gt = g.constant(points_tensor(&gt));
            Some(g.chamfer(out, gt)?)
        });
    }
    Ok(RetrievalTerms { rec, def })
}

/// Reduces retrieval terms: each task contributes its mean over non-empty
/// regions, so with no empty regions the loss is `(1/N_K) * sum` of all terms.
pub fn reduce_retrieval_terms(g: &mut Graph, terms: &RetrievalTerms) -> Result<(Var, LossBreakdown)> {
    let present: Vec<Var> = terms.rec.iter().chain(&terms.def).flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::DegenerateShape("every keypoint region is empty".into()));
    }
    let tasks = if terms.def.is_empty() { 1.0 } else { 2.0 };
    let mut total: Option<Var> = None;
    for &v in &present {
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v)?,
        });
    }
    let loss = g.scale(total.expect("non-empty"), tasks / present.len() as f64);
    let sum_of = |g: &Graph, vs: &[Option<Var>]| vs.iter().flatten().map(|&v| g.scalar(v)).sum::<f64>();
    let scale = tasks / present.len() as f64;
    let breakdown = LossBreakdown {
        sim: scale * sum_of(g, &terms.rec),
        reg: scale * sum_of(g, &terms.def),
        total: g.scalar(loss),
    };
    Ok((loss, breakdown))
}

/// `L_ret` for one pair; `x` must carry its cage since it is deformed toward `y`.
pub fn loss_ret(bundle: &NetBundle, x: &SourceGeometry, y: &PointCloud, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let pair = prepare_pair(bundle, x, y)?;
    let mut g = Graph::new();
    let terms = retrieval_terms(&mut g, bundle, &pair, cfg)?;
    Ok(reduce_retrieval_terms(&mut g, &terms)?.1)
}

/// Trains the retrieval attention, token head and decoders on random pairs of
/// training shapes with every deformation-side parameter frozen.
pub fn train_retrieval(bundle: &mut NetBundle, shapes: &[SourceGeometry], cfg: &TrainConfig) -> Result<LossHistory> {
    if shapes.len() < 2 {
        return Err(Error::InvalidArgument("retrieval training needs at least two shapes".into()));
    }
    let frozen = bundle.clone();
    run_training(
        bundle,
        RETRIEVAL_GROUPS,
        cfg.lr_retrieval,
        cfg,
        LossKind::Retrieval,
        |_, rng| {
            let mut order: Vec<usize> = (0..shapes.len()).collect();
            order.shuffle(rng);
            let pairs: Vec<(usize, usize)> = order
                .into_iter()
                .map(|x| {
                    let mut y = rng.random_range(0..shapes.len() - 1);
                    if y >= x {
                        y += 1;
                    }
                    (x, y)
                })
                .collect();
            pairs
                .par_iter()
                .map(|&(x, y)| prepare_pair(&frozen, &shapes[x], &shapes[y].points))
                .collect()
        },
        |b, pair: &RetrievalPair, g| {
            let terms = retrieval_terms(g, b, pair, cfg)?;
            reduce_retrieval_terms(g, &terms)
        },
    )
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub partial: bool,
    /// Density-weighted retrieval for partial targets.
    pub cb: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 10,
            partial: false,
            cb: true,
        }
    }
}

/// One retrieved-and-deformed candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResult {
    pub id: String,
    pub token_distance: f64,
    /// CD (full) or UCD from the target (partial) after deformation.
    pub metric: f64,
    /// The same metric for the undeformed candidate.
    pub undeformed_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub target_id: String,
    pub candidates: Vec<CandidateResult>,
    /// Index into `candidates` of the lowest metric (first on ties).
    pub best: usize,
}

impl EvalInstance {
    pub fn best_metric(&self) -> f64 {
        self.candidates[self.best].metric
    }

    /// Best metric among the first `k` candidates.
    pub fn best_of(&self, k: usize) -> f64 {
        self.candidates
            .iter()
            .take(k.max(1))
            .map(|c| c.metric)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub instances: Vec<EvalInstance>,
    pub partial: bool,
}

impl EvalReport {
    pub fn mean_best(&self) -> f64 {
        self.mean_best_of(usize::MAX)
    }

    pub fn mean_best_of(&self, k: usize) -> f64 {
        if self.instances.is_empty() {
            return f64::NAN;
        }
        self.instances.iter().map(|i| i.best_of(k)).sum::<f64>() / self.instances.len() as f64
    }

    pub const CSV_HEADER: &'static str = "target_id,rank,candidate_id,token_distance,metric_cd_or_ucd,best_flag";

    /// One row per candidate, then a `summary` row carrying the mean best metric.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        self.write_rows(&mut out, "");
        out
    }

    /// Rows without a header; `suffix` is appended to target ids.
    pub fn write_rows(&self, out: &mut String, suffix: &str) {
        for inst in &self.instances {
            for (rank, c) in inst.candidates.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{}{suffix},{},{},{},{},{}",
                    inst.target_id,
                    rank + 1,
                    c.id,
                    c.token_distance,
                    c.metric,
                    u8::from(rank == inst.best)
                );
            }
        }
        let _ = writeln!(out, "summary{suffix},,,,{},", self.mean_best());
    }
}

/// Retrieves the top-k candidates for every target, deforms each, and keeps the best.
pub fn evaluate_topk(
    targets: &[(String, PointCloud)],
    db: &TokenDatabase,
    bundle: &NetBundle,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    db.check_fingerprint(&bundle.fingerprint())?;
    let instances = targets
        .par_iter()
        .map(|(id, pc)| evaluate_target(id, pc, db, bundle, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        instances,
        partial: opts.partial,
    })
}

/// Top-k retrieval and deformation of a single target.
pub fn evaluate_target(
    id: &str,
    pc: &PointCloud,
    db: &TokenDatabase,
    bundle: &NetBundle,
    opts: &EvalOptions,
) -> Result<EvalInstance> {
    let query = query_tokens(bundle, pc, opts.partial)?;
    let hits = if opts.partial && opts.cb && bundle.arch.lgf {
        retrieve_partial(&query, &query.densities, db, opts.k)?
    } else {
        retrieve_full(&query, db, opts.k)?
    };
    let metric = |a: &PointCloud| -> Result<f64> {
        if opts.partial {
            unilateral_chamfer(pc, a)
        } else {
            chamfer_distance(a, pc)
        }
    };
    let mut candidates = Vec::with_capacity(hits.len());
    for h in hits {
        let rec = &db.records[h.index];
        let result = deform_forward(bundle, &rec.source, pc, opts.partial)?;
        candidates.push(CandidateResult {
            id: h.id,
            token_distance: h.distance,
            metric: result.similarity,
            undeformed_metric: metric(&rec.source.points)?,
        });
    }
    let best = candidates
        .iter()
        .enumerate()
        .fold(0, |b, (i, c)| if c.metric < candidates[b].metric { i } else { b });
    Ok(EvalInstance {
        target_id: id.to_string(),
        candidates,
        best,
    })
}
