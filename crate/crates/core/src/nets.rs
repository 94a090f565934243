//! Learnable blocks: shared per-point encoder, attention-pooling keypoint
//! predictors (full and partial), local max-pool aggregation, self-attention
//! over keypoint regions, the influence head, retrieval token heads, and the
//! region reconstruction decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::cage::CageTemplate;
use crate::error::{Error, Result};
use crate::geometry::{region_query, Point, PointCloud, RegionAssignment};

/// Parameter name prefixes trained by the deformation stage.
pub const DEFORM_GROUPS: &[&str] = &["encoder.", "kp.", "attn_def.", "influence."];
/// Parameter name prefixes trained by the retrieval stage.
pub const RETRIEVAL_GROUPS: &[&str] = &["attn_ret.", "token.", "token_global.", "decoder."];
/// The partial-shape keypoint predictor.
pub const PARTIAL_GROUPS: &[&str] = &["part_encoder.", "part_kp."];
/// Everything that determines database contents (keypoints and tokens).
pub const TOKEN_PATH_GROUPS: &[&str] = &["encoder.", "kp.", "attn_ret.", "token.", "token_global."];

/// Network dimensions and ablation switches. Serialized as `arch.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Points per input cloud; sets the default density reference.
    pub n_points: usize,
    pub n_keypoints: usize,
    pub cage_template: CageTemplate,
    pub cage_margin: f64,
    /// Support-region radius for pooling, masking and densities.
    pub radius: f64,
    /// Reference count for region density; `None` means `0.5 * n_points / n_keypoints`.
    pub density_ref: Option<f64>,
    /// Per-point MLP widths; the last entry is the feature width.
    pub encoder_dims: Vec<usize>,
    pub keypoint_hidden: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub ffn_dim: usize,
    pub influence_hidden: usize,
    pub token_hidden: usize,
    pub token_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_points: usize,
    /// Geometric self-attention over regions; off feeds heads the global feature.
    pub gsa: bool,
    /// Local-global tokens; off uses one token from the global feature.
    pub lgf: bool,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_points: 2048,
            n_keypoints: 12,
            cage_template: CageTemplate::Icosphere1,
            cage_margin: 1.2,
            radius: 0.3,
            density_ref: None,
            encoder_dims: vec![64, 128, 128],
            keypoint_hidden: 64,
            attn_layers: 2,
            attn_heads: 4,
            ffn_dim: 256,
            influence_hidden: 128,
            token_hidden: 64,
            token_dim: 32,
            decoder_hidden: 128,
            decoder_points: 128,
            gsa: true,
            lgf: true,
            seed: 0,
        }
    }
}

impl ArchConfig {
    /// Small dimensions for gradient checks and unit tests.
    pub fn toy() -> Self {
        Self {
            n_points: 64,
            n_keypoints: 3,
            cage_template: CageTemplate::Icosphere0,
            encoder_dims: vec![8, 12],
            keypoint_hidden: 8,
            attn_layers: 1,
            attn_heads: 2,
            ffn_dim: 16,
            influence_hidden: 10,
            token_hidden: 8,
            token_dim: 6,
            decoder_hidden: 12,
            decoder_points: 16,
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_dims.last().unwrap_or(&3)
    }

    pub fn n_cage(&self) -> usize {
        self.cage_template.vertex_count()
    }

    pub fn density_reference(&self) -> f64 {
        self.density_ref
            .unwrap_or(0.5 * self.n_points as f64 / self.n_keypoints as f64)
    }

    /// Number of retrieval tokens per shape.
    pub fn token_count(&self) -> usize {
        if self.lgf {
            self.n_keypoints
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_keypoints == 0 || self.encoder_dims.is_empty() {
            return bad("need at least one keypoint and one encoder layer".into());
        }
        if self.attn_heads == 0 || self.feature_dim() % self.attn_heads != 0 {
            return bad(format!(
                "feature width {} is not divisible by {} heads",
                self.feature_dim(),
                self.attn_heads
            ));
        }
        if !(self.radius > 0.0) || !(self.cage_margin > 0.0) {
            return bad("radius and cage margin must be positive".into());
        }
        Ok(())
    }

    /// Refuses to mix ablation variants.
    pub fn check_flags(&self, gsa: Option<bool>, lgf: Option<bool>) -> Result<()> {
        for (name, want, have) in [("gsa", gsa, self.gsa), ("lgf", lgf, self.lgf)] {
            if let Some(w) = want {
                if w != have {
                    return Err(Error::ArchMismatch(format!(
                        "requested {name}={w} but the checkpoint was built with {name}={have}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which keypoint predictor to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Full,
    Partial,
}

/// Which self-attention stack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnSide {
    Deform,
    Retrieval,
}

impl AttnSide {
    fn prefix(self) -> &'static str {
        match self {
            AttnSide::Deform => "attn_def",
            AttnSide::Retrieval => "attn_ret",
        }
    }
}

/// Ordered semantic control points of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints(pub Vec<Point>);

impl Keypoints {
    pub fn points(&self) -> &[Point] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        points_tensor(&self.0)
    }
}

/// All parameters of the model together with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetBundle {
    pub arch: ArchConfig,
    pub store: ParamStore,
}

fn add_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.add_xavier(&format!("{name}.weight"), fan_in, fan_out, rng)?;
    store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn add_zero_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.add(&format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]))?;
    store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn add_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.add(&format!("{name}.gain"), Tensor::filled(&[dim], 1.0))?;
    store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]))?;
    Ok(())
}

impl NetBundle {
    /// Freshly initialized parameters; the influence head's output layer starts at zero.
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let mut store = ParamStore::new();
        let d = arch.feature_dim();

        for enc in ["encoder", "part_encoder"] {
            let mut fan_in = 3;
            for (l, &w) in arch.encoder_dims.iter().enumerate() {
                add_linear(&mut store, &format!("{enc}.l{l}"), fan_in, w, &mut rng)?;
                fan_in = w;
            }
        }
        for kp in ["kp", "part_kp"] {
            add_linear(&mut store, &format!("{kp}.hidden"), d, arch.keypoint_hidden, &mut rng)?;
            store.add_xavier(&format!("{kp}.queries"), arch.n_keypoints, arch.keypoint_hidden, &mut rng)?;
        }
        for side in [AttnSide::Deform, AttnSide::Retrieval] {
            let p = side.prefix();
            for l in 0..arch.attn_layers {
                for proj in ["q", "k", "v", "o"] {
                    add_linear(&mut store, &format!("{p}.l{l}.{proj}"), d, d, &mut rng)?;
                }
                add_layer_norm(&mut store, &format!("{p}.l{l}.ln1"), d)?;
                add_linear(&mut store, &format!("{p}.l{l}.ffn1"), d, arch.ffn_dim, &mut rng)?;
                add_linear(&mut store, &format!("{p}.l{l}.ffn2"), arch.ffn_dim, d, &mut rng)?;
                add_layer_norm(&mut store, &format!("{p}.l{l}.ln2"), d)?;
            }
        }
        add_linear(&mut store, "influence.l0", d, arch.influence_hidden, &mut rng)?;
        add_zero_linear(&mut store, "influence.l1", arch.influence_hidden, arch.n_cage())?;

        let token = if arch.lgf { "token" } else { "token_global" };
        add_linear(&mut store, &format!("{token}.l0"), d, arch.token_hidden, &mut rng)?;
        add_linear(&mut store, &format!("{token}.l1"), arch.token_hidden, arch.token_dim, &mut rng)?;

        let dec_in = arch.token_dim + 3 * arch.n_keypoints;
        for task in [DecoderTask::Reconstruct, DecoderTask::Deformed] {
            let p = task.prefix();
            add_linear(&mut store, &format!("{p}.l0"), dec_in, arch.decoder_hidden, &mut rng)?;
            add_linear(&mut store, &format!("{p}.l1"), arch.decoder_hidden, arch.decoder_hidden, &mut rng)?;
            add_linear(&mut store, &format!("{p}.l2"), arch.decoder_hidden, 3 * arch.decoder_points, &mut rng)?;
        }

        Ok(Self { arch, store })
    }

    /// SHA-256 over the architecture and every parameter that shapes database records.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        let mut names: Vec<&str> = self
            .store
            .params()
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| TOKEN_PATH_GROUPS.iter().any(|g| n.starts_with(g)))
            .collect();
        names.sort_unstable();
        for name in names {
            let p = self.store.param(self.store.id(name).expect("listed name"));
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::matrix(
        points.len(),
        3,
        points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    )
    .expect("n x 3")
}

pub fn tensor_points(t: &Tensor) -> Vec<Point> {
    t.data()
        .chunks_exact(3)
        .map(|c| Point::new(c[0], c[1], c[2]))
        .collect()
}

fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, store.expect_id(&format!("{name}.weight"))?);
    let b = g.param(store, store.expect_id(&format!("{name}.bias"))?);
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, store.expect_id(&format!("{name}.gain"))?);
    let bias = g.param(store, store.expect_id(&format!("{name}.bias"))?);
    g.layer_norm(x, gain, bias)
}

/// Shared per-point MLP, `N x 3 -> N x d`, ReLU after every layer.
pub fn encode_points(g: &mut Graph, bundle: &NetBundle, points: Var, branch: Branch) -> Result<Var> {
    let prefix = match branch {
        Branch::Full => "encoder",
        Branch::Partial => "part_encoder",
    };
    let mut x = points;
    for l in 0..bundle.arch.encoder_dims.len() {
        let y = linear(g, &bundle.store, &format!("{prefix}.l{l}"), x)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// Keypoints as softmax-weighted averages of input positions, one learned
/// query per keypoint. Returns an `N_K x 3` node.
pub fn predict_keypoints(g: &mut Graph, bundle: &NetBundle, points: Var, features: Var, branch: Branch) -> Result<Var> {
    let prefix = match branch {
        Branch::Full => "kp",
        Branch::Partial => "part_kp",
    };
    let store = &bundle.store;
    let h = linear(g, store, &format!("{prefix}.hidden"), features)?;
    let h = g.relu(h);
    let q = g.param(store, store.expect_id(&format!("{prefix}.queries"))?);
    let qt = g.transpose(q)?;
    let scores = g.matmul(h, qt)?;
    let scores = g.scale(scores, 1.0 / (bundle.arch.keypoint_hidden as f64).sqrt());
    let per_kp = g.transpose(scores)?;
    let weights = g.softmax(per_kp);
    g.matmul(weights, points)
}

/// Region membership around keypoints, with a fallback row for empty regions.
#[derive(Debug, Clone)]
pub struct LocalGroups {
    pub assignment: RegionAssignment,
    /// Rows pooled per keypoint: the region members, or the nearest point when empty.
    pub pooled_rows: Vec<Vec<usize>>,
    pub empty: Vec<bool>,
}

impl LocalGroups {
    pub fn build(pc: &PointCloud, keypoints: &[Point], radius: f64, n_ref: f64) -> Result<Self> {
        let assignment = region_query(pc, keypoints, radius, n_ref)?;
        let mut pooled_rows = Vec::with_capacity(keypoints.len());
        let mut empty = Vec::with_capacity(keypoints.len());
        for (region, k) in assignment.regions.iter().zip(keypoints) {
            if region.indices.is_empty() {
                let nearest = pc
                    .points()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, (p - k).norm_squared()))
                    .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
                    .0;
                pooled_rows.push(vec![nearest]);
                empty.push(true);
            } else {
                pooled_rows.push(region.indices.clone());
                empty.push(false);
            }
        }
        Ok(Self {
            assignment,
            pooled_rows,
            empty,
        })
    }

    pub fn densities(&self) -> Vec<f64> {
        self.assignment.densities()
    }
}

/// Max-pools point features inside each keypoint region, `N_K x d`.
pub fn aggregate_local(g: &mut Graph, features: Var, groups: &LocalGroups) -> Result<Var> {
    let mut rows = Vec::with_capacity(groups.pooled_rows.len());
    for idx in &groups.pooled_rows {
        let members = g.gather_rows(features, idx)?;
        rows.push(g.max_pool_rows(members)?);
    }
    g.concat_rows(&rows)
}

/// Multi-head self-attention stack with post-norm residual blocks. Also
/// returns every head's attention matrix.
pub fn self_attention_with_weights(
    g: &mut Graph,
    bundle: &NetBundle,
    local: Var,
    side: AttnSide,
) -> Result<(Var, Vec<Var>)> {
    let store = &bundle.store;
    let arch = &bundle.arch;
    let p = side.prefix();
    let heads = arch.attn_heads;
    let dh = arch.feature_dim() / heads;
    let mut x = local;
    let mut maps = Vec::new();
    for l in 0..arch.attn_layers {
        let q = linear(g, store, &format!("{p}.l{l}.q"), x)?;
        let k = linear(g, store, &format!("{p}.l{l}.k"), x)?;
        let v = linear(g, store, &format!("{p}.l{l}.v"), x)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax(logits);
            maps.push(attn);
            outs.push(g.matmul(attn, vh)?);
        }
        let joined = g.concat_cols(&outs)?;
        let o = linear(g, store, &format!("{p}.l{l}.o"), joined)?;
        let res = g.add(x, o)?;
        let y = layer_norm(g, store, &format!("{p}.l{l}.ln1"), res)?;
        let f = linear(g, store, &format!("{p}.l{l}.ffn1"), y)?;
        let f = g.relu(f);
        let f = linear(g, store, &format!("{p}.l{l}.ffn2"), f)?;
        let res = g.add(y, f)?;
        x = layer_norm(g, store, &format!("{p}.l{l}.ln2"), res)?;
    }
    Ok((x, maps))
}

/// Self-attention over region features; identity when GSA is disabled.
pub fn self_attention(g: &mut Graph, bundle: &NetBundle, local: Var, side: AttnSide) -> Result<Var> {
    if !bundle.arch.gsa {
        return Ok(local);
    }
    Ok(self_attention_with_weights(g, bundle, local, side)?.0)
}

/// Per-keypoint context consumed by the heads. With GSA disabled every row is
/// the global max-pooled point feature.
pub fn region_context(g: &mut Graph, bundle: &NetBundle, features: Var, local: Var, side: AttnSide) -> Result<Var> {
    if bundle.arch.gsa {
        self_attention(g, bundle, local, side)
    } else {
        let global = g.max_pool_rows(features)?;
        let rows = vec![global; bundle.arch.n_keypoints];
        g.concat_rows(&rows)
    }
}

/// Influence of each keypoint on each cage vertex, masked to its support.
pub fn influence_head(g: &mut Graph, bundle: &NetBundle, context: Var, mask: &[bool]) -> Result<Var> {
    let (n_k, n_c) = (bundle.arch.n_keypoints, bundle.arch.n_cage());
    if mask.len() != n_k * n_c {
        return Err(Error::DimensionMismatch(format!(
            "influence mask has {} entries, expected {n_k} x {n_c}",
            mask.len()
        )));
    }
    if let Some(j) = (0..n_c).find(|&j| (0..n_k).all(|i| !mask[i * n_c + j])) {
        return Err(Error::MaskCoverage(j));
    }
    let h = linear(g, &bundle.store, "influence.l0", context)?;
    let h = g.relu(h);
    let raw = linear(g, &bundle.store, "influence.l1", h)?;
    let m = g.constant(Tensor::matrix(
        n_k,
        n_c,
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?);
    g.mul(raw, m)
}

/// Retrieval tokens: `N_K x d_T` per-region tokens, or `1 x d_T` from the
/// global feature when local-global tokens are disabled.
pub fn token_head(g: &mut Graph, bundle: &NetBundle, features: Var, context: Var) -> Result<Var> {
    let (name, input) = if bundle.arch.lgf {
        ("token", context)
    } else {
        ("token_global", g.max_pool_rows(features)?)
    };
    let h = linear(g, &bundle.store, &format!("{name}.l0"), input)?;
    let h = g.relu(h);
    linear(g, &bundle.store, &format!("{name}.l1"), h)
}

/// The two auxiliary reconstruction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderTask {
    /// Regions of the shape itself.
    Reconstruct,
    /// Regions of the shape after deformation toward another shape.
    Deformed,
}

impl DecoderTask {
    fn prefix(self) -> &'static str {
        match self {
            DecoderTask::Reconstruct => "decoder.rec",
            DecoderTask::Deformed => "decoder.def",
        }
    }
}

/// Reconstructs region `region` as `M x 3` points from one token row and the
/// conditioning keypoints. Output is placed around that keypoint.
pub fn decode_region(
    g: &mut Graph,
    bundle: &NetBundle,
    task: DecoderTask,
    token: Var,
    keypoints: Var,
    region: usize,
) -> Result<Var> {
    let arch = &bundle.arch;
    let p = task.prefix();
    let flat = g.reshape(keypoints, &[1, 3 * arch.n_keypoints])?;
    let input = g.concat_cols(&[token, flat])?;
    let h = linear(g, &bundle.store, &format!("{p}.l0"), input)?;
    let h = g.relu(h);
    let h = linear(g, &bundle.store, &format!("{p}.l1"), h)?;
    let h = g.relu(h);
    let out = linear(g, &bundle.store, &format!("{p}.l2"), h)?;
    let out = g.reshape(out, &[arch.decoder_points, 3])?;
    let center = g.gather_rows(keypoints, &[region])?;
    g.add_bias(out, center)
}

/// Nodes produced by running a predictor branch over one cloud.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub points: Var,
    /// Shared-encoder features (used for pooling and tokens).
    pub features: Var,
    pub keypoints: Var,
    pub keypoint_values: Vec<Point>,
    pub groups: LocalGroups,
}

/// Encodes a cloud, predicts its keypoints with `branch`, and groups regions.
pub fn encode_shape(g: &mut Graph, bundle: &NetBundle, pc: &PointCloud, branch: Branch) -> Result<Encoded> {
    let points = g.constant(points_tensor(pc.points()));
    let features = encode_points(g, bundle, points, Branch::Full)?;
    let kp_features = match branch {
        Branch::Full => features,
        Branch::Partial => encode_points(g, bundle, points, Branch::Partial)?,
    };
    let keypoints = predict_keypoints(g, bundle, points, kp_features, branch)?;
    let keypoint_values = tensor_points(g.value(keypoints));
    let groups = LocalGroups::build(
        pc,
        &keypoint_values,
        bundle.arch.radius,
        bundle.arch.density_reference(),
    )?;
    Ok(Encoded {
        points,
        features,
        keypoints,
        keypoint_values,
        groups,
    })
}

/// Retrieval tokens for an encoded shape.
pub fn shape_tokens(g: &mut Graph, bundle: &NetBundle, enc: &Encoded) -> Result<Var> {
    let local = aggregate_local(g, enc.features, &enc.groups)?;
    let context = region_context(g, bundle, enc.features, local, AttnSide::Retrieval)?;
    token_head(g, bundle, enc.features, context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::geometry::chamfer_distance;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn bundle() -> NetBundle {
        NetBundle::new(ArchConfig::toy()).unwrap()
    }

    fn permutation(n: usize, seed: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    #[test]
    fn encoder_is_per_point() {
        let b = bundle();
        let pc = cloud(20, 1);
        let perm = permutation(20, 2);
        let shuffled = pc.select(&perm).unwrap();
        let mut g = Graph::new();
        let p0 = g.constant(points_tensor(pc.points()));
        let p1 = g.constant(points_tensor(shuffled.points()));
        let f0 = encode_points(&mut g, &b, p0, Branch::Full).unwrap();
        let f1 = encode_points(&mut g, &b, p1, Branch::Full).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(g.value(f1).row(r), g.value(f0).row(src));
        }
    }

    #[test]
    fn zero_encoder_gives_bias_pattern() {
        let mut b = bundle();
        for id in b.store.ids().collect::<Vec<_>>() {
            if b.store.param(id).name.starts_with("encoder.") {
                let fill = if b.store.param(id).name.ends_with("bias") { 0.25 } else { 0.0 };
                b.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = fill);
            }
        }
        let mut g = Graph::new();
        let p = g.constant(points_tensor(cloud(5, 3).points()));
        let f = encode_points(&mut g, &b, p, Branch::Full).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn keypoints_are_permutation_invariant_convex_combinations() {
        let b = bundle();
        let pc = cloud(40, 4);
        let shuffled = pc.select(&permutation(40, 5)).unwrap();
        let mut g = Graph::new();
        let e0 = encode_shape(&mut g, &b, &pc, Branch::Full).unwrap();
        let e1 = encode_shape(&mut g, &b, &shuffled, Branch::Full).unwrap();
        let (lo, hi) = pc.bounding_box();
        for (a, c) in e0.keypoint_values.iter().zip(&e1.keypoint_values) {
            assert!((a - c).norm() < 1e-6);
            for ax in 0..3 {
                assert!(a[ax] >= lo[ax] - 1e-12 && a[ax] <= hi[ax] + 1e-12);
            }
        }
    }

    #[test]
    fn single_point_cloud_keypoints_coincide() {
        let b = bundle();
        let pc = PointCloud::from_arrays(&[[0.1, -0.2, 0.3]]).unwrap();
        let mut g = Graph::new();
        let e = encode_shape(&mut g, &b, &pc, Branch::Full).unwrap();
        for k in &e.keypoint_values {
            assert!((k - pc.points()[0]).norm() < 1e-15);
        }
    }

    #[test]
    fn uniform_scores_give_centroid() {
        let mut b = bundle();
        let q = b.store.expect_id("kp.queries").unwrap();
        b.store.value_mut(q).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let pc = cloud(30, 6);
        let mut g = Graph::new();
        let e = encode_shape(&mut g, &b, &pc, Branch::Full).unwrap();
        for k in &e.keypoint_values {
            assert!((k - pc.centroid()).norm() < 1e-12);
        }
    }

    #[test]
    fn local_aggregation_is_columnwise_max() {
        let mut g = Graph::new();
        let feats = Tensor::matrix(4, 2, vec![1.0, 0.0, 3.0, -1.0, 2.0, 5.0, 0.0, 0.0]).unwrap();
        let f = g.constant(feats.clone());
        let pc = PointCloud::from_arrays(&[[0.0; 3], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let kps = [Point::new(0.0, 0.0, 0.0), Point::new(2.0, 0.0, 0.0), Point::new(9.0, 0.0, 0.0)];
        let groups = LocalGroups::build(&pc, &kps, 0.3, 10.0).unwrap();
        let l = aggregate_local(&mut g, f, &groups).unwrap();
        // Region 0 = rows {0,1,2}, region 1 = row 3, region 2 empty -> nearest row 3.
        assert_eq!(g.value(l).row(0), &[3.0, 5.0]);
        assert_eq!(g.value(l).row(1), feats.row(3));
        assert_eq!(g.value(l).row(2), feats.row(3));
        assert_eq!(groups.empty, vec![false, false, true]);

        // Duplicating a member leaves the pooled row unchanged.
        let mut dup = groups.clone();
        dup.pooled_rows[0].push(1);
        let l2 = aggregate_local(&mut g, f, &dup).unwrap();
        assert_eq!(g.value(l2).row(0), g.value(l).row(0));
    }

    #[test]
    fn attention_rows_sum_to_one_and_are_equivariant() {
        let b = bundle();
        let d = b.arch.feature_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let local = Tensor::matrix(3, d, data.clone()).unwrap();
        let perm = [2usize, 0, 1];
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| local.row(r).to_vec()).collect();
        let mut g = Graph::new();
        let l0 = g.constant(local);
        let l1 = g.constant(Tensor::matrix(3, d, permuted).unwrap());
        let (o0, maps) = self_attention_with_weights(&mut g, &b, l0, AttnSide::Deform).unwrap();
        let (o1, _) = self_attention_with_weights(&mut g, &b, l1, AttnSide::Deform).unwrap();
        for m in maps {
            for r in 0..3 {
                assert!((g.value(m).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        for (r, &src) in perm.iter().enumerate() {
            for (a, c) in g.value(o1).row(r).iter().zip(g.value(o0).row(src)) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_uniform_attention_hand_case() {
        // One head, identity value/output projections, zero query weights
        // (uniform attention), zero FFN: first residual block gives
        // layer_norm(x + mean(x)).
        let arch = ArchConfig {
            encoder_dims: vec![4],
            attn_heads: 1,
            attn_layers: 1,
            ..ArchConfig::toy()
        };
        let mut b = NetBundle::new(arch).unwrap();
        let s = &mut b.store;
        let set = |s: &mut ParamStore, name: &str, f: &dyn Fn(usize) -> f64| {
            let id = s.expect_id(name).unwrap();
            let t = s.value_mut(id);
            let c = t.cols();
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v = f(k / c * 1000 + k % c);
            }
        };
        let ident = |k: usize| if k / 1000 == k % 1000 { 1.0 } else { 0.0 };
        let zero = |_k: usize| 0.0;
        for (name, f) in [
            ("attn_def.l0.q.weight", &zero as &dyn Fn(usize) -> f64),
            ("attn_def.l0.v.weight", &ident),
            ("attn_def.l0.o.weight", &ident),
            ("attn_def.l0.ffn2.weight", &zero),
        ] {
            set(s, name, f);
        }
        let x = Tensor::matrix(3, 4, vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.5, 3.0, 1.0, -2.0, 0.0, 1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = self_attention_with_weights(&mut g, &b, xv, AttnSide::Deform).unwrap();
        let mean: Vec<f64> = (0..4).map(|j| (0..3).map(|i| x.row(i)[j]).sum::<f64>() / 3.0).collect();
        for i in 0..3 {
            let pre: Vec<f64> = x.row(i).iter().zip(&mean).map(|(a, m)| a + m).collect();
            let mu = pre.iter().sum::<f64>() / 4.0;
            let var = pre.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            let ln: Vec<f64> = pre.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect();
            // Second block adds ffn2 bias (zero) -> layer norm of an already normalized row.
            let mu2 = ln.iter().sum::<f64>() / 4.0;
            let var2 = ln.iter().map(|v| (v - mu2).powi(2)).sum::<f64>() / 4.0;
            for j in 0..4 {
                let expected = (ln[j] - mu2) / (var2 + 1e-5).sqrt();
                assert!((g.value(out).row(i)[j] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn influence_head_masks_and_starts_at_zero() {
        let b = bundle();
        let (n_k, n_c) = (b.arch.n_keypoints, b.arch.n_cage());
        let mut g = Graph::new();
        let ctx = g.constant(Tensor::filled(&[n_k, b.arch.feature_dim()], 0.7));
        let mask: Vec<bool> = (0..n_k * n_c).map(|k| k % n_c % n_k == k / n_c).collect();
        let inf = influence_head(&mut g, &b, ctx, &mask).unwrap();
        assert!(g.value(inf).data().iter().all(|&v| v == 0.0));

        let mut b2 = b.clone();
        let w = b2.store.expect_id("influence.l1.bias").unwrap();
        b2.store.value_mut(w).data_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut g = Graph::new();
        let ctx = g.constant(Tensor::filled(&[n_k, b.arch.feature_dim()], 0.7));
        let inf = influence_head(&mut g, &b2, ctx, &mask).unwrap();
        for (v, m) in g.value(inf).data().iter().zip(&mask) {
            assert_eq!(*v, if *m { 1.0 } else { 0.0 });
        }
        let mut uncovered = mask.clone();
        for i in 0..n_k {
            uncovered[i * n_c] = false;
        }
        assert!(matches!(influence_head(&mut g, &b, ctx, &uncovered), Err(Error::MaskCoverage(0))));
    }

    #[test]
    fn tokens_are_deterministic_and_concatenate() {
        let b = bundle();
        let pc = cloud(50, 10);
        let run = || {
            let mut g = Graph::new();
            let e = encode_shape(&mut g, &b, &pc, Branch::Full).unwrap();
            let t = shape_tokens(&mut g, &b, &e).unwrap();
            g.value(t).clone()
        };
        let (t0, t1) = (run(), run());
        assert_eq!(t0, t1);
        assert_eq!(t0.shape(), &[b.arch.n_keypoints, b.arch.token_dim]);

        let lgf_off = NetBundle::new(ArchConfig { lgf: false, ..ArchConfig::toy() }).unwrap();
        let mut g = Graph::new();
        let e = encode_shape(&mut g, &lgf_off, &pc, Branch::Full).unwrap();
        let t = shape_tokens(&mut g, &lgf_off, &e).unwrap();
        assert_eq!(g.value(t).shape(), &[1, lgf_off.arch.token_dim]);
    }

    #[test]
    fn decoder_output_shape_and_determinism() {
        let b = bundle();
        let mut g = Graph::new();
        let tok = g.constant(Tensor::filled(&[1, b.arch.token_dim], 0.1));
        let kps = g.constant(Tensor::filled(&[b.arch.n_keypoints, 3], 0.2));
        let a = decode_region(&mut g, &b, DecoderTask::Reconstruct, tok, kps, 1).unwrap();
        let c = decode_region(&mut g, &b, DecoderTask::Reconstruct, tok, kps, 1).unwrap();
        assert_eq!(g.value(a).shape(), &[b.arch.decoder_points, 3]);
        assert_eq!(g.value(a), g.value(c));
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let mut b = bundle();
        b.store.train_only(&["decoder."]);
        let target = cloud(10, 11);
        let arch = b.arch.clone();
        let report = grad_check(
            &mut b.store,
            |g, s| {
                let bundle = NetBundle { arch: arch.clone(), store: s.clone() };
                let tok = g.constant(Tensor::filled(&[1, arch.token_dim], 0.3));
                let kps = g.constant(points_tensor(&target.points()[..arch.n_keypoints]));
                let out = decode_region(g, &bundle, DecoderTask::Deformed, tok, kps, 0)?;
                let gt = g.constant(points_tensor(target.points()));
                g.chamfer(out, gt)
            },
            1e-6,
            64,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn fingerprint_ignores_deformation_params() {
        let b = bundle();
        let mut other = b.clone();
        let id = other.store.expect_id("influence.l0.bias").unwrap();
        other.store.value_mut(id).data_mut()[0] = 5.0;
        assert_eq!(b.fingerprint(), other.fingerprint());
        let id = other.store.expect_id("token.l1.bias").unwrap();
        other.store.value_mut(id).data_mut()[0] = 5.0;
        assert_ne!(b.fingerprint(), other.fingerprint());
    }

    #[test]
    fn gsa_flag_keeps_keypoints() {
        let on = bundle();
        let off = NetBundle::new(ArchConfig { gsa: false, ..ArchConfig::toy() }).unwrap();
        let pc = cloud(30, 12);
        let mut g = Graph::new();
        let a = encode_shape(&mut g, &on, &pc, Branch::Full).unwrap();
        let c = encode_shape(&mut g, &off, &pc, Branch::Full).unwrap();
        assert_eq!(a.keypoint_values, c.keypoint_values);
        assert!(off.arch.check_flags(Some(true), None).is_err());
        assert!(off.arch.check_flags(Some(false), Some(true)).is_ok());
        let _ = chamfer_distance(&pc, &pc);
    }
}
