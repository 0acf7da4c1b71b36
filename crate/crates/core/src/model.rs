//! Full forward pass, scoring and checkpoints.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape, Var};
use crate::error::{bail, Error, Result};
use crate::fusion::{fuse_on_tape, project_on_tape, similarity_features, FusionConfig, FusionMode};
use crate::graphs::{propagate_ii_on_tape, propagate_ui_on_tape, InteractionGraph, ItemItemGraph};
use crate::numerics::{dot, DenseMatrix, Rng, NORM_EPS};

const CHECKPOINT_MAGIC: &[u8; 4] = b"CM3C";
pub const CHECKPOINT_VERSION: u16 = 1;
/// Mixing coefficient used outside of training steps.
pub const EVAL_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub hidden_dim: usize,
    pub leaky_slope: f64,
    pub modalities: Vec<String>,
    pub input_dims: Vec<usize>,
    pub n_users: usize,
    pub n_items: usize,
    pub layers_ui: usize,
    pub layers_ii: usize,
    pub knn_k: usize,
    /// L2-normalize final user and item rows before loss and scoring.
    pub normalize: bool,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// Number of `d`-wide segments: one per modality plus the fused block.
    pub fn segments(&self) -> usize {
        self.modalities.len() + usize::from(self.fusion.mode != FusionMode::None)
    }

    /// Width of user and item representations.
    pub fn width(&self) -> usize {
        self.segments() * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden_dim == 0 {
            bail!(Config, "latent and hidden dimensions must be positive");
        }
        if self.modalities.is_empty() {
            bail!(Config, "at least one modality is required");
        }
        if self.modalities.len() != self.input_dims.len() {
            bail!(Config, "{} modality names but {} input dims", self.modalities.len(), self.input_dims.len());
        }
        if self.input_dims.contains(&0) {
            bail!(Config, "modality input dimensions must be positive");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            bail!(Config, "leaky-relu slope must be in (0, 1)");
        }
        if self.n_users == 0 || self.n_items == 0 {
            bail!(Config, "model needs at least one user and one item");
        }
        self.fusion.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub projectors: Vec<Projector>,
    /// `|U| x width` user table.
    pub users: Param,
    /// `|U| x segments` preference weights.
    pub preferences: Param,
}

impl ModelParams {
    /// Every trainable tensor in a fixed order.
    pub fn all(&self) -> Vec<&Param> {
        let mut out = Vec::with_capacity(3 * self.projectors.len() + 2);
        for p in &self.projectors {
            out.extend([&p.w1, &p.b1, &p.w2]);
        }
        out.push(&self.users);
        out.push(&self.preferences);
        out
    }

    pub fn all_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::with_capacity(3 * self.projectors.len() + 2);
        for p in &mut self.projectors {
            out.extend([&mut p.w1, &mut p.b1, &mut p.w2]);
        }
        out.push(&mut self.users);
        out.push(&mut self.preferences);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.all().iter().all(|p| p.value.is_finite())
    }

    fn from_tensors(cfg: &ModelConfig, mut tensors: Vec<(String, DenseMatrix)>) -> Result<Self> {
        let expected = 3 * cfg.modalities.len() + 2;
        if tensors.len() != expected {
            bail!(Format, "checkpoint holds {} tensors, expected {expected}", tensors.len());
        }
        let mut it = tensors.drain(..).map(|(n, v)| Param::new(n, v));
        let mut projectors = Vec::new();
        for _ in 0..cfg.modalities.len() {
            let (w1, b1, w2) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
            projectors.push(Projector { w1, b1, w2 });
        }
        let params = Self {
            projectors,
            users: it.next().unwrap(),
            preferences: it.next().unwrap(),
        };
        let fresh = init_params(cfg, &mut Rng::new(0))?;
        for (got, want) in params.all().iter().zip(fresh.all()) {
            if got.name != want.name || got.value.shape() != want.value.shape() {
                bail!(
                    Format,
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                );
            }
        }
        Ok(params)
    }
}

/// Bound of the Xavier (Glorot) uniform distribution.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
    let b = xavier_bound(rows, cols);
    DenseMatrix::from_fn(rows, cols, |_, _| rng.uniform_range(-b, b))
}

pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let projectors = cfg
        .modalities
        .iter()
        .zip(&cfg.input_dims)
        .map(|(name, &dm)| Projector {
            w1: Param::new(format!("{name}.w1"), xavier(rng, dm, cfg.hidden_dim)),
            b1: Param::new(format!("{name}.b1"), DenseMatrix::zeros(1, cfg.hidden_dim)),
            w2: Param::new(format!("{name}.w2"), xavier(rng, cfg.hidden_dim, cfg.d)),
        })
        .collect();
    Ok(ModelParams {
        projectors,
        users: Param::new("users", xavier(rng, cfg.n_users, cfg.width())),
        preferences: Param::new("preferences", DenseMatrix::filled(cfg.n_users, cfg.segments(), 1.0)),
    })
}

/// Everything the forward pass reads besides the parameters.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub features: Vec<DenseMatrix>,
    pub interactions: InteractionGraph,
    pub item_graph: ItemItemGraph,
}

impl ModelInputs {
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.features.len() != cfg.modalities.len() {
            bail!(Config, "{} feature matrices for {} modalities", self.features.len(), cfg.modalities.len());
        }
        for (f, (&dm, name)) in self.features.iter().zip(cfg.input_dims.iter().zip(&cfg.modalities)) {
            if f.rows() != cfg.n_items {
                bail!(Data, "modality {name} has {} rows, expected {} items", f.rows(), cfg.n_items);
            }
            if f.cols() != dm {
                bail!(Config, "modality {name} has {} columns, expected {dm}", f.cols());
            }
        }
        if self.interactions.n_users() != cfg.n_users || self.interactions.n_items() != cfg.n_items {
            bail!(Config, "interaction graph size does not match model config");
        }
        if self.item_graph.matrix().rows() != cfg.n_items {
            bail!(Config, "item-item graph size does not match model config");
        }
        Ok(())
    }
}

/// Variables of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Leaves in [`ModelParams::all`] order.
    pub params: Vec<Var>,
    /// Projected modality blocks.
    pub blocks: Vec<Var>,
    /// Concatenated initial item representation.
    pub items_initial: Var,
    pub users: Var,
    pub items: Var,
}

/// Records the forward pass with mixing coefficient `lambda`.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    inputs: &ModelInputs,
    cfg: &ModelConfig,
    lambda: f64,
) -> Result<ForwardPass> {
    inputs.check(cfg)?;
    let vars: Vec<Var> = params.all().iter().map(|p| tape.leaf(p.value.clone())).collect();
    let mut blocks = Vec::with_capacity(cfg.modalities.len());
    for (m, x) in inputs.features.iter().enumerate() {
        let xv = tape.constant(x.clone());
        let (w1, b1, w2) = (vars[3 * m], vars[3 * m + 1], vars[3 * m + 2]);
        blocks.push(project_on_tape(tape, xv, w1, b1, w2, cfg.leaky_slope));
    }
    let fused = fuse_on_tape(tape, &blocks, lambda, cfg.fusion.mode, cfg.fusion.singular_tol);
    let mut parts = blocks.clone();
    parts.extend(fused);
    let items_initial = tape.concat_cols(&parts);

    let n = vars.len();
    let (users_emb, prefs) = (vars[n - 2], vars[n - 1]);
    let (e, x) = propagate_ui_on_tape(tape, &inputs.interactions, users_emb, items_initial, cfg.layers_ui);
    let mut users = tape.scale_segments(e, prefs);
    let mut items = propagate_ii_on_tape(tape, &inputs.item_graph, x, cfg.layers_ii);
    if cfg.normalize {
        users = tape.normalize_rows(users, NORM_EPS);
        items = tape.normalize_rows(items, NORM_EPS);
    }
    Ok(ForwardPass {
        params: vars,
        blocks,
        items_initial,
        users,
        items,
    })
}

/// Final user and item representations.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    pub users: DenseMatrix,
    pub items: DenseMatrix,
    /// Deterministic fused item features (similarity source).
    pub fused: DenseMatrix,
}

pub fn forward(params: &ModelParams, inputs: &ModelInputs, cfg: &ModelConfig, lambda: f64) -> Result<Representations> {
    let mut tape = Tape::new();
    let pass = forward_on_tape(&mut tape, params, inputs, cfg, lambda)?;
    let fused = fused_features(&tape, &pass, cfg);
    Ok(Representations {
        users: tape.value(pass.users).clone(),
        items: tape.value(pass.items).clone(),
        fused,
    })
}

/// Fused features at the fixed evaluation coefficient, from the projected
/// blocks of a recorded pass. The result carries no gradient.
pub fn fused_features(tape: &Tape, pass: &ForwardPass, cfg: &ModelConfig) -> DenseMatrix {
    let blocks: Vec<&DenseMatrix> = pass.blocks.iter().map(|&b| tape.value(b)).collect();
    similarity_features(&blocks, EVAL_LAMBDA, cfg.fusion.mode, cfg.fusion.singular_tol)
}

/// Concatenated initial item representation without propagation.
pub fn item_initial_rep(params: &ModelParams, inputs: &ModelInputs, cfg: &ModelConfig, lambda: f64) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let pass = forward_on_tape(&mut tape, params, inputs, cfg, lambda)?;
    Ok(tape.value(pass.items_initial).clone())
}

/// Scales segment `s` of user row `u` by `w[u, s]`.
pub fn mine_preferences(users: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    if w.rows() != users.rows() {
        bail!(Config, "preference weights cover {} users, embeddings {}", w.rows(), users.rows());
    }
    if w.cols() == 0 || !users.cols().is_multiple_of(w.cols()) {
        bail!(Config, "width {} is not divisible into {} segments", users.cols(), w.cols());
    }
    let mut tape = Tape::new();
    let e = tape.constant(users.clone());
    let wv = tape.constant(w.clone());
    let out = tape.scale_segments(e, wv);
    Ok(tape.value(out).clone())
}

pub fn score(users: &DenseMatrix, items: &DenseMatrix, u: usize, i: usize) -> Result<f64> {
    if u >= users.rows() || i >= items.rows() {
        bail!(Data, "score index ({u}, {i}) out of range");
    }
    Ok(dot(users.row(u), items.row(i)))
}

/// Indices of the `k` highest-scoring items for user `u`, skipping `exclude`.
/// Ties go to the lower item index.
pub fn top_k(users: &DenseMatrix, items: &DenseMatrix, u: usize, k: usize, exclude: &[usize]) -> Result<Vec<usize>> {
    if u >= users.rows() {
        bail!(Data, "user {u} out of range");
    }
    let mut masked = vec![false; items.rows()];
    for &i in exclude {
        if i < masked.len() {
            masked[i] = true;
        }
    }
    let mut scored: Vec<(f64, usize)> = (0..items.rows())
        .filter(|&i| !masked[i])
        .map(|i| (dot(users.row(u), items.row(i)), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Parameters plus the configuration needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Free-form run metadata (training config, seed, epoch).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Internal(format!("checkpoint header: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        let tensors = self.params.all();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for p in tensors {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Cursor { bytes, pos: 0 };
        if rd.take(4)? != CHECKPOINT_MAGIC {
            bail!(Format, "not a CM3C checkpoint");
        }
        let version = u16::from_le_bytes(rd.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let hlen = rd.u32()? as usize;
        let header: Header =
            serde_json::from_slice(rd.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.config.validate()?;
        let count = rd.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rows = rd.u32()? as usize;
            let cols = rd.u32()? as usize;
            let raw = rd.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| {
                Error::Format("tensor size overflows".into())
            })?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let value = DenseMatrix::from_vec(rows, cols, data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, value));
        }
        if rd.pos != bytes.len() {
            bail!(Format, "trailing bytes after checkpoint tensors");
        }
        let params = ModelParams::from_tensors(&header.config, tensors)?;
        Ok(Self {
            config: header.config,
            params,
            meta: header.meta,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let ctx = || path.display().to_string();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(ctx(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.bytes.len() - self.pos {
            bail!(Format, "unexpected end of checkpoint");
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::build_interaction_graph;
    use crate::numerics::SparseMatrix;

    fn config(m: usize, d: usize, users: usize, items: usize) -> ModelConfig {
        ModelConfig {
            d,
            hidden_dim: 2 * d,
            leaky_slope: 0.01,
            modalities: (0..m).map(|k| format!("m{k}")).collect(),
            input_dims: vec![3; m],
            n_users: users,
            n_items: items,
            layers_ui: 2,
            layers_ii: 1,
            knn_k: 1,
            normalize: true,
            fusion: FusionConfig::default(),
        }
    }

    fn inputs(cfg: &ModelConfig, rng: &mut Rng) -> ModelInputs {
        let edges: Vec<(usize, usize)> = (0..cfg.n_users).map(|u| (u, u % cfg.n_items)).collect();
        ModelInputs {
            features: (0..cfg.modalities.len())
                .map(|_| DenseMatrix::from_fn(cfg.n_items, 3, |_, _| rng.normal()))
                .collect(),
            interactions: build_interaction_graph(&edges, cfg.n_users, cfg.n_items).unwrap(),
            item_graph: ItemItemGraph::from_matrix(SparseMatrix::identity(cfg.n_items), 1, vec![1.0]).unwrap(),
        }
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        assert!((xavier_bound(64, 64) - 0.216_506_350_946_109_66).abs() < 1e-12);
        let cfg = config(2, 4, 5, 6);
        let p = init_params(&cfg, &mut Rng::new(9)).unwrap();
        let q = init_params(&cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(p, q);
        for proj in &p.projectors {
            assert!(proj.b1.value.data().iter().all(|&v| v == 0.0));
            let b = xavier_bound(3, 8);
            assert!(proj.w1.value.data().iter().all(|v| v.abs() <= b));
        }
        assert!(p.preferences.value.data().iter().all(|&v| v == 1.0));
        assert_eq!(p.users.value.shape(), (5, 12));
    }

    #[test]
    fn block_layout() {
        let mut rng = Rng::new(1);
        let cfg = config(2, 4, 3, 4);
        let params = init_params(&cfg, &mut rng).unwrap();
        let x = item_initial_rep(&params, &inputs(&cfg, &mut rng), &cfg, 0.5).unwrap();
        assert_eq!(x.cols(), 12);
        for r in 0..x.rows() {
            for s in 0..3 {
                let n: f64 = (4 * s..4 * s + 4).map(|c| x.get(r, c).powi(2)).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-6);
            }
        }

        let cfg1 = config(1, 4, 3, 4);
        let params = init_params(&cfg1, &mut rng).unwrap();
        let x = item_initial_rep(&params, &inputs(&cfg1, &mut rng), &cfg1, 0.3).unwrap();
        assert_eq!(x.col_block(0, 4), x.col_block(4, 8));
    }

    #[test]
    fn preference_mining() {
        let e = DenseMatrix::from_fn(2, 6, |r, c| (r * 6 + c) as f64);
        assert_eq!(mine_preferences(&e, &DenseMatrix::filled(2, 3, 1.0)).unwrap(), e);
        let w = DenseMatrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let out = mine_preferences(&e, &w).unwrap();
        assert_eq!(out.row(0), &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(out.row(1), e.row(1));
        assert!(matches!(
            mine_preferences(&e, &DenseMatrix::filled(2, 4, 1.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn passthrough_forward() {
        let mut rng = Rng::new(2);
        let mut cfg = config(2, 3, 4, 5);
        cfg.layers_ui = 0;
        cfg.layers_ii = 0;
        cfg.normalize = false;
        let params = init_params(&cfg, &mut rng).unwrap();
        let inp = inputs(&cfg, &mut rng);
        let reps = forward(&params, &inp, &cfg, 0.5).unwrap();
        assert_eq!(reps.users, params.users.value);
        assert_eq!(reps.items, item_initial_rep(&params, &inp, &cfg, 0.5).unwrap());
    }

    #[test]
    fn scoring_and_topk() {
        let u = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let i = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        assert_eq!(score(&u, &i, 0, 0).unwrap(), 1.0);
        assert_eq!(score(&u, &i, 0, 1).unwrap(), 0.0);
        assert!(score(&u, &i, 1, 0).is_err());
        assert_eq!(top_k(&u, &i, 0, 2, &[]).unwrap(), vec![0, 2]);
        assert_eq!(top_k(&u, &i, 0, 5, &[0]).unwrap(), vec![2, 1]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = Rng::new(3);
        let cfg = config(2, 3, 4, 5);
        let params = init_params(&cfg, &mut rng).unwrap();
        let ck = Checkpoint {
            config: cfg,
            params,
            meta: serde_json::json!({"epoch": 3}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cm3c");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"CM3X\x01\x00"), Err(Error::Format(_))));
    }

    #[test]
    fn fusion_none_drops_block() {
        let mut cfg = config(2, 4, 3, 4);
        cfg.fusion.mode = FusionMode::None;
        assert_eq!(cfg.width(), 8);
        let mut rng = Rng::new(4);
        let params = init_params(&cfg, &mut rng).unwrap();
        let reps = forward(&params, &inputs(&cfg, &mut rng), &cfg, 0.5).unwrap();
        assert_eq!(reps.items.cols(), 8);
        assert_eq!(reps.fused.cols(), 8);
    }
}
