//! Modality projection and spherical fusion.
//!
//! Each modality is projected into the shared latent space by a two-layer
//! network and L2-normalized, so every projected row lies on the unit sphere.
//! Modalities are then fused with a De Casteljau chain of spherical linear
//! interpolations, which keeps the result on the sphere as well.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Tape, Var};
use crate::error::{bail, Result};
use crate::numerics::{dot, l2_normalize_rows, norm, DenseMatrix, Rng, NORM_EPS};

pub const DEFAULT_SINGULAR_TOL: f64 = 1e-4;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
const UNIT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub input_dims: Vec<usize>,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub leaky_slope: f64,
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            bail!(Config, "every modality needs a positive input dimension");
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            bail!(Config, "projector dimensions must be positive");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            bail!(Config, "leaky-relu slope must be in (0, 1), got {}", self.leaky_slope);
        }
        Ok(())
    }
}

/// How modality vectors are merged into the shared block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Spherical De Casteljau chain.
    Slerp,
    /// Plain linear interpolation chain, not renormalized.
    Linear,
    /// No fused block at all.
    None,
}

impl std::str::FromStr for FusionMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slerp" => Ok(Self::Slerp),
            "linear" => Ok(Self::Linear),
            "none" => Ok(Self::None),
            other => bail!(Config, "unknown fusion mode '{other}' (slerp|linear|none)"),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Slerp => "slerp",
            Self::Linear => "linear",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaPolicy {
    SamplePerStep,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Beta(alpha, alpha) parameter for sampled mixing coefficients.
    pub alpha: f64,
    pub lambda_policy: LambdaPolicy,
    pub singular_tol: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Slerp,
            alpha: 1.0,
            lambda_policy: LambdaPolicy::SamplePerStep,
            singular_tol: DEFAULT_SINGULAR_TOL,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            bail!(Config, "alpha must be positive, got {}", self.alpha);
        }
        if let LambdaPolicy::Fixed(l) = self.lambda_policy {
            if !(0.0..=1.0).contains(&l) {
                bail!(Config, "fixed lambda must be in [0, 1], got {l}");
            }
        }
        if !(self.singular_tol > 0.0) {
            bail!(Config, "singular_tol must be positive");
        }
        Ok(())
    }

    /// Mixing coefficient for one step under this policy.
    pub fn draw_lambda(&self, rng: &mut Rng) -> Result<f64> {
        match self.lambda_policy {
            LambdaPolicy::Fixed(l) => Ok(l),
            LambdaPolicy::SamplePerStep => rng.beta(self.alpha),
        }
    }
}

/// Weights of one modality's projector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorWeights {
    /// `d_m x d_1`
    pub w1: DenseMatrix,
    /// `1 x d_1`
    pub b1: DenseMatrix,
    /// `d_1 x d`
    pub w2: DenseMatrix,
}

/// `normalize(σ(X W1 + b1) W2)` recorded on the tape.
pub fn project_on_tape(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    slope: f64,
) -> Var {
    let h = tape.matmul(x, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.leaky_relu(h, slope);
    let out = tape.matmul(h, w2);
    tape.normalize_rows(out, NORM_EPS)
}

/// Projects a raw feature matrix into the latent space.
pub fn project_modality(x: &DenseMatrix, w: &ProjectorWeights, slope: f64) -> Result<DenseMatrix> {
    if x.cols() != w.w1.rows()
        || w.b1.shape() != (1, w.w1.cols())
        || w.w2.rows() != w.w1.cols()
    {
        bail!(
            Config,
            "projector shapes inconsistent: x {:?}, w1 {:?}, b1 {:?}, w2 {:?}",
            x.shape(),
            w.w1.shape(),
            w.b1.shape(),
            w.w2.shape()
        );
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w1 = tape.constant(w.w1.clone());
    let b1 = tape.constant(w.b1.clone());
    let w2 = tape.constant(w.w2.clone());
    let out = project_on_tape(&mut tape, xv, w1, b1, w2, slope);
    Ok(tape.value(out).clone())
}

#[inline]
fn is_singular(theta: f64, tol: f64) -> bool {
    theta < tol || theta > std::f64::consts::PI - tol
}

/// Slerp without unit-norm validation. `lambda = 1` returns `a`,
/// `lambda = 0` returns `b`. Near-parallel and near-antipodal pairs fall back
/// to renormalized linear interpolation.
pub fn slerp_unchecked(a: &[f64], b: &[f64], lambda: f64, singular_tol: f64) -> Vec<f64> {
    let c = dot(a, b).clamp(-1.0, 1.0);
    let theta = c.acos();
    if is_singular(theta, singular_tol) {
        let mut v: Vec<f64> = a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
        let n = norm(&v);
        if n > NORM_EPS {
            v.iter_mut().for_each(|x| *x /= n);
        } else {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        return v;
    }
    let s = theta.sin();
    let p = (lambda * theta).sin() / s;
    let q = ((1.0 - lambda) * theta).sin() / s;
    a.iter().zip(b).map(|(x, y)| p * x + q * y).collect()
}

/// Spherical linear interpolation between two unit vectors.
pub fn slerp(a: &[f64], b: &[f64], lambda: f64, singular_tol: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        bail!(InvalidInput, "slerp length mismatch {} vs {}", a.len(), b.len());
    }
    for (name, v) in [("a", a), ("b", b)] {
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_TOL {
            bail!(InvalidInput, "slerp argument {name} is not unit norm (|{name}| = {n})");
        }
    }
    Ok(slerp_unchecked(a, b, lambda, singular_tol))
}

/// Folds the modality vectors left to right, mixing each new modality into
/// the running result: `f(x_{M-1}, f(.., f(x_1, x_0)))`.
pub fn fuse_with_lambda(vectors: &[&[f64]], lambda: f64, cfg: &FusionConfig) -> Result<Vec<f64>> {
    let Some((first, rest)) = vectors.split_first() else {
        bail!(InvalidInput, "cannot fuse an empty list of modality vectors");
    };
    let mut acc = first.to_vec();
    for v in rest {
        acc = match cfg.mode {
            FusionMode::Linear => v.iter().zip(&acc).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect(),
            _ => slerp(v, &acc, lambda, cfg.singular_tol)?,
        };
    }
    Ok(acc)
}

/// Fuses one item's modality vectors, drawing the mixing coefficient from
/// the configured policy.
pub fn fuse(vectors: &[&[f64]], cfg: &FusionConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        bail!(InvalidInput, "cannot fuse an empty list of modality vectors");
    }
    let lambda = cfg.draw_lambda(rng)?;
    fuse_with_lambda(vectors, lambda, cfg)
}

/// Row-wise fusion of whole matrices (no gradient); `None` in mode `none`.
pub fn fuse_matrices(
    blocks: &[&DenseMatrix],
    lambda: f64,
    mode: FusionMode,
    singular_tol: f64,
) -> Option<DenseMatrix> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = blocks.iter().map(|b| tape.constant((*b).clone())).collect();
    fuse_on_tape(&mut tape, &vars, lambda, mode, singular_tol).map(|v| tape.value(v).clone())
}

/// Mixed features used for similarity scores: the deterministic fusion of
/// the projected blocks. In mode `none` the blocks are concatenated and
/// normalized instead, so cosine similarity averages the per-modality ones.
pub fn similarity_features(blocks: &[&DenseMatrix], lambda: f64, mode: FusionMode, singular_tol: f64) -> DenseMatrix {
    match fuse_matrices(blocks, lambda, mode, singular_tol) {
        Some(m) => m,
        None => l2_normalize_rows(&DenseMatrix::hconcat(blocks), NORM_EPS),
    }
}

/// Largest `|‖fuse(..)‖ - 1|` over `trials` random chains with 1 to
/// `max_modalities` unit vectors, dimensions drawn from `dims` and a random
/// mixing coefficient per chain.
pub fn chain_norm_deviation(
    trials: usize,
    mode: FusionMode,
    dims: &[usize],
    max_modalities: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if dims.is_empty() || dims.contains(&0) || max_modalities == 0 {
        bail!(Config, "chain check needs positive dimensions and at least one modality");
    }
    if mode == FusionMode::None {
        bail!(Config, "fusion mode 'none' produces no fused vector to check");
    }
    let cfg = FusionConfig {
        mode,
        ..FusionConfig::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = dims[rng.below(dims.len())];
        let m = 1 + rng.below(max_modalities);
        let vecs: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        let lambda = rng.uniform();
        let out = fuse_with_lambda(&refs, lambda, &cfg)?;
        worst = worst.max((norm(&out) - 1.0).abs());
    }
    Ok(worst)
}

struct SlerpRows {
    lambda: f64,
    tol: f64,
}

impl Function for SlerpRows {
    fn name(&self) -> &'static str {
        "slerp_rows"
    }

    fn backward(&self, x: &[&DenseMatrix], out: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        let (a, b) = (x[0], x[1]);
        let lam = self.lambda;
        let mut da = DenseMatrix::zeros(a.rows(), a.cols());
        let mut db = DenseMatrix::zeros(b.rows(), b.cols());
        for r in 0..a.rows() {
            let (ar, br, gr) = (a.row(r), b.row(r), g.row(r));
            let c = dot(ar, br).clamp(-1.0, 1.0);
            let theta = c.acos();
            if is_singular(theta, self.tol) {
                // y = n / |n| with n = λa + (1-λ)b
                let n: Vec<f64> = ar.iter().zip(br).map(|(p, q)| lam * p + (1.0 - lam) * q).collect();
                let nn = norm(&n);
                if nn <= NORM_EPS {
                    continue;
                }
                let y = out.row(r);
                let proj = dot(y, gr);
                for k in 0..ar.len() {
                    let dn = (gr[k] - y[k] * proj) / nn;
                    da.row_mut(r)[k] = lam * dn;
                    db.row_mut(r)[k] = (1.0 - lam) * dn;
                }
                continue;
            }
            let s = theta.sin();
            let (sl, sm) = ((lam * theta).sin(), ((1.0 - lam) * theta).sin());
            let p = sl / s;
            let q = sm / s;
            let cos_t = theta.cos();
            let dp = (lam * (lam * theta).cos() * s - sl * cos_t) / (s * s);
            let dq = ((1.0 - lam) * ((1.0 - lam) * theta).cos() * s - sm * cos_t) / (s * s);
            // dθ/dc = -1 / sin θ
            let dc = -(dot(gr, ar) * dp + dot(gr, br) * dq) / s;
            for k in 0..ar.len() {
                da.row_mut(r)[k] = p * gr[k] + dc * br[k];
                db.row_mut(r)[k] = q * gr[k] + dc * ar[k];
            }
        }
        vec![Some(da), Some(db)]
    }
}

impl Tape {
    /// Row-wise slerp of two equally shaped matrices.
    pub fn slerp_rows(&mut self, a: Var, b: Var, lambda: f64, singular_tol: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "slerp_rows shape mismatch");
        let mut value = DenseMatrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&slerp_unchecked(av.row(r), bv.row(r), lambda, singular_tol));
        }
        self.record(value, &[a, b], SlerpRows { lambda, tol: singular_tol })
    }
}

/// Fused block for every row, recorded on the tape; `None` in mode `none`.
pub fn fuse_on_tape(
    tape: &mut Tape,
    blocks: &[Var],
    lambda: f64,
    mode: FusionMode,
    singular_tol: f64,
) -> Option<Var> {
    let (&first, rest) = blocks.split_first()?;
    if mode == FusionMode::None {
        return None;
    }
    let mut acc = first;
    for &next in rest {
        acc = match mode {
            FusionMode::Slerp => tape.slerp_rows(next, acc, lambda, singular_tol),
            _ => {
                let a = tape.scale(next, lambda);
                let b = tape.scale(acc, 1.0 - lambda);
                tape.add(a, b)
            }
        };
    }
    Some(acc)
}
