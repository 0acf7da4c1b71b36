//! Alignment, uniformity and calibrated uniformity objectives.
//!
//! Every term exists twice: as a plain function over matrices (used by the
//! diagnostics) and as a tape op with a hand-written gradient (used by
//! training). Both share the same pair enumeration.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Tape, Var};
use crate::error::{bail, Error, Result};
use crate::numerics::{dot, log_mean_exp, sq_dist, DenseMatrix};

/// Which uniformity term is applied to items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Standard,
    Calibrated,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "calibrated" => Ok(Self::Calibrated),
            other => bail!(Config, "unknown loss '{other}' (expected standard|calibrated)"),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Calibrated => "calibrated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub t: f64,
    pub gamma: f64,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            t: 1.0,
            gamma: 1.0,
            kind: LossKind::Calibrated,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0) || !self.t.is_finite() {
            bail!(Config, "temperature t must be positive, got {}", self.t);
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            bail!(Config, "gamma must be non-negative, got {}", self.gamma);
        }
        Ok(())
    }
}

/// Clamped cosine of two unit vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(0.0, 1.0)
}

/// Pairwise clamped similarities between the rows of `fused`.
pub fn similarity_matrix(fused: &DenseMatrix) -> DenseMatrix {
    fused.matmul_t(fused).map(|v| v.clamp(0.0, 1.0))
}

/// `-t ‖a - b‖²`
pub fn standard_exponent(a: &[f64], b: &[f64], t: f64) -> f64 {
    -t * sq_dist(a, b)
}

/// `-t (‖a - b‖² - 2 + 2φ)`
pub fn calibrated_exponent(a: &[f64], b: &[f64], phi: f64, t: f64) -> f64 {
    -t * (sq_dist(a, b) + (2.0 * phi - 2.0))
}

fn check_pairs(n: usize, what: &str) -> Result<()> {
    if n < 2 {
        bail!(InvalidInput, "{what} needs at least 2 vectors, got {n}");
    }
    Ok(())
}

/// Mean squared distance between matched rows.
pub fn align_loss(users: &DenseMatrix, items: &DenseMatrix) -> Result<f64> {
    if users.shape() != items.shape() {
        bail!(InvalidInput, "alignment shapes differ: {:?} vs {:?}", users.shape(), items.shape());
    }
    if users.rows() == 0 {
        bail!(InvalidInput, "alignment over an empty batch");
    }
    let total: f64 = (0..users.rows()).map(|r| sq_dist(users.row(r), items.row(r))).sum();
    Ok(total / users.rows() as f64)
}

fn pair_exponents(v: &DenseMatrix, phi: Option<&DenseMatrix>, t: f64) -> Vec<f64> {
    let n = v.rows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            out.push(match phi {
                Some(p) => calibrated_exponent(v.row(a), v.row(b), p.get(a, b), t),
                None => standard_exponent(v.row(a), v.row(b), t),
            });
        }
    }
    out
}

/// Log-mean of `exp(-t ‖v_a - v_b‖²)` over unordered distinct row pairs.
pub fn uniform_loss(v: &DenseMatrix, t: f64) -> Result<f64> {
    check_pairs(v.rows(), "uniformity")?;
    log_mean_exp(&pair_exponents(v, None, t))
}

/// Calibrated uniformity; `phi` is the `n x n` similarity matrix of the rows.
pub fn cal_uniform_loss(v: &DenseMatrix, phi: &DenseMatrix, t: f64) -> Result<f64> {
    check_pairs(v.rows(), "calibrated uniformity")?;
    if phi.shape() != (v.rows(), v.rows()) {
        bail!(InvalidInput, "similarity matrix {:?} does not match {} items", phi.shape(), v.rows());
    }
    log_mean_exp(&pair_exponents(v, Some(phi), t))
}

/// `align + γ (uniform_user + cal_uniform_item)`
pub fn total_loss(align: f64, user_uniform: f64, item_cal_uniform: f64, gamma: f64) -> Result<f64> {
    for (name, v) in [("align", align), ("uniform_user", user_uniform), ("cal_uniform_item", item_cal_uniform)] {
        if !v.is_finite() {
            bail!(Numeric, "loss component {name} is not finite ({v})");
        }
    }
    Ok(align + gamma * (user_uniform + item_cal_uniform))
}

struct AlignFn;

impl Function for AlignFn {
    fn name(&self) -> &'static str {
        "align"
    }

    fn backward(&self, x: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        let s = 2.0 * g.item() / x[0].rows() as f64;
        let d = x[0].sub(x[1]).scale(s);
        let neg = d.scale(-1.0);
        vec![Some(d), Some(neg)]
    }
}

struct UniformFn {
    t: f64,
    // pair shift `-2 + 2φ`, `None` for the standard form
    phi: Option<DenseMatrix>,
}

impl Function for UniformFn {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn backward(&self, x: &[&DenseMatrix], out: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        let v = x[0];
        let n = v.rows();
        let loss = out.item();
        let pairs = (n * (n - 1) / 2) as f64;
        let mut grad = DenseMatrix::zeros(n, v.cols());
        for a in 0..n {
            for b in a + 1..n {
                let e = match &self.phi {
                    Some(p) => calibrated_exponent(v.row(a), v.row(b), p.get(a, b), self.t),
                    None => standard_exponent(v.row(a), v.row(b), self.t),
                };
                // d loss / d e_ab is the softmax weight of the pair
                let w = (e - loss).exp() / pairs;
                let c = -2.0 * self.t * w * g.item();
                for k in 0..v.cols() {
                    let diff = v.get(a, k) - v.get(b, k);
                    grad.row_mut(a)[k] += c * diff;
                    grad.row_mut(b)[k] -= c * diff;
                }
            }
        }
        vec![Some(grad)]
    }
}

impl Tape {
    pub fn align(&mut self, users: Var, items: Var) -> Result<Var> {
        let value = align_loss(self.value(users), self.value(items))?;
        Ok(self.record(DenseMatrix::scalar(value), &[users, items], AlignFn))
    }

    pub fn uniform(&mut self, v: Var, t: f64) -> Result<Var> {
        let value = uniform_loss(self.value(v), t)?;
        Ok(self.record(DenseMatrix::scalar(value), &[v], UniformFn { t, phi: None }))
    }

    /// `phi` is treated as a constant: no gradient reaches whatever produced it.
    pub fn cal_uniform(&mut self, v: Var, phi: &DenseMatrix, t: f64) -> Result<Var> {
        let value = cal_uniform_loss(self.value(v), phi, t)?;
        Ok(self.record(
            DenseMatrix::scalar(value),
            &[v],
            UniformFn {
                t,
                phi: Some(phi.clone()),
            },
        ))
    }
}

/// Scalar values of the objective's parts for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub align: f64,
    pub uniform_user: f64,
    /// Calibrated item uniformity, recorded under both loss kinds.
    pub cal_uniform_item: f64,
    pub uniform_item: f64,
    pub total: f64,
}

/// Sorted distinct values.
pub fn distinct(ids: impl IntoIterator<Item = usize>) -> Vec<usize> {
    ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Records the batch objective on the tape.
///
/// `users` and `items` are the final (already normalized) representation
/// tables; `fused` holds the mixed item features used for φ, one row per
/// item. Users and items are deduplicated for the uniformity terms.
pub fn batch_objective(
    tape: &mut Tape,
    users: Var,
    items: Var,
    pairs: &[(usize, usize)],
    fused: &DenseMatrix,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    if pairs.is_empty() {
        bail!(InvalidInput, "empty training batch");
    }
    let pu: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let pi: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let bu = tape.gather_rows(users, &pu);
    let bi = tape.gather_rows(items, &pi);
    let align = tape.align(bu, bi)?;

    let du = distinct(pu);
    let di = distinct(pi);
    check_pairs(du.len(), "user uniformity (distinct users in batch)")?;
    check_pairs(di.len(), "item uniformity (distinct items in batch)")?;
    let uu = tape.gather_rows(users, &du);
    let uniform_user = tape.uniform(uu, cfg.t)?;
    let ui = tape.gather_rows(items, &di);
    let phi = similarity_matrix(&fused.gather_rows(&di));
    let cal = tape.cal_uniform(ui, &phi, cfg.t)?;
    let std_item = tape.uniform(ui, cfg.t)?;
    let item_term = match cfg.kind {
        LossKind::Calibrated => cal,
        LossKind::Standard => std_item,
    };

    let parts_sum = tape.add(uniform_user, item_term);
    let scaled = tape.scale(parts_sum, cfg.gamma);
    let total = tape.add(align, scaled);

    let value = |v: Var| tape.value(v).item();
    let mut parts = LossParts {
        align: value(align),
        uniform_user: value(uniform_user),
        cal_uniform_item: value(cal),
        uniform_item: value(std_item),
        total: 0.0,
    };
    parts.total = total_loss(parts.align, parts.uniform_user, value(item_term), cfg.gamma)?;
    Ok((total, parts))
}
