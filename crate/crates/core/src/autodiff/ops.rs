//! Generic differentiable matrix operations.

use std::sync::Arc;

use crate::numerics::{dot, spmm, DenseMatrix, SparseMatrix};

use super::tape::{Function, Tape, Var};

/// A fixed sparse matrix together with its transpose, ready for use on the
/// tape (the transpose carries gradients back).
#[derive(Debug, Clone)]
pub struct SparseOperator {
    matrix: Arc<SparseMatrix>,
    transpose: Arc<SparseMatrix>,
}

impl SparseOperator {
    pub fn new(matrix: SparseMatrix) -> Self {
        let transpose = matrix.transpose();
        Self {
            matrix: Arc::new(matrix),
            transpose: Arc::new(transpose),
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn transposed(&self) -> SparseOperator {
        Self {
            matrix: Arc::clone(&self.transpose),
            transpose: Arc::clone(&self.matrix),
        }
    }
}

struct Add;
impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct Scale(f64);
impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        vec![Some(g.scale(self.0))]
    }
}

struct MatMul;
impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        vec![Some(g.matmul_t(x[1])), Some(x[0].t_matmul(g))]
    }
}

struct AddBias;
impl Function for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(&self, _: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        let mut db = DenseMatrix::zeros(1, g.cols());
        for r in 0..g.rows() {
            for (acc, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                *acc += v;
            }
        }
        vec![Some(g.clone()), Some(db)]
    }
}

struct LeakyRelu(f64);
impl Function for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, x: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        let slope = self.0;
        vec![Some(x[0].zip_map(g, |xv, gv| if xv > 0.0 { gv } else { slope * gv }))]
    }
}

struct NormalizeRows(f64);
impl Function for NormalizeRows {
    fn name(&self) -> &'static str {
        "normalize_rows"
    }
    fn backward(&self, x: &[&DenseMatrix], y: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        // d(x/|x|) = (g - y (y·g)) / |x|
        let mut out = DenseMatrix::zeros(g.rows(), g.cols());
        for r in 0..g.rows() {
            let n = crate::numerics::norm(x[0].row(r));
            if n <= self.0 {
                continue;
            }
            let (yr, gr) = (y.row(r), g.row(r));
            let proj = dot(yr, gr);
            for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                *o = (gv - yv * proj) / n;
            }
        }
        vec![Some(out)]
    }
}

struct ConcatCols(Vec<usize>);
impl Function for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(&self, _: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        let mut start = 0;
        self.0
            .iter()
            .map(|&w| {
                let block = g.col_block(start, start + w);
                start += w;
                Some(block)
            })
            .collect()
    }
}

struct Spmm(SparseOperator);
impl Function for Spmm {
    fn name(&self) -> &'static str {
        "spmm"
    }
    fn backward(&self, _: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        vec![Some(spmm(&self.0.transpose, g).expect("spmm adjoint shape"))]
    }
}

struct GatherRows {
    indices: Vec<usize>,
    source_rows: usize,
}
impl Function for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn backward(&self, _: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        let mut out = DenseMatrix::zeros(self.source_rows, g.cols());
        for (k, &i) in self.indices.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                *o += v;
            }
        }
        vec![Some(out)]
    }
}

struct ScaleSegments;
impl Function for ScaleSegments {
    fn name(&self) -> &'static str {
        "scale_segments"
    }
    fn backward(&self, x: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        let (e, w) = (x[0], x[1]);
        let seg = e.cols() / w.cols();
        let mut de = DenseMatrix::zeros(e.rows(), e.cols());
        let mut dw = DenseMatrix::zeros(w.rows(), w.cols());
        for r in 0..e.rows() {
            for s in 0..w.cols() {
                let span = s * seg..(s + 1) * seg;
                let ws = w.get(r, s);
                dw.set(r, s, dot(&g.row(r)[span.clone()], &e.row(r)[span.clone()]));
                for (o, gv) in de.row_mut(r)[span.clone()].iter_mut().zip(&g.row(r)[span]) {
                    *o = ws * gv;
                }
            }
        }
        vec![Some(de), Some(dw)]
    }
}

struct WeightedSum(Vec<f64>);
impl Function for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, _: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        self.0.iter().map(|w| Some(g.scale(*w))).collect()
    }
}

struct HalfSqNorm;
impl Function for HalfSqNorm {
    fn name(&self) -> &'static str {
        "half_sq_norm"
    }
    fn backward(&self, x: &[&DenseMatrix], _: &DenseMatrix, g: &DenseMatrix) -> Vec<Option<DenseMatrix>> {
        vec![Some(x[0].scale(g.item()))]
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.record(value, &[a, b], Add)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.record(value, &[a], Scale(s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.record(value, &[a, b], MatMul)
    }

    /// Adds a `1 x n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            for (v, bv) in value.row_mut(r).iter_mut().zip(b.row(0)) {
                *v += bv;
            }
        }
        self.record(value, &[x, bias], AddBias)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.record(value, &[x], LeakyRelu(slope))
    }

    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let value = crate::numerics::l2_normalize_rows(self.value(x), eps);
        self.record(value, &[x], NormalizeRows(eps))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let blocks: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let widths = blocks.iter().map(|b| b.cols()).collect();
        let value = DenseMatrix::hconcat(&blocks);
        self.record(value, parts, ConcatCols(widths))
    }

    pub fn spmm(&mut self, a: &SparseOperator, x: Var) -> Var {
        let value = spmm(&a.matrix, self.value(x)).expect("spmm shape mismatch on tape");
        self.record(value, &[x], Spmm(a.clone()))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let src = self.value(x);
        let source_rows = src.rows();
        let value = src.gather_rows(indices);
        self.record(
            value,
            &[x],
            GatherRows {
                indices: indices.to_vec(),
                source_rows,
            },
        )
    }

    /// Multiplies segment `s` of row `u` of `e` by `w[u, s]`; `e.cols()` must
    /// be a multiple of `w.cols()`.
    pub fn scale_segments(&mut self, e: Var, w: Var) -> Var {
        let (ev, wv) = (self.value(e), self.value(w));
        assert_eq!(ev.rows(), wv.rows(), "scale_segments row mismatch");
        assert_eq!(ev.cols() % wv.cols(), 0, "segments do not divide width");
        let seg = ev.cols() / wv.cols();
        let value = DenseMatrix::from_fn(ev.rows(), ev.cols(), |r, c| ev.get(r, c) * wv.get(r, c / seg));
        self.record(value, &[e, w], ScaleSegments)
    }

    /// `Σ w_k · x_k` over same-shape inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let shape = self.value(terms[0].0).shape();
        let mut value = DenseMatrix::zeros(shape.0, shape.1);
        for &(v, w) in terms {
            value.add_assign(&self.value(v).scale(w));
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights = terms.iter().map(|t| t.1).collect();
        self.record(value, &vars, WeightedSum(weights))
    }

    /// `½‖x‖²` as a scalar.
    pub fn half_sq_norm(&mut self, x: Var) -> Var {
        let value = DenseMatrix::scalar(0.5 * self.value(x).frobenius_sq());
        self.record(value, &[x], HalfSqNorm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn rand_mat(rng: &mut Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.normal())
    }

    /// Central differences of a scalar function of one matrix.
    fn numeric_grad(x: &DenseMatrix, f: impl Fn(&DenseMatrix) -> f64) -> DenseMatrix {
        let h = 1e-5;
        let mut g = DenseMatrix::zeros(x.rows(), x.cols());
        for k in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            g.data_mut()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(x0: DenseMatrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let f = |x: &DenseMatrix| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let out = build(&mut t, v);
            t.value(out).item()
        };
        let mut tape = Tape::new();
        let v = tape.leaf(x0.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(v).unwrap();
        let numeric = numeric_grad(&x0, f);
        assert!(
            analytic.max_abs_diff(&numeric) < 1e-6,
            "analytic {analytic:?} numeric {numeric:?}"
        );
    }

    #[test]
    fn half_sq_norm_grad_is_identity() {
        let mut tape = Tape::new();
        let w0 = DenseMatrix::from_fn(2, 3, |r, c| r as f64 - c as f64 * 0.5);
        let w = tape.leaf(w0.clone());
        let loss = tape.half_sq_norm(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &w0);
    }

    #[test]
    fn projector_chain_gradient() {
        let mut rng = Rng::new(1);
        let w1 = rand_mat(&mut rng, 4, 5);
        let b1 = rand_mat(&mut rng, 1, 5);
        let w2 = rand_mat(&mut rng, 5, 3);
        let x = rand_mat(&mut rng, 6, 4);
        check(w1.clone(), |t, w| {
            let xv = t.constant(x.clone());
            let b = t.constant(b1.clone());
            let w2v = t.constant(w2.clone());
            let h = t.matmul(xv, w);
            let h = t.add_bias(h, b);
            let h = t.leaky_relu(h, 0.01);
            let o = t.matmul(h, w2v);
            let o = t.normalize_rows(o, 1e-12);
            // shift so normalize_rows sees a non-radial upstream gradient
            let shift = t.constant(DenseMatrix::filled(6, 3, 0.3));
            let o = t.add(o, shift);
            t.half_sq_norm(o)
        });
    }

    #[test]
    fn structural_ops_gradient() {
        let mut rng = Rng::new(2);
        let a = rand_mat(&mut rng, 4, 6);
        let w = rand_mat(&mut rng, 4, 3);
        let sp = SparseOperator::new(
            SparseMatrix::from_triplets(3, 4, vec![(0, 1, 0.5), (1, 0, -1.0), (2, 3, 2.0), (2, 1, 0.25)])
                .unwrap(),
        );
        check(a.clone(), |t, x| {
            let wv = t.constant(w.clone());
            let s = t.scale_segments(x, wv);
            let g = t.gather_rows(s, &[0, 2, 2, 3]);
            let p = t.spmm(&sp, x);
            let c = t.concat_cols(&[g, x]);
            let l1 = t.half_sq_norm(c);
            let l2 = t.half_sq_norm(p);
            t.weighted_sum(&[(l1, 0.7), (l2, -1.3)])
        });
        check(w.clone(), |t, wv| {
            let x = t.constant(a.clone());
            let s = t.scale_segments(x, wv);
            let s = t.scale(s, 1.7);
            t.half_sq_norm(s)
        });
    }
}
