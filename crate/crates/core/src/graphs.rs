//! User-item and item-item graphs and the propagation rules over them.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{SparseOperator, Tape, Var};
use crate::error::{bail, Error, Result};
use crate::numerics::{dot, l2_normalize_rows, DenseMatrix, SparseMatrix, NORM_EPS};

pub const DEFAULT_KNN_K: usize = 10;
const GRAPH_MAGIC: &[u8; 4] = b"CM3S";

/// Bipartite interaction graph with its symmetric-normalized adjacency
/// `R̂[u, i] = 1 / sqrt(deg(u) deg(i))`.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    n_users: usize,
    n_items: usize,
    edges: Vec<(usize, usize)>,
    user_degree: Vec<usize>,
    item_degree: Vec<usize>,
    adjacency: SparseOperator,
}

impl InteractionGraph {
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Deduplicated edges sorted by `(user, item)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn user_degree(&self) -> &[usize] {
        &self.user_degree
    }

    pub fn item_degree(&self) -> &[usize] {
        &self.item_degree
    }

    /// `|U| x |I|` normalized adjacency.
    pub fn adjacency(&self) -> &SparseOperator {
        &self.adjacency
    }

    /// Full `(|U|+|I|)` square adjacency `[[0, R̂], [R̂ᵀ, 0]]`.
    pub fn bipartite_adjacency(&self) -> SparseMatrix {
        let r = self.adjacency.matrix();
        let mut trip = Vec::with_capacity(2 * r.nnz());
        for u in 0..self.n_users {
            for (i, v) in r.row(u) {
                trip.push((u, self.n_users + i, v));
                trip.push((self.n_users + i, u, v));
            }
        }
        let n = self.n_users + self.n_items;
        SparseMatrix::from_triplets(n, n, trip).expect("bipartite indices in range")
    }
}

pub fn build_interaction_graph(
    edges: &[(usize, usize)],
    n_users: usize,
    n_items: usize,
) -> Result<InteractionGraph> {
    if let Some(&(u, i)) = edges.iter().find(|(u, i)| *u >= n_users || *i >= n_items) {
        bail!(Data, "edge ({u}, {i}) out of range for {n_users} users / {n_items} items");
    }
    let mut edges = edges.to_vec();
    edges.sort_unstable();
    edges.dedup();
    let mut user_degree = vec![0usize; n_users];
    let mut item_degree = vec![0usize; n_items];
    for &(u, i) in &edges {
        user_degree[u] += 1;
        item_degree[i] += 1;
    }
    let trip = edges
        .iter()
        .map(|&(u, i)| {
            let du = user_degree[u].max(1) as f64;
            let di = item_degree[i].max(1) as f64;
            (u, i, 1.0 / (du.sqrt() * di.sqrt()))
        })
        .collect();
    let adjacency = SparseOperator::new(SparseMatrix::from_triplets(n_users, n_items, trip)?);
    Ok(InteractionGraph {
        n_users,
        n_items,
        edges,
        user_degree,
        item_degree,
        adjacency,
    })
}

/// LightGCN propagation with sum readout, recorded on the tape.
pub fn propagate_ui_on_tape(
    tape: &mut Tape,
    graph: &InteractionGraph,
    users: Var,
    items: Var,
    layers: usize,
) -> (Var, Var) {
    let to_users = graph.adjacency.clone();
    let to_items = graph.adjacency.transposed();
    let (mut e, mut x) = (users, items);
    let (mut e_sum, mut x_sum) = (users, items);
    for _ in 0..layers {
        let e_next = tape.spmm(&to_users, x);
        let x_next = tape.spmm(&to_items, e);
        e_sum = tape.add(e_sum, e_next);
        x_sum = tape.add(x_sum, x_next);
        e = e_next;
        x = x_next;
    }
    (e_sum, x_sum)
}

/// Propagates user and item embeddings over the interaction graph for
/// `layers` rounds and returns the layer sums.
pub fn propagate_ui(
    graph: &InteractionGraph,
    users: &DenseMatrix,
    items: &DenseMatrix,
    layers: usize,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if users.cols() != items.cols() {
        bail!(Config, "user width {} != item width {}", users.cols(), items.cols());
    }
    if users.rows() != graph.n_users || items.rows() != graph.n_items {
        bail!(
            Config,
            "embedding rows ({}, {}) do not match graph ({}, {})",
            users.rows(),
            items.rows(),
            graph.n_users,
            graph.n_items
        );
    }
    let mut tape = Tape::new();
    let e = tape.constant(users.clone());
    let x = tape.constant(items.clone());
    let (e, x) = propagate_ui_on_tape(&mut tape, graph, e, x, layers);
    Ok((tape.value(e).clone(), tape.value(x).clone()))
}

/// Frozen multimodal kNN item-item graph.
#[derive(Debug, Clone)]
pub struct ItemItemGraph {
    s: SparseOperator,
    knn_k: usize,
    weights: Vec<f64>,
}

impl ItemItemGraph {
    pub fn matrix(&self) -> &SparseMatrix {
        self.s.matrix()
    }

    pub fn operator(&self) -> &SparseOperator {
        &self.s
    }

    pub fn knn_k(&self) -> usize {
        self.knn_k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Wraps an arbitrary square matrix (for tests and cached graphs).
    pub fn from_matrix(s: SparseMatrix, knn_k: usize, weights: Vec<f64>) -> Result<Self> {
        if s.rows() != s.cols() {
            bail!(Config, "item-item matrix must be square");
        }
        Ok(Self {
            s: SparseOperator::new(s),
            knn_k,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = self.matrix();
        let mut buf = Vec::with_capacity(16 + 4 * (m.rows() + 1) + 12 * m.nnz());
        buf.extend_from_slice(GRAPH_MAGIC);
        for v in [m.rows(), m.cols(), m.nnz()] {
            buf.extend_from_slice(&to_u32(v)?.to_le_bytes());
        }
        for &p in m.indptr() {
            buf.extend_from_slice(&to_u32(p)?.to_le_bytes());
        }
        for &c in m.indices() {
            buf.extend_from_slice(&to_u32(c)?.to_le_bytes());
        }
        for &v in m.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path, knn_k: usize, weights: Vec<f64>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut rd = ByteReader { bytes: &bytes, pos: 0 };
        if rd.take(4)? != GRAPH_MAGIC {
            bail!(Format, "{}: not a CM3S graph file", path.display());
        }
        let rows = rd.u32()? as usize;
        let cols = rd.u32()? as usize;
        let nnz = rd.u32()? as usize;
        let indptr = (0..=rows).map(|_| rd.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let indices = (0..nnz).map(|_| rd.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let values = (0..nnz).map(|_| rd.f64()).collect::<Result<_>>()?;
        if rd.pos != bytes.len() {
            bail!(Format, "{}: trailing bytes after graph", path.display());
        }
        Self::from_matrix(SparseMatrix::from_csr(rows, cols, indptr, indices, values)?, knn_k, weights)
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(Format, "unexpected end of file");
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Indices of the `k` most cosine-similar other rows for every row.
/// Ties go to the lower index.
pub fn knn_indices(features: &DenseMatrix, k: usize) -> Vec<Vec<usize>> {
    let x = l2_normalize_rows(features, NORM_EPS);
    let n = x.rows();
    let mut sims = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            sims.clear();
            sims.extend((0..n).filter(|&j| j != i).map(|j| (dot(x.row(i), x.row(j)), j)));
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            sims.iter().take(k).map(|&(_, j)| j).collect()
        })
        .collect()
}

/// Symmetric-normalized kNN graph for one modality.
fn modality_graph(features: &DenseMatrix, k: usize) -> Result<SparseMatrix> {
    let n = features.rows();
    let neighbors = knn_indices(features, k);
    let mut trip = Vec::with_capacity(2 * n * k);
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            trip.push((i, j, 1.0));
            trip.push((j, i, 1.0));
        }
    }
    // binarize after symmetrization (mutual neighbors were added twice)
    let a = SparseMatrix::from_triplets(n, n, trip)?;
    let binary = SparseMatrix::from_csr(n, n, a.indptr().to_vec(), a.indices().to_vec(), vec![1.0; a.nnz()])?;
    let deg = binary.row_sums();
    let mut values = Vec::with_capacity(binary.nnz());
    for r in 0..n {
        for (c, _) in binary.row(r) {
            values.push(1.0 / (deg[r].max(1.0).sqrt() * deg[c].max(1.0).sqrt()));
        }
    }
    SparseMatrix::from_csr(n, n, binary.indptr().to_vec(), binary.indices().to_vec(), values)
}

/// Builds the frozen item-item graph from per-modality item features.
///
/// `weights` defaults to equal weights over modalities.
pub fn build_item_item_graph(
    features: &[&DenseMatrix],
    knn_k: usize,
    weights: Option<&[f64]>,
) -> Result<ItemItemGraph> {
    let Some(first) = features.first() else {
        bail!(Config, "item-item graph needs at least one modality");
    };
    let n = first.rows();
    if features.iter().any(|f| f.rows() != n) {
        bail!(Data, "modality feature matrices disagree on item count");
    }
    if knn_k == 0 || knn_k >= n {
        bail!(Config, "knn_k must be in [1, {}), got {knn_k}", n);
    }
    let weights = match weights {
        Some(w) if w.len() != features.len() => {
            bail!(Config, "{} modality weights for {} modalities", w.len(), features.len())
        }
        Some(w) if w.iter().any(|v| !(*v >= 0.0)) => bail!(Config, "modality weights must be non-negative"),
        Some(w) => w.to_vec(),
        None => vec![1.0 / features.len() as f64; features.len()],
    };
    let per_modality = features
        .iter()
        .map(|f| modality_graph(f, knn_k))
        .collect::<Result<Vec<_>>>()?;
    let parts: Vec<(&SparseMatrix, f64)> = per_modality.iter().zip(weights.iter().copied()).collect();
    let s = SparseMatrix::weighted_sum(&parts)?;
    ItemItemGraph::from_matrix(s, knn_k, weights)
}

/// `S^L X + X` for `L >= 1`; identity for `L = 0`.
pub fn propagate_ii_on_tape(tape: &mut Tape, graph: &ItemItemGraph, items: Var, layers: usize) -> Var {
    if layers == 0 {
        return items;
    }
    let mut x = items;
    for _ in 0..layers {
        x = tape.spmm(&graph.s, x);
    }
    tape.add(x, items)
}

pub fn propagate_ii(graph: &ItemItemGraph, items: &DenseMatrix, layers: usize) -> Result<DenseMatrix> {
    if items.rows() != graph.matrix().rows() {
        bail!(
            Config,
            "item rows {} do not match item-item graph size {}",
            items.rows(),
            graph.matrix().rows()
        );
    }
    let mut tape = Tape::new();
    let x = tape.constant(items.clone());
    let out = propagate_ii_on_tape(&mut tape, graph, x, layers);
    Ok(tape.value(out).clone())
}
