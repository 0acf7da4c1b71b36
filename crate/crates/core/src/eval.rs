//! Ranking metrics and representation diagnostics.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::data::{Dataset, Split};
use crate::error::{bail, Error, Result};
use crate::model::{top_k, write_atomic};
use crate::numerics::{l2_normalize_rows, log_mean_exp, sq_dist, DenseMatrix, Rng, NORM_EPS};

pub const DEFAULT_KS: [usize; 2] = [10, 20];
pub const DEFAULT_AU_PAIRS: usize = 10_000;

/// `|top-k ∩ truth| / |truth|`
pub fn recall_at_k(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    let hits = ranked.iter().take(k).filter(|i| truth.contains(i)).count();
    hits as f64 / truth.len() as f64
}

/// Binary-gain NDCG with the ideal ranking truncated at `min(|truth|, k)`.
pub fn ndcg_at_k(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    if truth.is_empty() || k == 0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| truth.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..truth.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingResult {
    pub ks: Vec<usize>,
    /// Macro-averaged recall per entry of `ks`.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
    /// `(user, top-max(ks) items)` for every evaluated user.
    pub lists: Vec<(usize, Vec<usize>)>,
}

impl RankingResult {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }
}

/// Ranks all items for every user with at least one `phase` item, masking
/// the user's training items, and macro-averages the metrics.
pub fn evaluate(
    users: &DenseMatrix,
    items: &DenseMatrix,
    dataset: &Dataset,
    phase: Split,
    ks: &[usize],
) -> Result<RankingResult> {
    if ks.is_empty() || ks.contains(&0) {
        bail!(Config, "cutoffs must be positive");
    }
    if users.rows() != dataset.n_users() || items.rows() != dataset.n_items() {
        bail!(Config, "representations do not match the dataset size");
    }
    let train = dataset.user_items(Split::Train)?;
    let truth = dataset.user_items(phase)?;
    let kmax = *ks.iter().max().unwrap();
    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    let mut lists = Vec::new();
    for u in 0..dataset.n_users() {
        if truth[u].is_empty() {
            continue;
        }
        let ranked = top_k(users, items, u, kmax, &train[u])?;
        for (j, &k) in ks.iter().enumerate() {
            recall[j] += recall_at_k(&ranked, &truth[u], k);
            ndcg[j] += ndcg_at_k(&ranked, &truth[u], k);
        }
        lists.push((u, ranked));
    }
    let n = lists.len();
    if n == 0 {
        bail!(Data, "no user has {phase} interactions");
    }
    recall.iter_mut().chain(ndcg.iter_mut()).for_each(|v| *v /= n as f64);
    Ok(RankingResult {
        ks: ks.to_vec(),
        recall,
        ndcg,
        users_evaluated: n,
        lists,
    })
}

/// Fixed pairs on which alignment and uniformity are measured, so values
/// are comparable across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct AuSample {
    pub positives: Vec<(usize, usize)>,
    pub user_pairs: Vec<(usize, usize)>,
    pub item_pairs: Vec<(usize, usize)>,
}

fn distinct_pairs(n: usize, count: usize, rng: &mut Rng, what: &str) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        bail!(InvalidInput, "need at least 2 {what} to measure uniformity, got {n}");
    }
    let total = n * (n - 1) / 2;
    if total <= count {
        if total < count {
            log::warn!("only {total} distinct {what} pairs exist; using all of them instead of {count}");
        }
        return Ok((0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect());
    }
    Ok((0..count)
        .map(|_| {
            let a = rng.below(n);
            let mut b = rng.below(n - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect())
}

impl AuSample {
    /// Draws `count` pairs of each kind; populations smaller than the
    /// request are enumerated in full.
    pub fn draw(positives: &[(usize, usize)], n_users: usize, n_items: usize, count: usize, seed: u64) -> Result<Self> {
        if positives.is_empty() {
            bail!(InvalidInput, "no positive pairs to measure alignment on");
        }
        let mut rng = Rng::new(seed).fork(0xa11);
        let pos = if positives.len() <= count {
            positives.to_vec()
        } else {
            rng.sample_indices(positives.len(), count).into_iter().map(|k| positives[k]).collect()
        };
        Ok(Self {
            positives: pos,
            user_pairs: distinct_pairs(n_users, count, &mut rng, "users")?,
            item_pairs: distinct_pairs(n_items, count, &mut rng, "items")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuMetrics {
    pub align: f64,
    pub uniform_user: f64,
    pub uniform_item: f64,
}

fn sampled_uniformity(v: &DenseMatrix, pairs: &[(usize, usize)], t: f64) -> Result<f64> {
    let e: Vec<f64> = pairs.iter().map(|&(a, b)| -t * sq_dist(v.row(a), v.row(b))).collect();
    log_mean_exp(&e)
}

pub fn measure_au(users: &DenseMatrix, items: &DenseMatrix, sample: &AuSample, t: f64) -> Result<AuMetrics> {
    let align = sample
        .positives
        .iter()
        .map(|&(u, i)| sq_dist(users.row(u), items.row(i)))
        .sum::<f64>()
        / sample.positives.len() as f64;
    Ok(AuMetrics {
        align,
        uniform_user: sampled_uniformity(users, &sample.user_pairs, t)?,
        uniform_item: sampled_uniformity(items, &sample.item_pairs, t)?,
    })
}

/// Item uniformity under real-feature and random-feature models, measured
/// on the same item pairs.
pub fn uniformity_vs_random_features(
    items_real: &DenseMatrix,
    items_random: &DenseMatrix,
    count: usize,
    seed: u64,
    t: f64,
) -> Result<(f64, f64)> {
    if items_real.rows() != items_random.rows() {
        bail!(InvalidInput, "item counts differ between the two models");
    }
    let mut rng = Rng::new(seed).fork(0xa11);
    let pairs = distinct_pairs(items_real.rows(), count, &mut rng, "items")?;
    Ok((
        sampled_uniformity(items_real, &pairs, t)?,
        sampled_uniformity(items_random, &pairs, t)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleExport {
    pub angles: Vec<f64>,
    /// The items span fewer than two directions.
    pub degenerate: bool,
}

/// Angle of each normalized item row after projecting onto the top two
/// singular directions and renormalizing onto the unit circle.
pub fn export_angles(items: &DenseMatrix) -> Result<AngleExport> {
    if items.rows() < 2 {
        bail!(InvalidInput, "angle export needs at least 2 items");
    }
    let x = l2_normalize_rows(items, NORM_EPS);
    let gram = x.t_matmul(&x);
    let n = gram.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, gram.data()));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    let degenerate = n < 2 || top <= 0.0 || eig.eigenvalues[order[1]] <= 1e-10 * top;
    if degenerate {
        log::warn!("item representations are rank-deficient; angles collapse to a line");
    }
    let direction = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let mut v: Vec<f64> = col.iter().copied().collect();
        // fix the sign so the largest-magnitude component is positive
        let (mut best, mut mag) = (0, 0.0);
        for (j, c) in v.iter().enumerate() {
            if c.abs() > mag + 1e-12 {
                best = j;
                mag = c.abs();
            }
        }
        if v[best] < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        v
    };
    let d1 = direction(0);
    let d2 = if degenerate { vec![0.0; n] } else { direction(1) };
    let angles = (0..x.rows())
        .map(|r| {
            let px = crate::numerics::dot(x.row(r), &d1);
            let py = crate::numerics::dot(x.row(r), &d2);
            let py = if py.abs() < 1e-12 { 0.0 } else { py };
            py.atan2(px)
        })
        .collect();
    Ok(AngleExport { angles, degenerate })
}

pub fn write_angles(path: &Path, item_ids: &[u64], angles: &[f64]) -> Result<()> {
    if item_ids.len() != angles.len() {
        bail!(Internal, "angle count does not match item count");
    }
    let mut out = String::from("item_id,angle_rad\n");
    for (id, a) in item_ids.iter().zip(angles) {
        out.push_str(&format!("{id},{a}\n"));
    }
    write_atomic(path, out.as_bytes())
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub l_align: f64,
    pub l_uniform_user: f64,
    pub l_cal_uniform_item: f64,
    pub val_recall20: f64,
    pub seconds: f64,
}

pub const DIAGNOSTICS_HEADER: &str = "epoch,l_align,l_uniform_user,l_cal_uniform_item,val_recall20,seconds";

pub fn diagnostics_csv(records: &[EpochDiagnostics]) -> String {
    let mut out = format!("{DIAGNOSTICS_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.l_align, r.l_uniform_user, r.l_cal_uniform_item, r.val_recall20, r.seconds
        ));
    }
    out
}

pub fn write_diagnostics(path: &Path, records: &[EpochDiagnostics]) -> Result<()> {
    write_atomic(path, diagnostics_csv(records).as_bytes())
}

/// Parses a diagnostics CSV written by [`write_diagnostics`].
pub fn read_diagnostics(path: &Path) -> Result<Vec<EpochDiagnostics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    if lines.next() != Some(DIAGNOSTICS_HEADER) {
        bail!(Format, "{}: not a diagnostics log", path.display());
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |k: usize| -> Result<f64> {
                f.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("{}: bad line '{l}'", path.display())))
            };
            Ok(EpochDiagnostics {
                epoch: num(0)? as usize,
                l_align: num(1)?,
                l_uniform_user: num(2)?,
                l_cal_uniform_item: num(3)?,
                val_recall20: num(4)?,
                seconds: num(5)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_cases() {
        assert_eq!(recall_at_k(&[1, 2, 3], &[2, 3], 3), 1.0);
        assert_eq!(recall_at_k(&[1, 2, 3], &[4], 3), 0.0);
        assert!((recall_at_k(&[0, 9], &[0, 1, 2], 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg_at_k(&[5, 1], &[5], 2), 1.0);
        assert!((ndcg_at_k(&[1, 5], &[5], 2) - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((ndcg_at_k(&[1, 5], &[5], 2) - 0.6309).abs() < 1e-4);
        let v = ndcg_at_k(&[7, 0, 8], &[7, 8], 3);
        assert!((v - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((v - 0.9197).abs() < 1e-4);
    }

    #[test]
    fn au_degenerate_cases() {
        let items = DenseMatrix::filled(4, 3, 0.5);
        let users = DenseMatrix::filled(3, 3, 0.5);
        let s = AuSample::draw(&[(0, 0), (1, 2)], 3, 4, 100, 1).unwrap();
        let m = measure_au(&users, &items, &s, 1.0).unwrap();
        assert_eq!(m.uniform_item, 0.0);
        assert_eq!(m.align, 0.0);
        assert_eq!(s.item_pairs.len(), 6);
        assert!(AuSample::draw(&[(0, 0)], 1, 4, 10, 1).is_err());
    }

    #[test]
    fn antipodal_angles() {
        let x = DenseMatrix::from_rows(&[vec![0.3, 0.4], vec![-0.3, -0.4]]).unwrap();
        let a = export_angles(&x).unwrap();
        let gap = (a.angles[0] - a.angles[1]).abs();
        assert!((gap - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn ring_of_eight() {
        let x = DenseMatrix::from_fn(8, 2, |r, c| {
            let t = r as f64 * std::f64::consts::FRAC_PI_4 + 0.1;
            if c == 0 {
                t.cos()
            } else {
                t.sin()
            }
        });
        let mut a = export_angles(&x).unwrap().angles;
        a.sort_by(f64::total_cmp);
        for w in a.windows(2) {
            assert!((w[1] - w[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_items_collapse() {
        let x = DenseMatrix::filled(5, 4, 1.0);
        let a = export_angles(&x).unwrap();
        assert!(a.degenerate);
        assert!(a.angles.iter().all(|&v| v == a.angles[0]));
    }

    #[test]
    fn diagnostics_roundtrip() {
        let recs = vec![EpochDiagnostics {
            epoch: 1,
            l_align: 0.5,
            l_uniform_user: -1.25,
            l_cal_uniform_item: -0.1,
            val_recall20: 0.3,
            seconds: 0.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_diagnostics(&p, &recs).unwrap();
        assert_eq!(read_diagnostics(&p).unwrap(), recs);
    }
}
