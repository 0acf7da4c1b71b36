//! Block-structured synthetic datasets.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{random_features_like, save_features};
use crate::error::{bail, Error, Result};
use crate::model::write_atomic;
use crate::numerics::{l2_normalize_rows, DenseMatrix, Rng, NORM_EPS};

pub const MODALITIES: [&str; 2] = ["visual", "textual"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    /// Probability that an interaction goes to an item outside the user's block.
    pub noise: f64,
    pub per_user: usize,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian added to block centroids.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            blocks: 4,
            noise: 0.1,
            per_user: 10,
            feature_dim: 32,
            feature_noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            bail!(Config, "synthetic data needs at least 2 blocks");
        }
        if self.users < 5 * self.blocks || self.items < 5 * self.blocks {
            bail!(Config, "users and items must each be at least 5 x blocks ({})", 5 * self.blocks);
        }
        if !(0.0..=1.0).contains(&self.noise) {
            bail!(Config, "noise must be in [0, 1]");
        }
        if self.per_user == 0 || self.per_user > self.items / self.blocks {
            bail!(Config, "per-user interactions must be in [1, {}]", self.items / self.blocks);
        }
        if self.feature_dim == 0 || !(self.feature_noise >= 0.0) {
            bail!(Config, "feature dimension must be positive and feature noise non-negative");
        }
        Ok(())
    }

    pub fn user_block(&self, u: usize) -> usize {
        u * self.blocks / self.users
    }

    pub fn item_block(&self, i: usize) -> usize {
        i * self.blocks / self.items
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub interactions: Vec<(usize, usize)>,
    /// One matrix per entry of [`MODALITIES`].
    pub features: Vec<DenseMatrix>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut rng = root.fork(1);
    let mut interactions = Vec::with_capacity(cfg.users * cfg.per_user);
    for u in 0..cfg.users {
        let b = cfg.user_block(u);
        let (inside, outside): (Vec<usize>, Vec<usize>) = (0..cfg.items).partition(|&i| cfg.item_block(i) == b);
        let n_out = (0..cfg.per_user).filter(|_| rng.uniform() < cfg.noise).count().min(outside.len());
        let n_in = (cfg.per_user - n_out).min(inside.len());
        let mut items: Vec<usize> = rng
            .sample_indices(inside.len(), n_in)
            .into_iter()
            .map(|k| inside[k])
            .chain(rng.sample_indices(outside.len(), n_out).into_iter().map(|k| outside[k]))
            .collect();
        items.sort_unstable();
        interactions.extend(items.into_iter().map(|i| (u, i)));
    }
    let features = (0..MODALITIES.len())
        .map(|m| {
            let mut r = root.fork(10 + m as u64);
            let centroids = l2_normalize_rows(
                &DenseMatrix::from_fn(cfg.blocks, cfg.feature_dim, |_, _| r.normal()),
                NORM_EPS,
            );
            let raw = DenseMatrix::from_fn(cfg.items, cfg.feature_dim, |i, c| {
                centroids.get(cfg.item_block(i), c) + cfg.feature_noise * r.normal()
            });
            l2_normalize_rows(&raw, NORM_EPS)
        })
        .collect();
    Ok(SynthData { interactions, features })
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a SynthConfig,
    interactions: &'a str,
    features: Vec<(String, String)>,
    random_features: Vec<(String, String)>,
    user_blocks: Vec<usize>,
    item_blocks: Vec<usize>,
}

/// Paths written by [`write`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub interactions: PathBuf,
    pub features: Vec<(String, PathBuf)>,
    pub random_features: Vec<(String, PathBuf)>,
    pub manifest: PathBuf,
}

/// Writes `interactions.csv`, one feature file per modality, matching
/// random-feature files and `manifest.json` into `out`.
pub fn write(cfg: &SynthConfig, out: &Path) -> Result<SynthFiles> {
    let data = generate(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let interactions = out.join("interactions.csv");
    let mut csv = String::from("user_id,item_id\n");
    for (u, i) in &data.interactions {
        csv.push_str(&format!("{u},{i}\n"));
    }
    write_atomic(&interactions, csv.as_bytes())?;

    let mut features = Vec::new();
    let mut random_features = Vec::new();
    let mut rng = Rng::new(cfg.seed).fork(99);
    for (name, m) in MODALITIES.iter().zip(&data.features) {
        let p = out.join(format!("{name}.cm3f"));
        save_features(&p, m)?;
        features.push((name.to_string(), p));
        let rp = out.join(format!("{name}_random.cm3f"));
        save_features(&rp, &random_features_like(m, &mut rng))?;
        random_features.push((name.to_string(), rp));
    }
    let file_name = |p: &PathBuf| p.file_name().unwrap().to_string_lossy().into_owned();
    let manifest = Manifest {
        config: cfg,
        interactions: "interactions.csv",
        features: features.iter().map(|(n, p)| (n.clone(), file_name(p))).collect(),
        random_features: random_features.iter().map(|(n, p)| (n.clone(), file_name(p))).collect(),
        user_blocks: (0..cfg.users).map(|u| cfg.user_block(u)).collect(),
        item_blocks: (0..cfg.items).map(|i| cfg.item_block(i)).collect(),
    };
    let manifest_path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    write_atomic(&manifest_path, json.as_bytes())?;
    Ok(SynthFiles {
        interactions,
        features,
        random_features,
        manifest: manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_interactions_stay_in_block() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.interactions.len(), 200 * 10);
        assert!(data.interactions.iter().all(|&(u, i)| cfg.user_block(u) == cfg.item_block(i)));
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = SynthConfig {
            blocks: 1,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            users: 10,
            ..SynthConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
