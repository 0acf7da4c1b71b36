//! Training loop, early stopping and the γ grid search.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape};
use crate::data::{epoch_batches, Dataset, Split};
use crate::error::{bail, Error, Result};
use crate::eval::{evaluate, EpochDiagnostics};
use crate::fusion::{FusionConfig, FusionMode, LambdaPolicy, DEFAULT_LEAKY_SLOPE, DEFAULT_SINGULAR_TOL};
use crate::graphs::{build_interaction_graph, build_item_item_graph, DEFAULT_KNN_K};
use crate::losses::{batch_objective, LossConfig, LossKind, LossParts};
use crate::model::{
    forward, forward_on_tape, fused_features, init_params, write_atomic, Checkpoint, ModelConfig, ModelInputs,
    ModelParams, Representations, EVAL_LAMBDA,
};
use crate::numerics::{DenseMatrix, Rng};

/// Named modality feature matrices, one row per item.
pub type Features = Vec<(String, DenseMatrix)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    /// Projector hidden width; 0 means `4 d`.
    pub hidden_dim: usize,
    pub layers_ui: usize,
    pub layers_ii: usize,
    pub knn_k: usize,
    pub normalize: bool,
    pub fusion: FusionMode,
    pub alpha: f64,
    /// Fixed mixing coefficient for training steps; sampled when `None`.
    pub fixed_lambda: Option<f64>,
    pub t: f64,
    pub gamma: f64,
    pub loss: LossKind,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Record wall-clock seconds in the diagnostics (breaks byte-identical logs).
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 64,
            hidden_dim: 0,
            layers_ui: 2,
            layers_ii: 1,
            knn_k: DEFAULT_KNN_K,
            normalize: true,
            fusion: FusionMode::Slerp,
            alpha: 1.0,
            fixed_lambda: None,
            t: 1.0,
            gamma: 1.0,
            loss: LossKind::Calibrated,
            lr: 0.001,
            batch_size: 2048,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            record_time: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!(Config, "invalid boolean '{value}' for {key}"),
    }
}

impl TrainConfig {
    /// Sets one option by its flag name. Returns `false` for keys that are
    /// not training options.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d" => self.d = parse(key, value)?,
            "hidden" => self.hidden_dim = parse(key, value)?,
            "layers-ui" => self.layers_ui = parse(key, value)?,
            "layers-ii" => self.layers_ii = parse(key, value)?,
            "knn-k" => self.knn_k = parse(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "fusion" => self.fusion = value.trim().parse()?,
            "alpha" => self.alpha = parse(key, value)?,
            "lambda" => self.fixed_lambda = Some(parse(key, value)?),
            "t" => self.t = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "loss" => self.loss = value.trim().parse()?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch_size = parse(key, value)?,
            "epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "record-time" => self.record_time = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            bail!(Config, "d must be positive");
        }
        if self.batch_size < 2 {
            bail!(Config, "batch size must be at least 2");
        }
        if self.max_epochs == 0 {
            bail!(Config, "epochs must be positive");
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            bail!(Config, "patience must be in [1, epochs], got {}", self.patience);
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate must be positive");
        }
        self.loss_config().validate()?;
        self.fusion_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            t: self.t,
            gamma: self.gamma,
            kind: self.loss,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            mode: self.fusion,
            alpha: self.alpha,
            lambda_policy: match self.fixed_lambda {
                Some(l) => LambdaPolicy::Fixed(l),
                None => LambdaPolicy::SamplePerStep,
            },
            singular_tol: DEFAULT_SINGULAR_TOL,
        }
    }

    pub fn model_config(&self, dataset: &Dataset, features: &Features) -> ModelConfig {
        ModelConfig {
            d: self.d,
            hidden_dim: if self.hidden_dim == 0 { 4 * self.d } else { self.hidden_dim },
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            modalities: features.iter().map(|f| f.0.clone()).collect(),
            input_dims: features.iter().map(|f| f.1.cols()).collect(),
            n_users: dataset.n_users(),
            n_items: dataset.n_items(),
            layers_ui: self.layers_ui,
            layers_ii: self.layers_ii,
            knn_k: self.knn_k,
            normalize: self.normalize,
            fusion: self.fusion_config(),
        }
    }
}

/// `0.2, 0.4, ..., 3.0`
pub fn default_gamma_grid() -> Vec<f64> {
    (1..=15).map(|k| (2 * k) as f64 / 10.0).collect()
}

/// Graphs and features for a dataset: the interaction graph is built from
/// training pairs only, the item-item graph from the raw features.
pub fn build_inputs(dataset: &Dataset, features: &Features, knn_k: usize) -> Result<ModelInputs> {
    if features.is_empty() {
        bail!(Config, "at least one modality feature file is required");
    }
    for (name, f) in features {
        if f.rows() != dataset.n_items() {
            bail!(Data, "modality {name} has {} rows for {} items", f.rows(), dataset.n_items());
        }
    }
    let train = dataset.pairs(Split::Train)?;
    let interactions = build_interaction_graph(&train, dataset.n_users(), dataset.n_items())?;
    let mats: Vec<&DenseMatrix> = features.iter().map(|f| &f.1).collect();
    let item_graph = build_item_item_graph(&mats, knn_k, None)?;
    Ok(ModelInputs {
        features: features.iter().map(|f| f.1.clone()).collect(),
        interactions,
        item_graph,
    })
}

/// Validation-metric early stopping; ties keep the earlier epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((_, b)) => metric > b,
        };
        if improved {
            self.best = Some((epoch, metric));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    /// 0 when no epoch completed.
    pub best_epoch: usize,
    pub best_val_recall20: f64,
    pub diagnostics: Vec<EpochDiagnostics>,
    /// Set when training stopped on a numerical failure.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.diagnostics.len()
    }
}

fn checkpoint(model: &ModelConfig, params: &ModelParams, cfg: &TrainConfig, epoch: usize) -> Checkpoint {
    Checkpoint {
        config: model.clone(),
        params: params.clone(),
        meta: serde_json::json!({ "train": cfg, "epoch": epoch }),
    }
}

/// One optimizer step on a batch. Returns the batch's loss parts.
fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    inputs: &ModelInputs,
    model: &ModelConfig,
    loss: &LossConfig,
    batch: &[(usize, usize)],
    lambda: f64,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let pass = forward_on_tape(&mut tape, params, inputs, model, lambda)?;
    let fused = fused_features(&tape, &pass, model);
    let (total, parts) = batch_objective(&mut tape, pass.users, pass.items, batch, &fused, loss)?;
    let grads = tape.backward(total)?;
    let mut all = params.all_mut();
    for (p, v) in all.iter_mut().zip(&pass.params) {
        if let Some(g) = grads.get(*v) {
            p.accumulate(g);
        }
    }
    adam.step(&mut all)?;
    Ok(parts)
}

pub fn representations(ck: &Checkpoint, inputs: &ModelInputs) -> Result<Representations> {
    forward(&ck.params, inputs, &ck.config, EVAL_LAMBDA)
}

/// Trains with early stopping on validation Recall@20.
pub fn train(dataset: &Dataset, features: &Features, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let inputs = build_inputs(dataset, features, cfg.knn_k)?;
    let model = cfg.model_config(dataset, features);
    let train_pairs = dataset.pairs(Split::Train)?;
    if dataset.pairs(Split::Valid)?.is_empty() {
        bail!(Data, "validation split is empty");
    }
    let loss = cfg.loss_config();
    let fusion = model.fusion.clone();

    let root = Rng::new(cfg.seed);
    let mut params = init_params(&model, &mut root.fork(1))?;
    let mut batch_rng = root.fork(2);
    let mut lambda_rng = root.fork(3);
    let mut adam = Adam::new(cfg.lr);

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = checkpoint(&model, &params, cfg, 0);
    let mut diagnostics = Vec::new();
    let mut aborted = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let batches = epoch_batches(&train_pairs, cfg.batch_size, &mut batch_rng)?;
        let mut sums = LossParts::default();
        for batch in &batches {
            let lambda = fusion.draw_lambda(&mut lambda_rng)?;
            match train_step(&mut params, &mut adam, &inputs, &model, &loss, batch, lambda) {
                Ok(p) => {
                    sums.align += p.align;
                    sums.uniform_user += p.uniform_user;
                    sums.cal_uniform_item += p.cal_uniform_item;
                }
                Err(Error::Numeric(msg)) => {
                    log::error!("epoch {epoch}: {msg}; keeping the last good checkpoint");
                    aborted = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if !params.is_finite() {
            aborted = Some(format!("parameters became non-finite in epoch {epoch}"));
            break;
        }
        let reps = forward(&params, &inputs, &model, EVAL_LAMBDA)?;
        let val = evaluate(&reps.users, &reps.items, dataset, Split::Valid, &[20])?.recall[0];
        let n = batches.len() as f64;
        diagnostics.push(EpochDiagnostics {
            epoch,
            l_align: sums.align / n,
            l_uniform_user: sums.uniform_user / n,
            l_cal_uniform_item: sums.cal_uniform_item / n,
            val_recall20: val,
            seconds: if cfg.record_time { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        log::info!(
            "epoch {epoch}: align {:.4} uniform_user {:.4} cal_uniform_item {:.4} val R@20 {val:.4}",
            sums.align / n,
            sums.uniform_user / n,
            sums.cal_uniform_item / n
        );
        let decision = stopper.observe(epoch, val);
        if decision.improved {
            best = checkpoint(&model, &params, cfg, epoch);
        }
        if decision.stop {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (best_epoch, best_val) = stopper.best().unwrap_or((0, f64::NEG_INFINITY));
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_recall20: best_val,
        diagnostics,
        aborted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub gamma: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_recall20: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub best_index: usize,
    pub best: TrainOutcome,
}

/// Index of the largest finite value; ties keep the earlier entry.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|b| b.0)
}

/// Trains once per γ with identical seeds and keeps the run with the best
/// validation Recall@20.
pub fn grid_search(dataset: &Dataset, features: &Features, cfg: &TrainConfig, gammas: &[f64]) -> Result<GridOutcome> {
    if gammas.is_empty() {
        bail!(Config, "gamma grid is empty");
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
        bail!(Config, "grid values must be positive, got {g}");
    }
    let mut rows = Vec::with_capacity(gammas.len());
    let mut outcomes = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let run_cfg = TrainConfig { gamma, ..cfg.clone() };
        let out = train(dataset, features, &run_cfg)?;
        log::info!("gamma {gamma}: best val R@20 {} at epoch {}", out.best_val_recall20, out.best_epoch);
        rows.push(GridRow {
            gamma,
            best_epoch: out.best_epoch,
            epochs_run: out.epochs_run(),
            val_recall20: out.best_val_recall20,
        });
        outcomes.push(out);
    }
    let vals: Vec<f64> = rows.iter().map(|r| r.val_recall20).collect();
    let best_index = select_best(&vals).ok_or_else(|| Error::Numeric("no grid point produced a finite metric".into()))?;
    let best = outcomes.swap_remove(best_index);
    Ok(GridOutcome { rows, best_index, best })
}

pub const GRID_HEADER: &str = "gamma,best_epoch,epochs_run,val_recall20";

pub fn write_grid_table(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut out = format!("{GRID_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.gamma, r.best_epoch, r.epochs_run, r.val_recall20));
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_one_stops_at_epoch_two() {
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.observe(1, 0.5), StopDecision { improved: true, stop: false });
        assert_eq!(s.observe(2, 0.4), StopDecision { improved: false, stop: true });
        assert_eq!(s.best(), Some((1, 0.5)));
    }

    #[test]
    fn ties_keep_earlier_epoch() {
        let mut s = EarlyStopper::new(3);
        s.observe(1, 0.2);
        s.observe(2, 0.2);
        assert_eq!(s.best(), Some((1, 0.2)));
    }

    #[test]
    fn grid_defaults() {
        let g = default_gamma_grid();
        assert_eq!(g.len(), 15);
        assert_eq!(g[0], 0.2);
        assert_eq!(g[14], 3.0);
        assert_eq!(g[2].to_string(), "0.6");
    }

    #[test]
    fn best_selection() {
        assert_eq!(select_best(&[0.1, f64::NAN, 0.3, 0.3]), Some(2));
        assert_eq!(select_best(&[f64::NAN]), None);
        assert_eq!(select_best(&[0.0, 0.25]), Some(1));
    }

    #[test]
    fn config_keys() {
        let mut c = TrainConfig::default();
        assert!(c.set("gamma", "0.8").unwrap());
        assert!(c.set("loss", "standard").unwrap());
        assert!(!c.set("mode", "warm").unwrap());
        assert!(c.set("batch", "x").is_err());
        assert_eq!(c.gamma, 0.8);
        assert_eq!(c.loss, LossKind::Standard);
        c.patience = 200;
        assert!(c.validate().is_err());
    }
}
