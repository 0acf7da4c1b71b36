use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cm3_core::config::load_config;
use cm3_core::data::{
    load_features, read_interactions, read_split_manifest, save_features, split, write_interactions,
    write_split_manifest, Dataset, Split, SplitConfig, SplitMode,
};
use cm3_core::eval::{
    evaluate, export_angles, measure_au, uniformity_vs_random_features, write_angles, write_diagnostics, AuSample,
    DEFAULT_AU_PAIRS,
};
use cm3_core::fusion::{chain_norm_deviation, similarity_features, FusionMode};
use cm3_core::model::{forward_on_tape, write_atomic, Checkpoint, EVAL_LAMBDA};
use cm3_core::numerics::{DenseMatrix, Rng};
use cm3_core::synth::{self, SynthConfig};
use cm3_core::trainer::{
    build_inputs, default_gamma_grid, grid_search, representations, train, write_grid_table, Features, TrainConfig,
    TrainOutcome,
};
use cm3_core::{autodiff::Tape, Error, Result};

const EXIT_CHECK_FAILED: u8 = 8;
const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "cm3", version, about = "Multimodal recommendation with spherical fusion and calibrated uniformity")]
struct Cli {
    /// Plain-text `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a block-structured synthetic dataset.
    Synth(SynthArgs),
    /// Validate interactions and features, optionally 5-core filter them.
    Ingest(IngestArgs),
    /// Assign every interaction to train/valid/test.
    Split(SplitArgs),
    /// Train one model with early stopping.
    Train(TrainArgs),
    /// Train once per gamma value and keep the best run.
    Grid(GridArgs),
    /// Rank items with a checkpoint and report Recall/NDCG.
    Eval(EvalArgs),
    /// Representation diagnostics.
    Diagnose(DiagnoseArgs),
    /// Check that fused vectors stay on the unit sphere.
    FuseCheck(FuseCheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    per_user: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    feature_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    data: PathBuf,
    /// `<modality>=<path>`, repeatable.
    #[arg(long = "features", value_name = "MODALITY=PATH")]
    features: Vec<String>,
    #[arg(long)]
    five_core: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output manifest (`user,item,split`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers_ui: Option<usize>,
    #[arg(long)]
    layers_ii: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Fixed training mixing coefficient instead of Beta sampling.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip L2 normalization of final representations.
    #[arg(long)]
    no_normalize: bool,
    /// Write wall-clock seconds into the diagnostics log.
    #[arg(long)]
    record_time: bool,
}

impl ModelFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($key:literal => $field:ident),*) => {
                $(if let Some(v) = &self.$field { out.push(($key, v.to_string())); })*
            };
        }
        push!("d" => d, "hidden" => hidden, "layers-ui" => layers_ui, "layers-ii" => layers_ii,
              "knn-k" => knn_k, "fusion" => fusion, "alpha" => alpha, "lambda" => lambda, "t" => t,
              "gamma" => gamma, "loss" => loss, "lr" => lr, "batch" => batch, "epochs" => epochs,
              "patience" => patience, "seed" => seed);
        if self.no_normalize {
            out.push(("normalize", "false".into()));
        }
        if self.record_time {
            out.push(("record-time", "true".into()));
        }
        out
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Split manifest (`user,item,split`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "features", value_name = "MODALITY=PATH", required = true)]
    features: Vec<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated gamma values (default 0.2..3.0 step 0.2).
    #[arg(long)]
    gamma_grid: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase {
    Valid,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "features", value_name = "MODALITY=PATH", required = true)]
    features: Vec<String>,
    #[arg(long, value_enum, default_value = "test")]
    phase: Phase,
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize, 20])]
    ks: Vec<usize>,
    /// Metrics CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Diagnostic {
    Angles,
    Au,
    RandomUniformity,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long, value_enum)]
    what: Diagnostic,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "features", value_name = "MODALITY=PATH", required = true)]
    features: Vec<String>,
    /// Checkpoint trained on random features (random-uniformity only).
    #[arg(long)]
    baseline_checkpoint: Option<PathBuf>,
    #[arg(long = "baseline-features", value_name = "MODALITY=PATH")]
    baseline_features: Vec<String>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseCheckArgs {
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value = "slerp")]
    fusion: String,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 8, 64])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    max_modalities: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Check the fused block of a trained model instead of random chains.
    #[arg(long, requires = "features")]
    checkpoint: Option<PathBuf>,
    #[arg(long = "features", value_name = "MODALITY=PATH")]
    features: Vec<String>,
}

/// Config-file values, consulted when a flag is absent.
struct Settings(Vec<(String, String)>);

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        Ok(Self(match path {
            Some(p) => load_config(p)?,
            None => Vec::new(),
        }))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn or<T: std::str::FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match (flag, self.get(key)) {
            (Some(v), _) => Ok(Some(v)),
            (None, Some(s)) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value '{s}' for {key} in config file"))),
            (None, None) => Ok(None),
        }
    }

    fn train_config(&self, flags: &ModelFlags) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.0 {
            if !cfg.set(k, v)? && !OTHER_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
        }
        for (k, v) in flags.pairs() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Config keys consumed by commands other than training.
const OTHER_KEYS: &[&str] = &["mode", "gamma-grid", "five-core", "pairs", "trials"];

fn parse_features(specs: &[String]) -> Result<Vec<(String, PathBuf)>> {
    let mut out: Vec<(String, PathBuf)> = Vec::new();
    for s in specs {
        let Some((name, path)) = s.split_once('=') else {
            return Err(Error::Config(format!("--features expects MODALITY=PATH, got '{s}'")));
        };
        if name.is_empty() || out.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("modality name '{name}' is empty or repeated")));
        }
        out.push((name.to_string(), PathBuf::from(path)));
    }
    Ok(out)
}

fn load_feature_set(specs: &[String]) -> Result<Features> {
    let specs = parse_features(specs)?;
    if specs.is_empty() {
        return Err(Error::Config("at least one --features MODALITY=PATH is required".into()));
    }
    let mut out: Features = Vec::new();
    for (name, path) in specs {
        let m = load_features(&path, out.first().map(|f| f.1.rows()))?;
        out.push((name, m));
    }
    Ok(out)
}

/// Split manifest plus features whose row count fixes the item catalog.
fn load_split_data(manifest: &Path, features: &[String]) -> Result<(Dataset, Features)> {
    let features = load_feature_set(features)?;
    let ds = Dataset::from_raw(&read_split_manifest(manifest)?, Some(features[0].1.rows()))?;
    Ok((ds, features))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn run_synth(args: SynthArgs, settings: &Settings) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        users: settings.or(args.users, "users")?.unwrap_or(d.users),
        items: settings.or(args.items, "items")?.unwrap_or(d.items),
        blocks: settings.or(args.blocks, "blocks")?.unwrap_or(d.blocks),
        noise: settings.or(args.noise, "noise")?.unwrap_or(d.noise),
        per_user: settings.or(args.per_user, "per-user")?.unwrap_or(d.per_user),
        feature_dim: settings.or(args.feature_dim, "feature-dim")?.unwrap_or(d.feature_dim),
        feature_noise: settings.or(args.feature_noise, "feature-noise")?.unwrap_or(d.feature_noise),
        seed: settings.or(args.seed, "seed")?.unwrap_or(d.seed),
    };
    let files = synth::write(&cfg, &args.out)?;
    println!("interactions={}", files.interactions.display());
    for (m, p) in &files.features {
        println!("features.{m}={}", p.display());
    }
    println!("manifest={}", files.manifest.display());
    Ok(())
}

fn run_ingest(args: IngestArgs, settings: &Settings) -> Result<()> {
    let features = match args.features.is_empty() {
        true => Vec::new(),
        false => load_feature_set(&args.features)?,
    };
    let rows = read_interactions(&args.data)?;
    let mut ds = Dataset::from_raw(&rows, features.first().map(|f| f.1.rows()))?;
    let five_core = args.five_core || settings.get("five-core").is_some_and(|v| v == "true");
    let mut kept: Vec<usize> = (0..ds.n_items()).collect();
    if five_core {
        let (filtered, rows_kept) = ds.five_core()?;
        ds = filtered;
        kept = rows_kept;
    }
    create_dir(&args.out)?;
    write_interactions(&ds, &args.out.join("interactions.csv"))?;
    for (name, m) in &features {
        save_features(&args.out.join(format!("{name}.cm3f")), &m.gather_rows(&kept))?;
    }
    let mut map = String::from("item,source_item\n");
    for (k, id) in ds.item_ids.iter().enumerate() {
        map.push_str(&format!("{k},{id}\n"));
    }
    write_text(&args.out.join("items.csv"), &map)?;
    println!("users={} items={} interactions={}", ds.n_users(), ds.n_items(), ds.interactions.len());
    Ok(())
}

fn run_split(args: SplitArgs, settings: &Settings) -> Result<()> {
    let mode: SplitMode = settings
        .or(args.mode, "mode")?
        .ok_or_else(|| Error::Config("--mode warm|cold is required".into()))?
        .parse()?;
    let seed = settings.or(args.seed, "seed")?.unwrap_or(0);
    let ds = Dataset::from_raw(&read_interactions(&args.data)?, None)?;
    let out = split(&ds, &SplitConfig::new(mode, seed))?;
    write_split_manifest(&out, &args.out)?;
    let count = |s| out.pairs(s).map(|p| p.len());
    println!(
        "train={} valid={} test={}",
        count(Split::Train)?,
        count(Split::Valid)?,
        count(Split::Test)?
    );
    Ok(())
}

fn save_outcome(out_dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    create_dir(out_dir)?;
    outcome.best.save(&out_dir.join("model.cm3c"))?;
    write_diagnostics(&out_dir.join("diagnostics.csv"), &outcome.diagnostics)?;
    println!(
        "best_epoch={} val_recall20={} epochs_run={}",
        outcome.best_epoch,
        outcome.best_val_recall20,
        outcome.epochs_run()
    );
    match &outcome.aborted {
        Some(msg) => Err(Error::Numeric(format!("training aborted: {msg} (last good checkpoint saved)"))),
        None => Ok(()),
    }
}

fn run_train(args: TrainArgs, settings: &Settings) -> Result<()> {
    let cfg = settings.train_config(&args.model)?;
    let (ds, features) = load_split_data(&args.data, &args.features)?;
    let outcome = train(&ds, &features, &cfg)?;
    save_outcome(&args.out, &outcome)
}

fn run_grid(args: GridArgs, settings: &Settings) -> Result<()> {
    let cfg = settings.train_config(&args.train.model)?;
    let grid = match settings.or(args.gamma_grid, "gamma-grid")? {
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad gamma value '{v}'"))))
            .collect::<Result<Vec<_>>>()?,
        None => default_gamma_grid(),
    };
    let (ds, features) = load_split_data(&args.train.data, &args.train.features)?;
    let outcome = grid_search(&ds, &features, &cfg, &grid)?;
    create_dir(&args.train.out)?;
    write_grid_table(&args.train.out.join("grid.csv"), &outcome.rows)?;
    println!("best_gamma={}", outcome.rows[outcome.best_index].gamma);
    save_outcome(&args.train.out, &outcome.best)
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (ds, features) = load_split_data(&args.data, &args.features)?;
    let inputs = build_inputs(&ds, &features, ck.config.knn_k)?;
    let reps = representations(&ck, &inputs)?;
    let phase = match args.phase {
        Phase::Valid => Split::Valid,
        Phase::Test => Split::Test,
    };
    let res = evaluate(&reps.users, &reps.items, &ds, phase, &args.ks)?;
    let mut csv = String::from("phase,k,recall,ndcg,users\n");
    for (j, k) in res.ks.iter().enumerate() {
        csv.push_str(&format!("{phase},{k},{},{},{}\n", res.recall[j], res.ndcg[j], res.users_evaluated));
    }
    match args.out {
        Some(p) => write_text(&p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run_diagnose(args: DiagnoseArgs, settings: &Settings) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (ds, features) = load_split_data(&args.data, &args.features)?;
    let inputs = build_inputs(&ds, &features, ck.config.knn_k)?;
    let reps = representations(&ck, &inputs)?;
    let t = settings.or(args.t, "t")?.unwrap_or(1.0);
    let seed = settings.or(args.seed, "seed")?.unwrap_or(0);
    let pairs = settings.or(args.pairs, "pairs")?.unwrap_or(DEFAULT_AU_PAIRS);
    match args.what {
        Diagnostic::Angles => {
            let a = export_angles(&reps.items)?;
            write_angles(&args.out, &ds.item_ids, &a.angles)?;
            println!("items={} degenerate={}", a.angles.len(), a.degenerate);
        }
        Diagnostic::Au => {
            let sample = AuSample::draw(&ds.pairs(Split::Train)?, ds.n_users(), ds.n_items(), pairs, seed)?;
            let m = measure_au(&reps.users, &reps.items, &sample, t)?;
            write_text(
                &args.out,
                &format!("l_align,l_uniform_user,l_uniform_item\n{},{},{}\n", m.align, m.uniform_user, m.uniform_item),
            )?;
            println!("l_align={} l_uniform_user={} l_uniform_item={}", m.align, m.uniform_user, m.uniform_item);
        }
        Diagnostic::RandomUniformity => {
            let base = args
                .baseline_checkpoint
                .ok_or_else(|| Error::Config("--baseline-checkpoint is required".into()))?;
            let base_ck = Checkpoint::load(&base)?;
            let base_features = load_feature_set(&args.baseline_features)?;
            let base_inputs = build_inputs(&ds, &base_features, base_ck.config.knn_k)?;
            let base_reps = representations(&base_ck, &base_inputs)?;
            let (real, random) = uniformity_vs_random_features(&reps.items, &base_reps.items, pairs, seed, t)?;
            write_text(
                &args.out,
                &format!("condition,l_uniform_item\noriginal,{real}\nrandom,{random}\n"),
            )?;
            println!("original={real} random={random}");
        }
    }
    Ok(())
}

fn run_fuse_check(args: FuseCheckArgs, settings: &Settings) -> Result<u8> {
    let seed = settings.or(args.seed, "seed")?.unwrap_or(0);
    let (label, deviation) = match &args.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.fusion.mode == FusionMode::None {
                return Err(Error::Config("checkpoint was trained without a fused block".into()));
            }
            let features = load_feature_set(&args.features)?;
            let ds = Dataset {
                user_ids: (0..ck.config.n_users).map(|u| u.to_string()).collect(),
                item_ids: (0..ck.config.n_items as u64).collect(),
                interactions: vec![],
                splits: Some(vec![]),
            };
            let inputs = build_inputs(&ds, &features, ck.config.knn_k)?;
            let mut tape = Tape::new();
            let pass = forward_on_tape(&mut tape, &ck.params, &inputs, &ck.config, EVAL_LAMBDA)?;
            let blocks: Vec<&DenseMatrix> = pass.blocks.iter().map(|&b| tape.value(b)).collect();
            let fused = similarity_features(&blocks, EVAL_LAMBDA, ck.config.fusion.mode, ck.config.fusion.singular_tol);
            let dev = fused.row_norms().iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
            (format!("checkpoint fusion={} items={}", ck.config.fusion.mode, fused.rows()), dev)
        }
        None => {
            let mode: FusionMode = args.fusion.parse()?;
            let dev = chain_norm_deviation(args.trials, mode, &args.dims, args.max_modalities, &mut Rng::new(seed))?;
            (format!("trials={} fusion={mode}", args.trials), dev)
        }
    };
    let pass = deviation < UNIT_NORM_TOL;
    println!("{label} max_norm_deviation={deviation:e} {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { EXIT_CHECK_FAILED })
}

fn run(cli: Cli) -> Result<u8> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => run_synth(a, &settings)?,
        Command::Ingest(a) => run_ingest(a, &settings)?,
        Command::Split(a) => run_split(a, &settings)?,
        Command::Train(a) => run_train(a, &settings)?,
        Command::Grid(a) => run_grid(a, &settings)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Diagnose(a) => run_diagnose(a, &settings)?,
        Command::FuseCheck(a) => return run_fuse_check(a, &settings),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(e.exit_code())
        }
    }
}
