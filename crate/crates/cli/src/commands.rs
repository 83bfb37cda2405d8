use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use auxvae::datagen::{build_dataset, split, Dataset, DatasetKind, RenderConfig};
use auxvae::experiments::{
    perturb_csv, perturb_study, robustness_curve, traverse, PerturbTarget, PerturbationSpec, TraversalSpec, DEFAULT_EPSILONS,
};
use auxvae::trainer::{evaluate, grid_search, train_on, Grid, ModelCheckpoint, TrainConfig};

use crate::manifest::RunManifest;

/// A configuration problem the user has to fix (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Options shared by every subcommand.
pub struct Common {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

fn write_output(manifest: &mut RunManifest, path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub kind: String,
    pub n: usize,
    pub seed: u64,
    /// File name inside the output directory.
    pub output: String,
    pub render: RenderConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { kind: "galaxy".into(), n: 16384, seed: 0, output: "dataset.axvd".into(), render: RenderConfig::default() }
    }
}

#[derive(Serialize)]
struct ResolvedGenerate<'a> {
    #[serde(flatten)]
    config: &'a GenerateConfig,
    factor_names: &'static [&'static str; 5],
    factor_ranges: &'static [(f64, f64); 5],
    fingerprint: String,
    unresolved: usize,
}

pub fn generate(common: &Common) -> Result<()> {
    let mut cfg: GenerateConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let kind: DatasetKind = cfg.kind.parse().map_err(|e: auxvae::datagen::DatagenError| UsageError(e.to_string()))?;
    let (ds, report) = build_dataset(kind, cfg.n, cfg.seed, &cfg.render).map_err(|e| match e {
        auxvae::datagen::DatagenError::Io(_) => anyhow::Error::from(e),
        other => UsageError(other.to_string()).into(),
    })?;
    let resolved = ResolvedGenerate {
        config: &cfg,
        factor_names: kind.factor_names(),
        factor_ranges: kind.factor_ranges(),
        fingerprint: ds.fingerprint_hex(),
        unresolved: report.unresolved.len(),
    };
    let mut manifest = RunManifest::new("generate", &resolved, Some(cfg.seed))?;
    manifest.input(&common.config)?;
    let path = common.out.join(&cfg.output);
    write_output(&mut manifest, &path, &ds.to_bytes())?;
    if !report.unresolved.is_empty() {
        eprintln!("warning: {} sources have a half-light radius below a quarter pixel", report.unresolved.len());
    }
    println!("wrote {} ({} × {:?}, fingerprint {})", path.display(), ds.len(), ds.image_shape(), ds.fingerprint_hex());
    manifest.finish(&common.out)?;
    Ok(())
}

pub fn train(common: &Common) -> Result<()> {
    let mut cfg: TrainConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let ds = Dataset::load(&cfg.dataset).with_context(|| format!("loading {}", cfg.dataset.display()))?;
    let (train_split, _, _) = split(&ds, cfg.split_seed);
    let run = train_on(&cfg, &train_split)?;
    let mut manifest = RunManifest::new("train", &cfg, Some(cfg.seed))?;
    manifest.input(&common.config)?;
    manifest.input(&cfg.dataset)?;
    write_output(&mut manifest, &common.out.join("checkpoint.axvc"), &run.checkpoint.to_bytes())?;
    write_output(&mut manifest, &common.out.join("train_log.csv"), run.log_csv.as_bytes())?;
    if let Some(last) = run.losses.last() {
        println!("trained {} steps; final loss {:.4} (recon {:.4}, kl {:.4})", run.losses.len(), last.total, last.recon, last.kl);
    }
    manifest.finish(&common.out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub train: TrainConfig,
    pub grid: Grid,
}

pub fn gridsearch(common: &Common) -> Result<()> {
    let mut cfg: GridConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
    if cfg.grid.cells().is_empty() {
        bail!(UsageError("hyperparameter grid is empty".into()));
    }
    let ds = Dataset::load(&cfg.train.dataset).with_context(|| format!("loading {}", cfg.train.dataset.display()))?;
    let (train_split, val_split, _) = split(&ds, cfg.train.split_seed);
    let result = grid_search(&cfg.grid, &cfg.train, &train_split, &val_split)?;
    let mut manifest = RunManifest::new("gridsearch", &cfg, Some(cfg.train.seed))?;
    manifest.input(&common.config)?;
    manifest.input(&cfg.train.dataset)?;
    write_output(&mut manifest, &common.out.join("grid.csv"), result.to_csv().as_bytes())?;
    write_output(&mut manifest, &common.out.join("best.toml"), result.best.to_toml().as_bytes())?;
    let b = &result.best.loss;
    println!("best cell: beta={} lambda1={} lambda2={}", b.beta, b.lambda1, b.lambda2);
    manifest.finish(&common.out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
    All,
}

/// Loads the checkpoint and the requested split of its dataset.
fn load_split(checkpoint: &Path, dataset: Option<&Path>, which: SplitName) -> Result<(ModelCheckpoint, Dataset, PathBuf)> {
    let ckpt = ModelCheckpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let path = dataset.map(Path::to_path_buf).unwrap_or_else(|| ckpt.config.dataset.clone());
    let ds = Dataset::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if ds.image_shape() != ckpt.model.arch.image {
        bail!(UsageError(format!(
            "dataset images {:?} do not match the checkpoint's {:?}",
            ds.image_shape(),
            ckpt.model.arch.image
        )));
    }
    let (train, val, test) = split(&ds, ckpt.config.split_seed);
    let part = match which {
        SplitName::Train => train,
        SplitName::Val => val,
        SplitName::Test => test,
        SplitName::All => ds,
    };
    Ok((ckpt, part, path))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub checkpoint: PathBuf,
    /// Defaults to the dataset recorded in the checkpoint.
    pub dataset: Option<PathBuf>,
    pub split: SplitName,
}

pub fn evaluate_cmd(common: &Common) -> Result<()> {
    let cfg: EvaluateConfig = read_config(&common.config)?;
    let (ckpt, data, ds_path) = load_split(&cfg.checkpoint, cfg.dataset.as_deref(), cfg.split)?;
    let report = evaluate(&ckpt, &data).map_err(|e| match e {
        auxvae::trainer::TrainError::Data(inner) => UsageError(inner.to_string()).into(),
        other => anyhow::Error::from(other),
    })?;
    let mut manifest = RunManifest::new("evaluate", &cfg, None)?;
    manifest.input(&common.config)?;
    manifest.input(&cfg.checkpoint)?;
    manifest.input(&ds_path)?;
    write_output(&mut manifest, &common.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    println!(
        "LDS {:.4}  SAP {:.4}  MSE {:.6}  SSIM median {:.4} (n={})",
        report.lds, report.sap, report.mse, report.ssim.median, report.ssim.count
    );
    manifest.finish(&common.out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraverseConfig {
    pub checkpoint: PathBuf,
    pub dataset: Option<PathBuf>,
    pub split: SplitName,
    /// Latents to sweep; all of them when absent.
    pub latents: Option<Vec<usize>>,
    pub steps: usize,
    pub base_index: usize,
    pub sigmas: f64,
}

impl Default for TraverseConfig {
    fn default() -> Self {
        let t = TraversalSpec::default();
        Self {
            checkpoint: PathBuf::new(),
            dataset: None,
            split: SplitName::Test,
            latents: None,
            steps: t.steps,
            base_index: t.base_index,
            sigmas: t.sigmas,
        }
    }
}

pub fn traverse_cmd(common: &Common) -> Result<()> {
    let cfg: TraverseConfig = read_config(&common.config)?;
    let (ckpt, data, ds_path) = load_split(&cfg.checkpoint, cfg.dataset.as_deref(), cfg.split)?;
    let latents = cfg.latents.clone().unwrap_or_else(|| (0..ckpt.model.arch.d_z).collect());
    let mut manifest = RunManifest::new("traverse", &cfg, None)?;
    manifest.input(&common.config)?;
    manifest.input(&cfg.checkpoint)?;
    manifest.input(&ds_path)?;
    let mut sensitivity = String::from("latent,sensitivity\n");
    for j in latents {
        let spec = TraversalSpec { latent: j, steps: cfg.steps, base_index: cfg.base_index, sigmas: cfg.sigmas };
        let t = traverse(&ckpt, &data, &spec).map_err(|e| UsageError(e.to_string()))?;
        write_output(&mut manifest, &common.out.join(format!("traverse_z{j}.pgm")), &t.to_pgm())?;
        write_output(&mut manifest, &common.out.join(format!("traverse_z{j}.csv")), t.to_csv().as_bytes())?;
        sensitivity.push_str(&format!("{j},{}\n", t.sensitivity()));
    }
    write_output(&mut manifest, &common.out.join("sensitivity.csv"), sensitivity.as_bytes())?;
    manifest.finish(&common.out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub checkpoint: PathBuf,
    pub dataset: Option<PathBuf>,
    pub split: SplitName,
    pub targets: Vec<PerturbTarget>,
    pub scale: f64,
    /// At most this many images; 1000 or the split size, whichever is smaller, when absent.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            dataset: None,
            split: SplitName::Test,
            targets: vec![PerturbTarget::None, PerturbTarget::Aux, PerturbTarget::Recon],
            scale: 1.0,
            samples: None,
            seed: 0,
        }
    }
}

pub fn perturb_cmd(common: &Common) -> Result<()> {
    let mut cfg: PerturbConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let (ckpt, data, ds_path) = load_split(&cfg.checkpoint, cfg.dataset.as_deref(), cfg.split)?;
    let samples = cfg.samples.unwrap_or(data.len().min(PerturbationSpec::default().samples));
    let results = cfg
        .targets
        .iter()
        .map(|&target| {
            let spec = PerturbationSpec { target, scale: cfg.scale, samples };
            perturb_study(&ckpt, &data, &spec, cfg.seed).map_err(|e| UsageError(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut manifest = RunManifest::new("perturb", &cfg, Some(cfg.seed))?;
    manifest.input(&common.config)?;
    manifest.input(&cfg.checkpoint)?;
    manifest.input(&ds_path)?;
    write_output(&mut manifest, &common.out.join("perturb.csv"), perturb_csv(&results).as_bytes())?;
    for r in &results {
        println!("{:>5}: median SSIM {:.4}", r.target.to_string(), r.summary.median);
    }
    manifest.finish(&common.out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub checkpoint: PathBuf,
    pub dataset: Option<PathBuf>,
    pub split: SplitName,
    pub epsilons: Vec<f64>,
    /// Attack only the first this-many images of the split.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            dataset: None,
            split: SplitName::Test,
            epsilons: DEFAULT_EPSILONS.to_vec(),
            samples: None,
            seed: 0,
        }
    }
}

pub fn attack_cmd(common: &Common) -> Result<()> {
    let mut cfg: AttackConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(bad) = cfg.epsilons.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        bail!(UsageError(format!("epsilon must be non-negative, got {bad}")));
    }
    let (ckpt, mut data, ds_path) = load_split(&cfg.checkpoint, cfg.dataset.as_deref(), cfg.split)?;
    if let Some(n) = cfg.samples {
        if n > data.len() {
            bail!(UsageError(format!("requested {n} samples but the split has {}", data.len())));
        }
        data = data.subset(&(0..n).collect::<Vec<_>>());
    }
    let curve = robustness_curve(&ckpt, &data, &cfg.epsilons, cfg.seed)?;
    let mut manifest = RunManifest::new("attack", &cfg, Some(cfg.seed))?;
    manifest.input(&common.config)?;
    manifest.input(&cfg.checkpoint)?;
    manifest.input(&ds_path)?;
    write_output(&mut manifest, &common.out.join("robustness.csv"), curve.to_csv().as_bytes())?;
    for (e, m) in curve.epsilons.iter().zip(curve.medians()) {
        println!("eps {e:<6} median SSIM {m:.4}");
    }
    manifest.finish(&common.out)?;
    Ok(())
}

/// Default configuration of a subcommand, as TOML.
pub fn default_config(command: &str) -> String {
    let text = match command {
        "generate" => toml::to_string(&GenerateConfig::default()),
        "train" => toml::to_string(&TrainConfig::default()),
        "gridsearch" => toml::to_string(&GridConfig {
            train: TrainConfig::default(),
            grid: Grid { beta: vec![1.0, 5.0, 10.0], lambda1: vec![0.5, 1.0], lambda2: vec![0.1, 1.0] },
        }),
        "evaluate" => toml::to_string(&EvaluateConfig { checkpoint: "checkpoint.axvc".into(), ..Default::default() }),
        "traverse" => toml::to_string(&TraverseConfig { checkpoint: "checkpoint.axvc".into(), ..Default::default() }),
        "perturb" => toml::to_string(&PerturbConfig { checkpoint: "checkpoint.axvc".into(), ..Default::default() }),
        "attack" => toml::to_string(&AttackConfig { checkpoint: "checkpoint.axvc".into(), ..Default::default() }),
        _ => return String::new(),
    };
    text.expect("default configs serialize")
}
