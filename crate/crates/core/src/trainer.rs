//! Training loop, checkpoints, evaluation and hyperparameter selection.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{split, DatagenError, Dataset};
use crate::genmodel::{ArchitectureDescriptor, Model, ModelError, Variant};
use crate::metrics::{corr_report, lds, mse, sap, ssim_per_image, MetricsError, MetricsReport, SsimParams, SsimSummary};
use crate::nn::{AdamConfig, NnError, ParamStore};
use crate::objective::{aux_vae_loss, beta_vae_loss, CorrMode, CorrTracker, LossBreakdown, LossConfig, ObjectiveError};
use crate::tensor::{Graph, Tensor, TensorError};

const CHECKPOINT_MAGIC: &[u8; 4] = b"AXVC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(
        "non-finite loss at epoch {epoch}, step {step} (component: {component}); last finite step: {}",
        last_finite.map_or("none".to_string(), |s| s.to_string())
    )]
    NonFinite { epoch: usize, step: u64, component: &'static str, last_finite: Option<u64> },
    #[error("dataset image shape {found:?} does not match the model input {expected:?}")]
    ImageShape { expected: [usize; 3], found: [usize; 3] },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which factors serve as auxiliary variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Case {
    Named(NamedCase),
    Custom(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedCase {
    /// Every generating factor.
    Case1,
    /// Only the factors that shape the galaxy: radius and shear.
    Case2,
    /// Only the less important ones: flux and PSF width.
    Case3,
}

impl Case {
    pub fn factors(&self) -> Vec<String> {
        let names: &[&str] = match self {
            Case::Named(NamedCase::Case1) => &["flux", "radius", "g1", "g2", "psf"],
            Case::Named(NamedCase::Case2) => &["radius", "g1", "g2"],
            Case::Named(NamedCase::Case3) => &["flux", "psf"],
            Case::Custom(list) => return list.clone(),
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Case::Named(NamedCase::Case1) => f.write_str("case1"),
            Case::Named(NamedCase::Case2) => f.write_str("case2"),
            Case::Named(NamedCase::Case3) => f.write_str("case3"),
            Case::Custom(list) => write!(f, "[{}]", list.join(", ")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Conditional prior plus dependency regularizers; `d` = number of case factors.
    #[default]
    Aux,
    /// Standard-normal prior, no auxiliary block (`d = 0`); case factors are used for evaluation only.
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub case: Case,
    pub objective: ObjectiveKind,
    pub variant: Variant,
    pub d_z: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Seed of the 7:2:1 split; kept apart from `seed` so runs share a split.
    pub split_seed: u64,
    pub loss: LossConfig,
    pub corr: CorrMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("galaxy.axvd"),
            case: Case::Named(NamedCase::Case1),
            objective: ObjectiveKind::Aux,
            variant: Variant::Mlp,
            d_z: 10,
            batch_size: 64,
            lr: 1e-3,
            epochs: 30,
            seed: 0,
            split_seed: 0,
            loss: LossConfig::default(),
            corr: CorrMode::Batch,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Auxiliary factor names fed to the loss (empty for the β-VAE objective).
    pub fn aux_factors(&self) -> Vec<String> {
        match self.objective {
            ObjectiveKind::Aux => self.case.factors(),
            ObjectiveKind::Beta => Vec::new(),
        }
    }

    /// Width of the auxiliary latent block.
    pub fn d(&self) -> usize {
        self.aux_factors().len()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.d() > self.d_z {
            return bad(format!("{} auxiliary factors do not fit in d_z = {}", self.d(), self.d_z));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if let CorrMode::Ema { momentum } = self.corr {
            if !(0.0..1.0).contains(&momentum) {
                return bad(format!("EMA momentum must lie in [0, 1), got {momentum}"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.case.factors().into_iter().find(|f| !seen.insert(f.clone())) {
            return bad(format!("factor `{dup}` listed twice"));
        }
        Ok(())
    }

    pub fn architecture(&self, image: [usize; 3]) -> Result<ArchitectureDescriptor, TrainError> {
        Ok(ArchitectureDescriptor::build(self.variant, image, self.d_z, self.d())?)
    }
}

/// A trained model with everything needed to reproduce and evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub final_epoch: usize,
    /// Training-split size, which sets the auxiliary prior variance `1/n`.
    pub n_train: usize,
    /// Hex SHA-256 of the training log CSV.
    pub log_digest: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    final_epoch: usize,
    n_train: usize,
    log_digest: String,
    config: TrainConfig,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_text(&mut out, &serde_json::to_string(&self.model.arch).expect("descriptor serializes"));
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            put_text(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let snap = Snapshot { final_epoch: self.final_epoch, n_train: self.n_train, log_digest: self.log_digest.clone(), config: self.config.clone() };
        put_text(&mut out, &toml::to_string(&snap).expect("snapshot serializes"));
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Format("bad magic (expected AXVC)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Format(format!("unsupported version {version}")));
        }
        let arch: ArchitectureDescriptor =
            serde_json::from_str(&r.text()?).map_err(|e| TrainError::Format(format!("architecture: {e}")))?;
        arch.validate()?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.text()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let n = n.ok_or_else(|| TrainError::Format("parameter size overflow".into()))?;
            let data = r.f32s(n)?;
            params.insert(name, Tensor::new(shape, data)?);
        }
        let expected = arch.init_params::<f32>(0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(TrainError::Format(format!("parameter `{name}` missing or misshapen"))),
            }
        }
        if params.len() != expected.len() {
            return Err(TrainError::Format("unexpected extra parameters".into()));
        }
        let snap: Snapshot = toml::from_str(&r.text()?).map_err(|e| TrainError::Format(format!("config: {e}")))?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(TrainError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model: Model { arch, params }, config: snap.config, final_epoch: snap.final_epoch, n_train: snap.n_train, log_digest: snap.log_digest, seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Format("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self) -> Result<String, TrainError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| TrainError::Format("text field is not UTF-8".into()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, TrainError> {
        let len = count.checked_mul(4).ok_or_else(|| TrainError::Format("size overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: ModelCheckpoint,
    /// One entry per optimizer step.
    pub losses: Vec<LossBreakdown>,
    pub log_csv: String,
}

/// Loads the dataset named in `cfg`, splits it and trains on the training part.
pub fn train(cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    let ds = Dataset::load(&cfg.dataset)?;
    let (train_split, _, _) = split(&ds, cfg.split_seed);
    train_on(cfg, &train_split)
}

fn first_non_finite(b: &LossBreakdown) -> &'static str {
    [("recon", b.recon), ("kl", b.kl), ("intra_explicit", b.intra_explicit), ("inter", b.inter)]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map_or("total", |(n, _)| n)
}

/// Trains on an in-memory training split; `n_train` in the prior is its length.
///
/// Each epoch visits a fresh permutation in batches of `batch_size`; a final
/// batch with fewer than two samples is dropped. Shuffling and noise use
/// separate ChaCha streams of `cfg.seed`, so the β-VAE and Aux-VAE paths see
/// identical batches and noise.
pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    let image = data.image_shape();
    let arch = cfg.architecture(image)?;
    let mut params = arch.init_params::<f32>(cfg.seed)?;
    let eval_names = cfg.case.factors();
    data.select_factors(&eval_names)?;
    let u_all: Tensor<f64> = data.select_factors(&cfg.aux_factors())?.cast();
    let n = data.len();
    if n < 2 {
        return Err(ObjectiveError::EmptyTrainingSet.into());
    }

    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut tracker = CorrTracker::new(cfg.corr);

    let mut losses = Vec::new();
    let mut log_csv = format!("{}\n", LossBreakdown::CSV_HEADER);
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let b = batch.len();
            let g = Graph::<f32>::new();
            let bound = params.attach(&g);
            let x = g.constant(data.images.gather_rows(batch));
            let noise: Vec<_> = (0..cfg.loss.j.max(1))
                .map(|_| {
                    let draws = (0..b * arch.d_z).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
                    g.constant(Tensor::new(vec![b, arch.d_z], draws).expect("noise shape"))
                })
                .collect();
            let terms = match cfg.objective {
                ObjectiveKind::Aux => {
                    let u = u_all.gather_rows(batch);
                    aux_vae_loss(&arch, &bound, x, &u, n, &cfg.loss, &noise, &mut tracker)?
                }
                ObjectiveKind::Beta => beta_vae_loss(&arch, &bound, x, cfg.loss.beta, &noise)?,
            };
            let br = terms.breakdown()?;
            if !br.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    component: first_non_finite(&br),
                    last_finite: step.checked_sub(1),
                });
            }
            let grads = g.backward(terms.total)?;
            params.adam_step(&bound.grads(&grads)?, &adam)?;
            log_csv.push_str(&br.csv_row(epoch, step));
            log_csv.push('\n');
            losses.push(br);
            step += 1;
        }
    }
    let log_digest = hex::encode(Sha256::digest(log_csv.as_bytes()));
    let checkpoint =
        ModelCheckpoint { model: Model { arch, params }, config: cfg.clone(), final_epoch: cfg.epochs, n_train: n, log_digest, seed: cfg.seed };
    Ok(TrainRun { checkpoint, losses, log_csv })
}

/// Metrics from precomputed latents and reconstructions.
///
/// `u` holds the evaluation factors (`N×F`), `mu` the posterior means (`N×d_Z`).
pub fn evaluate_latents(
    u: &Tensor<f64>,
    mu: &Tensor<f64>,
    names: &[String],
    images: &Tensor<f64>,
    recon: &Tensor<f64>,
) -> Result<MetricsReport, TrainError> {
    let corr = corr_report(u, mu, names)?;
    let ssim = ssim_per_image(images, recon, SsimParams::default())?;
    Ok(MetricsReport {
        lds: lds(&corr)?,
        sap: sap(u, mu)?,
        mse: mse(images.data(), recon.data())?,
        ssim: SsimSummary::from_values(&ssim),
        corr,
    })
}

/// Per-image SSIM of the noise-free reconstructions.
pub fn reconstruction_ssim(ckpt: &ModelCheckpoint, data: &Dataset) -> Result<Vec<f64>, TrainError> {
    let recon = ckpt.model.reconstruct(&data.images)?;
    Ok(ssim_per_image(&data.images.cast(), &recon.cast(), SsimParams::default())?)
}

/// LDS, SAP, MSE, SSIM and correlations of `ckpt` on `data`, against the case factors.
pub fn evaluate(ckpt: &ModelCheckpoint, data: &Dataset) -> Result<MetricsReport, TrainError> {
    let image = data.image_shape();
    if image != ckpt.model.arch.image {
        return Err(TrainError::ImageShape { expected: ckpt.model.arch.image, found: image });
    }
    let names = ckpt.config.case.factors();
    let u: Tensor<f64> = data.select_factors(&names)?.cast();
    let (mu, _) = ckpt.model.encode_tensor(&data.images)?;
    let recon = ckpt.model.reconstruct(&data.images)?;
    evaluate_latents(&u, &mu.cast(), &names, &data.images.cast(), &recon.cast())
}

/// Candidate values for the three loss weights; the grid is their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub beta: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Grid {
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &b in &self.beta {
            for &l1 in &self.lambda1 {
                for &l2 in &self.lambda2 {
                    out.push((b, l1, l2));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub mse: f64,
    pub lds: f64,
    /// Min-max standardized MSE over the grid.
    pub mse_std: f64,
    /// Min-max standardized `1 − LDS` over the grid.
    pub one_minus_lds_std: f64,
    pub score: f64,
    /// 1 = best.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// Rows in grid order.
    pub rows: Vec<GridRow>,
    pub best: TrainConfig,
}

impl GridResult {
    pub const CSV_HEADER: &'static str = "rank,beta,lambda1,lambda2,seed,mse,lds,mse_std,one_minus_lds_std,score";

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<&GridRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.rank);
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.rank, r.beta, r.lambda1, r.lambda2, r.seed, r.mse, r.lds, r.mse_std, r.one_minus_lds_std, r.score
            ));
        }
        out
    }
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
}

/// Ranks `(mse, lds)` pairs: lowest product of min-max standardized MSE and
/// `1 − LDS` wins; ties go to the lower sum of the two standardized scores,
/// then to grid order.
pub fn rank_cells(scores: &[(f64, f64)]) -> Vec<(f64, f64, f64, usize)> {
    let mse_std = min_max(&scores.iter().map(|s| s.0).collect::<Vec<_>>());
    let lds_std = min_max(&scores.iter().map(|s| 1.0 - s.1).collect::<Vec<_>>());
    let product: Vec<f64> = mse_std.iter().zip(&lds_std).map(|(a, b)| a * b).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        product[a]
            .total_cmp(&product[b])
            .then((mse_std[a] + lds_std[a]).total_cmp(&(mse_std[b] + lds_std[b])))
            .then(a.cmp(&b))
    });
    let mut rank = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    (0..scores.len()).map(|i| (mse_std[i], lds_std[i], product[i], rank[i])).collect()
}

/// Seed for grid cell `index`, derived from the base seed.
pub fn cell_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains every cell on `train_split`, scores it on `val_split` and ranks the grid.
pub fn grid_search(grid: &Grid, base: &TrainConfig, train_split: &Dataset, val_split: &Dataset) -> Result<GridResult, TrainError> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let configs: Vec<TrainConfig> = cells
        .iter()
        .enumerate()
        .map(|(i, &(beta, lambda1, lambda2))| TrainConfig {
            seed: cell_seed(base.seed, i),
            loss: LossConfig { beta, lambda1, lambda2, ..base.loss },
            ..base.clone()
        })
        .collect();
    let scores = configs
        .par_iter()
        .map(|cfg| {
            let run = train_on(cfg, train_split)?;
            let report = evaluate(&run.checkpoint, val_split)?;
            Ok((report.mse, report.lds))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let ranked = rank_cells(&scores);
    let rows: Vec<GridRow> = configs
        .iter()
        .zip(&scores)
        .zip(&ranked)
        .map(|((cfg, &(mse, lds)), &(mse_std, one_minus_lds_std, score, rank))| GridRow {
            beta: cfg.loss.beta,
            lambda1: cfg.loss.lambda1,
            lambda2: cfg.loss.lambda2,
            seed: cfg.seed,
            mse,
            lds,
            mse_std,
            one_minus_lds_std,
            score,
            rank,
        })
        .collect();
    let best = ranked.iter().position(|r| r.3 == 1).expect("non-empty grid");
    Ok(GridResult { rows, best: configs[best].clone() })
}
