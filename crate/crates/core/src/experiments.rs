//! Latent traversals, the auxiliary/residual perturbation study and FGSM robustness.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DatagenError, Dataset};
use crate::genmodel::ModelError;
use crate::metrics::{ssim_per_image, MetricsError, SsimParams, SsimSummary};
use crate::objective::{aux_vae_loss, beta_vae_loss, CorrMode, CorrTracker, LossConfig, ObjectiveError};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::trainer::{ModelCheckpoint, ObjectiveKind};

/// Images per attack batch; matches the training batch so the loss is the same function.
const ATTACK_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("latent index {index} out of range for d_Z = {d_z}")]
    LatentOutOfRange { index: usize, d_z: usize },
    #[error("image index {index} out of range for {len} images")]
    ImageOutOfRange { index: usize, len: usize },
    #[error("traversal needs at least one step")]
    NoSteps,
    #[error("cannot perturb the {0} block: it has no latents")]
    EmptyBlock(PerturbTarget),
    #[error("requested {requested} samples but only {available} are available")]
    TooManySamples { requested: usize, available: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("non-finite input gradient in FGSM")]
    NonFiniteGradient,
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean and (population) standard deviation of every column of an `N×M` matrix.
fn column_stats(t: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (t.shape()[0], t.shape()[1]);
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (j, acc) in mean.iter_mut().enumerate() {
            *acc += t.at2(i, j) as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    let mut var = vec![0.0; m];
    for i in 0..n {
        for (j, acc) in var.iter_mut().enumerate() {
            *acc += (t.at2(i, j) as f64 - mean[j]).powi(2);
        }
    }
    (mean, var.into_iter().map(|v| (v / n.max(1) as f64).sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraversalSpec {
    pub latent: usize,
    /// Strip length. One step decodes the base value itself.
    pub steps: usize,
    /// Index of the base image in the evaluation split.
    pub base_index: usize,
    /// Half-width of the range in standard deviations of `μ_j` over the split.
    pub sigmas: f64,
}

impl Default for TraversalSpec {
    fn default() -> Self {
        Self { latent: 0, steps: 8, base_index: 0, sigmas: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    pub latent: usize,
    /// Value substituted for `z_j` at each step, increasing.
    pub values: Vec<f64>,
    /// `steps×C×H×W` decoded images, left to right.
    pub images: Tensor<f32>,
    /// Posterior mean of the base image.
    pub base: Vec<f32>,
}

impl Traversal {
    /// Mean Euclidean distance between neighbouring strip images (0 for a single step).
    pub fn sensitivity(&self) -> f64 {
        let s = self.images.shape()[0];
        if s < 2 {
            return 0.0;
        }
        let total: f64 = (0..s - 1)
            .map(|k| {
                let (a, b) = (self.images.gather_rows(&[k]), self.images.gather_rows(&[k + 1]));
                a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
            })
            .sum();
        total / (s - 1) as f64
    }

    /// `step,latent,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,latent,value\n");
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{k},{},{v}", self.latent);
        }
        out
    }

    /// Binary PGM of the strip: images side by side, 2-pixel black separators,
    /// channels averaged.
    pub fn to_pgm(&self) -> Vec<u8> {
        strip_pgm(&self.images)
    }
}

/// Encodes a `N×C×H×W` stack as one horizontal P5 strip.
pub fn strip_pgm(images: &Tensor<f32>) -> Vec<u8> {
    const GAP: usize = 2;
    let [n, c, h, w] = [images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]];
    let width = n * w + n.saturating_sub(1) * GAP;
    let mut pixels = vec![0u8; width * h];
    for k in 0..n {
        let x0 = k * (w + GAP);
        for i in 0..h {
            for j in 0..w {
                let v: f32 = (0..c).map(|ch| images.data()[((k * c + ch) * h + i) * w + j]).sum::<f32>() / c as f32;
                pixels[i * width + x0 + j] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P5\n{width} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    out
}

/// Decodes the base image's posterior mean with coordinate `latent` swept
/// over `μ_j ± sigmas·σ_j`, where the statistics are taken over `data`.
pub fn traverse(ckpt: &ModelCheckpoint, data: &Dataset, spec: &TraversalSpec) -> Result<Traversal, ExperimentError> {
    let d_z = ckpt.model.arch.d_z;
    if spec.latent >= d_z {
        return Err(ExperimentError::LatentOutOfRange { index: spec.latent, d_z });
    }
    if spec.steps == 0 {
        return Err(ExperimentError::NoSteps);
    }
    if spec.base_index >= data.len() {
        return Err(ExperimentError::ImageOutOfRange { index: spec.base_index, len: data.len() });
    }
    let (mu, _) = ckpt.model.encode_tensor(&data.images)?;
    let base = mu.row(spec.base_index).to_vec();
    let values: Vec<f64> = if spec.steps == 1 {
        vec![base[spec.latent] as f64]
    } else {
        let (_, sd) = column_stats(&mu);
        let centre = base[spec.latent] as f64;
        let (lo, hi) = (centre - spec.sigmas * sd[spec.latent], centre + spec.sigmas * sd[spec.latent]);
        (0..spec.steps).map(|k| lo + (hi - lo) * k as f64 / (spec.steps - 1) as f64).collect()
    };
    let mut z = Vec::with_capacity(values.len() * d_z);
    for &v in &values {
        let mut row = base.clone();
        row[spec.latent] = if spec.steps == 1 { base[spec.latent] } else { v as f32 };
        z.extend(row);
    }
    let images = ckpt.model.decode_tensor(&Tensor::new(vec![values.len(), d_z], z)?)?;
    Ok(Traversal { latent: spec.latent, values, images, base })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbTarget {
    None,
    Aux,
    Recon,
}

impl std::fmt::Display for PerturbTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PerturbTarget::None => "none",
            PerturbTarget::Aux => "aux",
            PerturbTarget::Recon => "recon",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSpec {
    pub target: PerturbTarget,
    /// Noise standard deviation in units of the empirical std of each `μ_j`.
    pub scale: f64,
    pub samples: usize,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { target: PerturbTarget::Aux, scale: 1.0, samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbResult {
    pub target: PerturbTarget,
    /// SSIM(original, decoded perturbed code), one per image.
    pub ssim: Vec<f64>,
    pub summary: SsimSummary,
}

/// Adds Gaussian noise to one latent block of each image's posterior mean,
/// decodes, and scores the result against the original image.
///
/// Uses the first `spec.samples` images of `data`; the per-dimension noise
/// scale is the std of `μ` over those images.
pub fn perturb_study(
    ckpt: &ModelCheckpoint,
    data: &Dataset,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<PerturbResult, ExperimentError> {
    let arch = &ckpt.model.arch;
    if spec.samples > data.len() {
        return Err(ExperimentError::TooManySamples { requested: spec.samples, available: data.len() });
    }
    if !(spec.scale >= 0.0 && spec.scale.is_finite()) {
        return Err(ExperimentError::Invalid(format!("noise scale {}", spec.scale)));
    }
    let block = match spec.target {
        PerturbTarget::None => 0..0,
        PerturbTarget::Aux => 0..arch.d,
        PerturbTarget::Recon => arch.d..arch.d_z,
    };
    if spec.target != PerturbTarget::None && block.is_empty() {
        return Err(ExperimentError::EmptyBlock(spec.target));
    }
    let idx: Vec<usize> = (0..spec.samples).collect();
    let images = data.images.gather_rows(&idx);
    let (mut z, _) = ckpt.model.encode_tensor(&images)?;
    if !block.is_empty() {
        let (_, sd) = column_stats(&z);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_z = arch.d_z;
        for i in 0..spec.samples {
            for j in block.clone() {
                let e: f64 = StandardNormal.sample(&mut rng);
                z.data_mut()[i * d_z + j] += (spec.scale * sd[j] * e) as f32;
            }
        }
    }
    let decoded = ckpt.model.decode_tensor(&z)?;
    let ssim = ssim_per_image(&images.cast(), &decoded.cast(), SsimParams::default())?;
    Ok(PerturbResult { target: spec.target, summary: SsimSummary::from_values(&ssim), ssim })
}

/// `target,image,ssim` rows for several studies.
pub fn perturb_csv(results: &[PerturbResult]) -> String {
    let mut out = String::from("target,image,ssim\n");
    for r in results {
        for (i, s) in r.ssim.iter().enumerate() {
            let _ = writeln!(out, "{},{i},{s}", r.target);
        }
    }
    out
}

/// One-step FGSM: `x' = clip(x + ε·sign(∇ₓL), 0, 1)` with `L` the checkpoint's
/// own training loss at its stored weights.
///
/// `u` holds the auxiliary factors of the images (`B×d`). Images are attacked
/// in batches of 64; a batch of one image drops the correlation terms, which
/// need two samples. The reparameterization noise is drawn from `seed`.
pub fn fgsm_attack(
    ckpt: &ModelCheckpoint,
    x: &Tensor<f32>,
    u: &Tensor<f64>,
    eps: f64,
    seed: u64,
) -> Result<Tensor<f32>, ExperimentError> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(ExperimentError::Invalid(format!("epsilon {eps}")));
    }
    let n = x.shape()[0];
    if u.shape()[0] != n {
        return Err(TensorError::ShapeMismatch { op: "fgsm_attack", lhs: x.shape().to_vec(), rhs: u.shape().to_vec() }.into());
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let arch = &ckpt.model.arch;
    let cfg = &ckpt.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(x.numel());
    let mut start = 0;
    while start < n {
        let end = (start + ATTACK_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let b = idx.len();
        let g = Graph::<f32>::new();
        let params = ckpt.model.params.attach_frozen(&g);
        let xb = x.gather_rows(&idx);
        let xv = g.leaf(xb.clone(), true);
        let noise: Vec<_> = (0..cfg.loss.j.max(1))
            .map(|_| {
                let draws = (0..b * arch.d_z).map(|_| StandardNormal.sample(&mut rng)).collect();
                g.constant(Tensor::new(vec![b, arch.d_z], draws).expect("noise shape"))
            })
            .collect();
        let loss = match cfg.objective {
            ObjectiveKind::Aux => {
                let loss_cfg = if b < 2 { LossConfig { lambda1: 0.0, lambda2: 0.0, ..cfg.loss } } else { cfg.loss };
                let mut tracker = CorrTracker::new(CorrMode::Batch);
                let ub = u.gather_rows(&idx);
                aux_vae_loss(arch, &params, xv, &ub, ckpt.n_train.max(1), &loss_cfg, &noise, &mut tracker)?.total
            }
            ObjectiveKind::Beta => beta_vae_loss(arch, &params, xv, cfg.loss.beta, &noise)?.total,
        };
        let grad = g.backward(loss)?.get(xv)?;
        if !grad.all_finite() {
            return Err(ExperimentError::NonFiniteGradient);
        }
        let step = eps as f32;
        out.extend(xb.data().iter().zip(grad.data()).map(|(&p, &gr)| {
            let s = if gr > 0.0 {
                1.0
            } else if gr < 0.0 {
                -1.0
            } else {
                0.0
            };
            (p + step * s).clamp(0.0, 1.0)
        }));
        start = end;
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Budgets used when none are given.
pub const DEFAULT_EPSILONS: [f64; 4] = [0.0, 0.01, 0.05, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub epsilons: Vec<f64>,
    /// `ssim[k][i]`: image `i` reconstructed after an attack with `epsilons[k]`.
    pub ssim: Vec<Vec<f64>>,
}

impl RobustnessCurve {
    pub fn medians(&self) -> Vec<f64> {
        self.ssim.iter().map(|s| SsimSummary::from_values(s).median).collect()
    }

    /// `epsilon,image,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,image,ssim\n");
        for (e, col) in self.epsilons.iter().zip(&self.ssim) {
            for (i, s) in col.iter().enumerate() {
                let _ = writeln!(out, "{e},{i},{s}");
            }
        }
        out
    }
}

/// Attacks every image of `data` at each budget and scores the reconstruction
/// of the attacked image against the clean one.
pub fn robustness_curve(
    ckpt: &ModelCheckpoint,
    data: &Dataset,
    epsilons: &[f64],
    seed: u64,
) -> Result<RobustnessCurve, ExperimentError> {
    let u: Tensor<f64> = data.select_factors(&ckpt.config.aux_factors())?.cast();
    let clean: Tensor<f64> = data.images.cast();
    let ssim = epsilons
        .iter()
        .map(|&eps| {
            let attacked = fgsm_attack(ckpt, &data.images, &u, eps, seed)?;
            let recon = ckpt.model.reconstruct(&attacked)?;
            Ok(ssim_per_image(&clean, &recon.cast(), SsimParams::default())?)
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(RobustnessCurve { epsilons: epsilons.to_vec(), ssim })
}
