//! Loss mathematics: conditional prior, closed-form KL, polynomial dependency
//! metrics and the full Aux-VAE and β-VAE objectives.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genmodel::{decode_logits, encode, partition, reparameterize, ArchitectureDescriptor, ModelError};
use crate::nn::BoundParams;
use crate::tensor::{concat, Graph, Scalar, Tensor, TensorError, Var};

/// Smallest prior variance; keeps `1/var0` finite for degenerate priors.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("correlations need at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("polynomial degree K must be at least 1, got {0}")]
    InvalidDegree(usize),
    #[error("{what} expects a single column, got {cols}")]
    NotSingleColumn { what: &'static str, cols: usize },
    #[error("λ₁ > 0 requires at least one auxiliary latent")]
    NoAuxLatents,
    #[error("auxiliary width {d} exceeds latent width {d_z}")]
    TooManyAux { d: usize, d_z: usize },
    #[error("training-set size must be at least 1")]
    EmptyTrainingSet,
    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),
    #[error("{what}: expected shape {expected:?}, got {found:?}")]
    Shape { what: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Gaussian prior `N(μ₀, diag(var0))` conditional on auxiliary values `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    /// `B×d_Z`; the first `d` columns are `u`, the rest zero.
    pub mu0: Tensor<f64>,
    /// Length `d_Z`; `1/n_train` for auxiliary latents, 1 otherwise.
    pub var0: Vec<f64>,
    pub n_train: usize,
    pub d: usize,
    pub d_z: usize,
}

/// `μ₀ = (u, 0…0)`, `var0 = (1/n…1/n, 1…1)`.
pub fn make_prior(u: &Tensor<f64>, n_train: usize, d_z: usize) -> Result<PriorSpec, ObjectiveError> {
    let (b, d) = match u.shape() {
        [b, d] => (*b, *d),
        other => return Err(ObjectiveError::Shape { what: "u", expected: vec![0, 0], found: other.to_vec() }),
    };
    if d > d_z {
        return Err(ObjectiveError::TooManyAux { d, d_z });
    }
    if n_train == 0 {
        return Err(ObjectiveError::EmptyTrainingSet);
    }
    if !u.all_finite() {
        return Err(ObjectiveError::NonFinite("u"));
    }
    let mut mu0 = vec![0.0; b * d_z];
    for i in 0..b {
        mu0[i * d_z..i * d_z + d].copy_from_slice(u.row(i));
    }
    let aux_var = (1.0 / n_train as f64).max(VAR_FLOOR);
    let var0 = (0..d_z).map(|l| if l < d { aux_var } else { 1.0 }).collect();
    Ok(PriorSpec { mu0: Tensor::new(vec![b, d_z], mu0)?, var0, n_train, d, d_z })
}

/// Standard normal prior for a batch of `b` samples.
pub fn standard_prior(b: usize, d_z: usize) -> PriorSpec {
    PriorSpec { mu0: Tensor::zeros([b, d_z]), var0: vec![1.0; d_z], n_train: 1, d: 0, d_z }
}

/// Mean over the batch of `KL(N(μ, exp(logvar)) ‖ prior)`.
pub fn kl_diag_gaussians<'g, T: Scalar>(
    mu: Var<'g, T>,
    logvar: Var<'g, T>,
    prior: &PriorSpec,
) -> Result<Var<'g, T>, ObjectiveError> {
    let expected = prior.mu0.shape().to_vec();
    for (what, v) in [("mu", mu), ("logvar", logvar)] {
        if v.shape() != expected {
            return Err(ObjectiveError::Shape { what, expected: expected.clone(), found: v.shape() });
        }
        if !v.value().all_finite() {
            return Err(ObjectiveError::NonFinite(what));
        }
    }
    if prior.var0.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(ObjectiveError::NonFinite("prior variance"));
    }
    let g = mu.graph();
    let var0: Vec<f64> = prior.var0.iter().map(|v| v.max(VAR_FLOOR)).collect();
    let log_var0 = g.constant(Tensor::from_f64([prior.d_z], &var0.iter().map(|v| v.ln()).collect::<Vec<_>>())?);
    let inv_var0 = g.constant(Tensor::from_f64([prior.d_z], &var0.iter().map(|v| 1.0 / v).collect::<Vec<_>>())?);
    let mu0 = g.constant(prior.mu0.cast());
    let per_entry = logvar
        .neg()?
        .add(&log_var0)?
        .add_scalar(-1.0)?
        .add(&mu.sub(&mu0)?.square()?.mul(&inv_var0)?)?
        .add(&logvar.exp()?.mul(&inv_var0)?)?;
    let b = expected[0].max(1);
    Ok(per_entry.sum()?.mul_scalar(0.5 / b as f64)?)
}

/// `count` draws `z ~ N(μ₀, var0)`; draw `i` uses prior row `i mod B`.
pub fn sample_conditional_prior(prior: &PriorSpec, count: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = prior.mu0.shape()[0].max(1);
    let sd: Vec<f64> = prior.var0.iter().map(|v| v.max(VAR_FLOOR).sqrt()).collect();
    let mut data = Vec::with_capacity(count * prior.d_z);
    for i in 0..count {
        let row = if prior.mu0.numel() == 0 { vec![0.0; prior.d_z] } else { prior.mu0.row(i % b).to_vec() };
        for (m, s) in row.iter().zip(&sd) {
            let n: f64 = StandardNormal.sample(&mut rng);
            data.push(m + s * n);
        }
    }
    Tensor::new(vec![count, prior.d_z], data).expect("consistent draw count")
}

/// How correlations are estimated inside the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CorrMode {
    /// Sample statistics of the current mini-batch.
    #[default]
    Batch,
    /// Second moments blended with a running average across batches.
    Ema { momentum: f64 },
}

/// Running second moments for [`CorrMode::Ema`], keyed by call site.
#[derive(Debug, Clone, Default)]
pub struct CorrTracker {
    mode: CorrMode,
    running: HashMap<String, [Tensor<f64>; 3]>,
}

impl CorrTracker {
    pub fn new(mode: CorrMode) -> Self {
        Self { mode, running: HashMap::new() }
    }

    pub fn mode(&self) -> CorrMode {
        self.mode
    }
}

fn centered<'g, T: Scalar>(v: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
    v.sub(&v.mean_rows()?)
}

fn batch_size<T: Scalar>(v: &Var<'_, T>, w: &Var<'_, T>) -> Result<usize, ObjectiveError> {
    let (vs, ws) = (v.shape(), w.shape());
    if vs.len() != 2 || ws.len() != 2 || vs[0] != ws[0] {
        return Err(ObjectiveError::Shape { what: "correlation operands", expected: vs, found: ws });
    }
    if vs[0] < 2 {
        return Err(ObjectiveError::BatchTooSmall(vs[0]));
    }
    Ok(vs[0])
}

/// Sample Pearson correlation matrix `m_v×m_w`, with `eps` inside each
/// standard deviation: `cov / (sqrt(var_v + eps) · sqrt(var_w + eps))`.
pub fn batch_corr<'g, T: Scalar>(v: Var<'g, T>, w: Var<'g, T>, eps: f64) -> Result<Var<'g, T>, ObjectiveError> {
    let b = batch_size(&v, &w)?;
    let scale = 1.0 / (b - 1) as f64;
    let (vc, wc) = (centered(v)?, centered(w)?);
    let sd = |c: Var<'g, T>| -> Result<Var<'g, T>, TensorError> { c.square()?.sum_rows()?.mul_scalar(scale)?.add_scalar(eps)?.sqrt() };
    let vn = vc.div(&sd(vc)?)?;
    let wn = wc.div(&sd(wc)?)?;
    Ok(vn.matmul_t(&wn, true, false)?.mul_scalar(scale)?)
}

/// As [`batch_corr`], but in EMA mode the covariance and variances are
/// `momentum·running + (1 − momentum)·batch`, with the running part constant.
pub fn tracked_corr<'g, T: Scalar>(
    v: Var<'g, T>,
    w: Var<'g, T>,
    eps: f64,
    key: &str,
    tracker: &mut CorrTracker,
) -> Result<Var<'g, T>, ObjectiveError> {
    let CorrMode::Ema { momentum } = tracker.mode else {
        return batch_corr(v, w, eps);
    };
    let b = batch_size(&v, &w)?;
    let g = v.graph();
    let scale = 1.0 / (b - 1) as f64;
    let (vc, wc) = (centered(v)?, centered(w)?);
    let batch = [
        vc.matmul_t(&wc, true, false)?.mul_scalar(scale)?,
        vc.square()?.sum_rows()?.mul_scalar(scale)?,
        wc.square()?.sum_rows()?.mul_scalar(scale)?,
    ];
    let blended: Vec<Var<'g, T>> = match tracker.running.get(key) {
        Some(prev) if prev.iter().zip(&batch).all(|(p, b)| p.shape() == b.shape().as_slice()) => batch
            .iter()
            .zip(prev)
            .map(|(cur, p)| cur.mul_scalar(1.0 - momentum)?.add(&g.constant(p.map(|x| x * momentum).cast())))
            .collect::<Result<_, _>>()?,
        _ => batch.to_vec(),
    };
    let [cov, var_v, var_w] = [blended[0], blended[1], blended[2]];
    tracker
        .running
        .insert(key.to_string(), [cov.value().cast(), var_v.value().cast(), var_w.value().cast()]);
    let sd_v = var_v.add_scalar(eps)?.sqrt()?;
    let sd_w = var_w.add_scalar(eps)?.sqrt()?;
    Ok(cov.div(&sd_w)?.transpose()?.div(&sd_v)?.transpose()?)
}

/// Columns `[v, v², …, v^K]`.
fn powers<'g, T: Scalar>(v: Var<'g, T>, k: usize) -> Result<Var<'g, T>, TensorError> {
    let parts = (1..=k as i32).map(|p| v.powi(p)).collect::<Result<Vec<_>, _>>()?;
    concat(&parts, 1)
}

/// Options shared by [`r0`] and [`r1`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DependencyOptions {
    pub k: usize,
    pub eps: f64,
}

impl Default for DependencyOptions {
    fn default() -> Self {
        Self { k: 3, eps: 1e-8 }
    }
}

/// Mean `|Corr(v^k, w^k')|` over every degree pair `1 ≤ k, k' ≤ K` and entry.
pub fn r0<'g, T: Scalar>(v: Var<'g, T>, w: Var<'g, T>, opts: DependencyOptions) -> Result<Var<'g, T>, ObjectiveError> {
    r0_tracked(v, w, opts, "r0", &mut CorrTracker::default())
}

fn r0_tracked<'g, T: Scalar>(
    v: Var<'g, T>,
    w: Var<'g, T>,
    opts: DependencyOptions,
    key: &str,
    tracker: &mut CorrTracker,
) -> Result<Var<'g, T>, ObjectiveError> {
    if opts.k < 1 {
        return Err(ObjectiveError::InvalidDegree(opts.k));
    }
    batch_size(&v, &w)?;
    if v.shape()[1] == 0 || w.shape()[1] == 0 {
        return Ok(v.graph().constant(Tensor::scalar(T::zero())));
    }
    let corr = tracked_corr(powers(v, opts.k)?, powers(w, opts.k)?, opts.eps, key, tracker)?;
    Ok(corr.abs()?.mean()?)
}

/// Mean `1 − |Corr(v^k, w^k')|` over every degree pair, for single columns.
pub fn r1<'g, T: Scalar>(v: Var<'g, T>, w: Var<'g, T>, opts: DependencyOptions) -> Result<Var<'g, T>, ObjectiveError> {
    r1_tracked(v, w, opts, "r1", &mut CorrTracker::default())
}

fn r1_tracked<'g, T: Scalar>(
    v: Var<'g, T>,
    w: Var<'g, T>,
    opts: DependencyOptions,
    key: &str,
    tracker: &mut CorrTracker,
) -> Result<Var<'g, T>, ObjectiveError> {
    for (what, x) in [("r1 first argument", v), ("r1 second argument", w)] {
        let cols = x.shape().get(1).copied().unwrap_or(0);
        if cols != 1 {
            return Err(ObjectiveError::NotSingleColumn { what, cols });
        }
    }
    Ok(r0_tracked(v, w, opts, key, tracker)?.neg()?.add_scalar(1.0)?)
}

/// Weights and options of the Aux-VAE objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Highest polynomial degree in the dependency metrics.
    pub k: usize,
    /// Monte Carlo samples for the reconstruction term.
    pub j: usize,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 5.0, lambda1: 1.0, lambda2: 0.1, k: 3, j: 1, eps: 1e-8 }
    }
}

/// Scalar loss components. `intra_explicit` and `inter` are unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub intra_explicit: f64,
    pub inter: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,step,total,recon,kl,intra_explicit,inter";

    /// `recon + β·kl + λ₁·intra_explicit + λ₂·inter`.
    pub fn weighted_sum(&self) -> f64 {
        self.recon + self.beta * self.kl + self.lambda1 * self.intra_explicit + self.lambda2 * self.inter
    }

    pub fn csv_row(&self, epoch: usize, step: u64) -> String {
        format!(
            "{epoch},{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.total, self.recon, self.kl, self.intra_explicit, self.inter
        )
    }
}

/// Loss components still on the graph.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g, T> {
    pub total: Var<'g, T>,
    pub recon: Var<'g, T>,
    pub kl: Var<'g, T>,
    pub intra_explicit: Var<'g, T>,
    pub inter: Var<'g, T>,
    pub cfg: LossConfig,
}

impl<T: Scalar> LossTerms<'_, T> {
    pub fn breakdown(&self) -> Result<LossBreakdown, ObjectiveError> {
        Ok(LossBreakdown {
            total: self.total.item()?,
            recon: self.recon.item()?,
            kl: self.kl.item()?,
            intra_explicit: self.intra_explicit.item()?,
            inter: self.inter.item()?,
            beta: self.cfg.beta,
            lambda1: self.cfg.lambda1,
            lambda2: self.cfg.lambda2,
        })
    }
}

/// Bernoulli negative log-likelihood summed over pixels, averaged over the
/// batch and over the `J` noise draws.
fn reconstruction<'g, T: Scalar>(
    arch: &ArchitectureDescriptor,
    params: &BoundParams<'g, T>,
    x: Var<'g, T>,
    mu: Var<'g, T>,
    logvar: Var<'g, T>,
    noise: &[Var<'g, T>],
) -> Result<Var<'g, T>, ObjectiveError> {
    if noise.is_empty() {
        return Err(ObjectiveError::Shape { what: "noise draws", expected: vec![1], found: vec![0] });
    }
    let post = crate::genmodel::Posterior { mu, logvar };
    let b = x.shape()[0].max(1);
    let mut acc: Option<Var<'g, T>> = None;
    for n in noise {
        let z = reparameterize(&post, *n)?;
        let nll = decode_logits(arch, params, z)?.bce_with_logits(&x)?.sum()?;
        acc = Some(match acc {
            Some(a) => a.add(&nll)?,
            None => nll,
        });
    }
    Ok(acc.expect("at least one draw").mul_scalar(1.0 / (b * noise.len()) as f64)?)
}

/// Full Aux-VAE objective on a batch.
///
/// `x` is `B×C×H×W`, `u` is `B×d` (normalized auxiliary factors) and `noise`
/// holds `J` standard-normal `B×d_Z` draws. Dependency terms use the posterior
/// means, not samples.
#[allow(clippy::too_many_arguments)]
pub fn aux_vae_loss<'g, T: Scalar>(
    arch: &ArchitectureDescriptor,
    params: &BoundParams<'g, T>,
    x: Var<'g, T>,
    u: &Tensor<f64>,
    n_train: usize,
    cfg: &LossConfig,
    noise: &[Var<'g, T>],
    tracker: &mut CorrTracker,
) -> Result<LossTerms<'g, T>, ObjectiveError> {
    let g: &'g Graph<T> = x.graph();
    let d = arch.d;
    let b = x.shape()[0];
    if u.shape() != [b, d] {
        return Err(ObjectiveError::Shape { what: "u", expected: vec![b, d], found: u.shape().to_vec() });
    }
    if d == 0 && cfg.lambda1 > 0.0 {
        return Err(ObjectiveError::NoAuxLatents);
    }
    let opts = DependencyOptions { k: cfg.k, eps: cfg.eps };
    if opts.k < 1 {
        return Err(ObjectiveError::InvalidDegree(opts.k));
    }
    let regularized = cfg.lambda1 != 0.0 || cfg.lambda2 != 0.0;
    if regularized && b < 2 {
        return Err(ObjectiveError::BatchTooSmall(b));
    }

    let post = encode(arch, params, x)?;
    let recon = reconstruction(arch, params, x, post.mu, post.logvar, noise)?;
    let prior = make_prior(u, n_train, arch.d_z)?;
    let kl = kl_diag_gaussians(post.mu, post.logvar, &prior)?;

    let zero = || g.constant(Tensor::scalar(T::zero()));
    let uv = g.constant(u.cast());
    let (mu_aux, mu_recon) = partition(post.mu, d)?;

    let mut intra = zero();
    if cfg.lambda1 != 0.0 {
        for j in 0..d {
            let u_j = uv.slice(1, j, 1)?;
            let mu_j = mu_aux.slice(1, j, 1)?;
            let others: Vec<usize> = (0..d).filter(|&l| l != j).collect();
            let mu_rest = g.constant(Tensor::zeros([b, 0]));
            let mu_rest = if others.is_empty() {
                mu_rest
            } else {
                concat(&others.iter().map(|&l| mu_aux.slice(1, l, 1)).collect::<Result<Vec<_>, _>>()?, 1)?
            };
            let explicit = r1_tracked(u_j, mu_j, opts, &format!("r1.{j}"), tracker)?;
            let intra_j = r0_tracked(u_j, mu_rest, opts, &format!("r0.aux.{j}"), tracker)?;
            intra = intra.add(&explicit.add(&intra_j)?)?;
        }
    }
    let inter = if cfg.lambda2 != 0.0 { r0_tracked(uv, mu_recon, opts, "r0.recon", tracker)? } else { zero() };

    let total = recon
        .add(&kl.mul_scalar(cfg.beta)?)?
        .add(&intra.mul_scalar(cfg.lambda1)?)?
        .add(&inter.mul_scalar(cfg.lambda2)?)?;
    Ok(LossTerms { total, recon, kl, intra_explicit: intra, inter, cfg: *cfg })
}

/// β-VAE objective: reconstruction plus `β·KL` against a standard normal prior.
pub fn beta_vae_loss<'g, T: Scalar>(
    arch: &ArchitectureDescriptor,
    params: &BoundParams<'g, T>,
    x: Var<'g, T>,
    beta: f64,
    noise: &[Var<'g, T>],
) -> Result<LossTerms<'g, T>, ObjectiveError> {
    let g = x.graph();
    let post = encode(arch, params, x)?;
    let recon = reconstruction(arch, params, x, post.mu, post.logvar, noise)?;
    let kl = kl_diag_gaussians(post.mu, post.logvar, &standard_prior(x.shape()[0], arch.d_z))?;
    let zero = g.constant(Tensor::scalar(T::zero()));
    let total = recon.add(&kl.mul_scalar(beta)?)?;
    let cfg = LossConfig { beta, lambda1: 0.0, lambda2: 0.0, ..LossConfig::default() };
    Ok(LossTerms { total, recon, kl, intra_explicit: zero, inter: zero, cfg })
}
