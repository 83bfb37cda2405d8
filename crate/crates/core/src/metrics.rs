//! Evaluation measures: LDS, SAP, SSIM, MSE and the factor–latent correlation matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::batch_corr;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("SAP needs at least two latents, got {0}")]
    TooFewLatents(usize),
    #[error("image {h}×{w} is smaller than the {win}×{win} window")]
    ImageTooSmall { h: usize, w: usize, win: usize },
    #[error("expected a matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("empty correlation matrix")]
    Empty,
}

fn matrix_dims(t: &Tensor<f64>) -> Result<(usize, usize), MetricsError> {
    match t.shape() {
        [n, m] => Ok((*n, *m)),
        other => Err(MetricsError::NotMatrix(other.to_vec())),
    }
}

/// `Corr(u_j, z_l)` over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrMatrixReport {
    /// Row `j` holds factor `j` against every latent.
    pub corr: Vec<Vec<f64>>,
    pub factor_names: Vec<String>,
    pub latent_indices: Vec<usize>,
    pub samples: usize,
}

/// Correlation matrix with the same definition (and ε) as the training loss.
pub fn corr_report(u: &Tensor<f64>, z: &Tensor<f64>, factor_names: &[String]) -> Result<CorrMatrixReport, MetricsError> {
    let (n, d) = matrix_dims(u)?;
    let (nz, d_z) = matrix_dims(z)?;
    if n != nz {
        return Err(MetricsError::ShapeMismatch(u.shape().to_vec(), z.shape().to_vec()));
    }
    if n < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: n });
    }
    let g = Graph::<f64>::new();
    let c = batch_corr(g.constant(u.clone()), g.constant(z.clone()), 1e-8)
        .expect("validated shapes")
        .value();
    let corr = (0..d).map(|j| (0..d_z).map(|l| c.at2(j, l).clamp(-1.0, 1.0)).collect()).collect();
    let factor_names = if factor_names.len() == d {
        factor_names.to_vec()
    } else {
        (0..d).map(|j| format!("u{j}")).collect()
    };
    Ok(CorrMatrixReport { corr, factor_names, latent_indices: (0..d_z).collect(), samples: n })
}

/// Linear Disentanglement Score: mean over factors of `max|c| / Σ|c|`.
///
/// An all-zero row contributes `1/d_Z`. The result lies in `[1/d_Z, 1]`.
pub fn lds(report: &CorrMatrixReport) -> Result<f64, MetricsError> {
    let rows = &report.corr;
    let d_z = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d_z == 0 {
        return Err(MetricsError::Empty);
    }
    let total: f64 = rows
        .iter()
        .map(|row| {
            let sum: f64 = row.iter().map(|c| c.abs()).sum();
            let max = row.iter().map(|c| c.abs()).fold(0.0, f64::max);
            if sum > 0.0 { max / sum } else { 1.0 / d_z as f64 }
        })
        .sum();
    Ok(total / rows.len() as f64)
}

/// Separated Attribute Predictability for continuous factors.
///
/// `S[j][l]` is the R² of an ordinary least-squares fit of `u_j` on `z_l`;
/// the score is the mean gap between the best and second-best latent.
pub fn sap(u: &Tensor<f64>, z: &Tensor<f64>) -> Result<f64, MetricsError> {
    let (n, d) = matrix_dims(u)?;
    let (nz, d_z) = matrix_dims(z)?;
    if n != nz {
        return Err(MetricsError::ShapeMismatch(u.shape().to_vec(), z.shape().to_vec()));
    }
    if d_z < 2 {
        return Err(MetricsError::TooFewLatents(d_z));
    }
    if n < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: n });
    }
    if d == 0 {
        return Err(MetricsError::Empty);
    }
    let column = |t: &Tensor<f64>, j: usize, m: usize| -> Vec<f64> { (0..n).map(|i| t.data()[i * m + j]).collect() };
    let stats = |x: &[f64]| {
        let mean = x.iter().sum::<f64>() / n as f64;
        let ss = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        (mean, ss)
    };
    let zs: Vec<(Vec<f64>, f64, f64)> = (0..d_z)
        .map(|l| {
            let c = column(z, l, d_z);
            let (m, ss) = stats(&c);
            (c, m, ss)
        })
        .collect();
    let mut gap = 0.0;
    for j in 0..d {
        let uj = column(u, j, d);
        let (mu, ssu) = stats(&uj);
        let mut scores: Vec<f64> = zs
            .iter()
            .map(|(zl, mz, ssz)| {
                if *ssz <= 0.0 || ssu <= 0.0 {
                    return 0.0;
                }
                let sxy: f64 = uj.iter().zip(zl).map(|(a, b)| (a - mu) * (b - mz)).sum();
                // univariate OLS: R² = 1 − SSE/SST = Sxy² / (Sxx·Syy)
                (sxy * sxy / (ssz * ssu)).clamp(0.0, 1.0)
            })
            .collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        gap += scores[0] - scores[1];
    }
    Ok(gap / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Dynamic range of pixel values.
    pub l: f64,
    pub k1: f64,
    pub k2: f64,
    /// Side of the square uniform window.
    pub win: usize,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { l: 1.0, k1: 0.01, k2: 0.03, win: 7 }
    }
}

/// Mean SSIM over every `win×win` window lying fully inside the `h×w` images.
///
/// Window statistics use the unbiased (N−1) covariance.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, p: SsimParams) -> Result<f64, MetricsError> {
    if x.len() != h * w || y.len() != h * w {
        return Err(MetricsError::ShapeMismatch(vec![x.len()], vec![y.len()]));
    }
    if h < p.win || w < p.win || p.win < 2 {
        return Err(MetricsError::ImageTooSmall { h, w, win: p.win });
    }
    let c1 = (p.k1 * p.l).powi(2);
    let c2 = (p.k2 * p.l).powi(2);
    let np = (p.win * p.win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - p.win {
        for j in 0..=w - p.win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in i..i + p.win {
                for b in j..j + p.win {
                    let (xv, yv) = (x[a * w + b], y[a * w + b]);
                    sx += xv;
                    sy += yv;
                    sxx += xv * xv;
                    syy += yv * yv;
                    sxy += xv * yv;
                }
            }
            let (mx, my) = (sx / np, sy / np);
            let cov_norm = np / (np - 1.0);
            let vx = (sxx / np - mx * mx) * cov_norm;
            let vy = (syy / np - my * my) * cov_norm;
            let vxy = (sxy / np - mx * my) * cov_norm;
            let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean squared difference.
pub fn mse(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::ShapeMismatch(vec![x.len()], vec![y.len()]));
    }
    if x.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}

/// Distribution of per-image SSIM values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SsimSummary {
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl SsimSummary {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            p10: q(0.1),
            p90: q(0.9),
            min: v[0],
            max: v[v.len() - 1],
            count: v.len(),
        }
    }
}

/// Per-image SSIM between two `N×C×H×W` stacks (channels averaged).
pub fn ssim_per_image(a: &Tensor<f64>, b: &Tensor<f64>, p: SsimParams) -> Result<Vec<f64>, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let [n, c, h, w] = *a.shape() else { return Err(MetricsError::NotMatrix(a.shape().to_vec())) };
    let plane = h * w;
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                s += ssim(&a.data()[off..off + plane], &b.data()[off..off + plane], h, w, p)?;
            }
            Ok(s / c as f64)
        })
        .collect()
}

/// Evaluation summary for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub lds: f64,
    pub sap: f64,
    pub mse: f64,
    pub ssim: SsimSummary,
    pub corr: CorrMatrixReport,
}

impl MetricsReport {
    /// `metric,value` rows followed by the factor × latent correlation block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let rows = [
            ("lds", self.lds),
            ("sap", self.sap),
            ("mse", self.mse),
            ("ssim_mean", self.ssim.mean),
            ("ssim_median", self.ssim.median),
            ("ssim_p10", self.ssim.p10),
            ("ssim_p90", self.ssim.p90),
            ("ssim_min", self.ssim.min),
            ("ssim_max", self.ssim.max),
            ("samples", self.corr.samples as f64),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k},{v}");
        }
        out.push('\n');
        out.push_str("factor");
        for l in &self.corr.latent_indices {
            let _ = write!(out, ",z{l}");
        }
        out.push('\n');
        for (name, row) in self.corr.factor_names.iter().zip(&self.corr.corr) {
            out.push_str(name);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report(rows: Vec<Vec<f64>>) -> CorrMatrixReport {
        let d_z = rows[0].len();
        CorrMatrixReport {
            factor_names: (0..rows.len()).map(|j| format!("u{j}")).collect(),
            corr: rows,
            latent_indices: (0..d_z).collect(),
            samples: 100,
        }
    }

    #[test]
    fn lds_examples() {
        assert_eq!(lds(&report(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])).unwrap(), 1.0);
        let v = lds(&report(vec![vec![0.4; 3], vec![-0.4; 3]])).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert!((lds(&report(vec![vec![0.0; 4]])).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn lds_bounds_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let d = rng.random_range(1..5);
            let d_z = rng.random_range(1..8);
            let rows = (0..d).map(|_| (0..d_z).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let v = lds(&report(rows)).unwrap();
            assert!(v >= 1.0 / d_z as f64 - 1e-12 && v <= 1.0 + 1e-12);
        }
    }

    fn uniform(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(vec![n, m], (0..n * m).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn sap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let u = uniform(n, 2, &mut rng);
        let noise = uniform(n, 3, &mut rng);
        let mut z = Vec::with_capacity(n * 4);
        for i in 0..n {
            z.extend_from_slice(&[u.at2(i, 0), u.at2(i, 1), noise.at2(i, 0), noise.at2(i, 1)]);
        }
        let z = Tensor::new(vec![n, 4], z).unwrap();
        assert!(sap(&u, &z).unwrap() > 0.95);
        assert!(sap(&u, &noise).unwrap() < 0.05);
        let u1 = u.select_columns(&[0]);
        let dup = Tensor::new(vec![n, 2], (0..n).flat_map(|i| [u.at2(i, 0), u.at2(i, 0)]).collect()).unwrap();
        assert!(sap(&u1, &dup).unwrap().abs() < 1e-12);
        assert_eq!(sap(&u1, &u1), Err(MetricsError::TooFewLatents(1)));
    }

    #[test]
    fn sap_is_invariant_to_positive_affine_latent_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = uniform(500, 2, &mut rng);
        let z = uniform(500, 3, &mut rng).map(|v| v * 0.3);
        let mut z = Tensor::new(vec![500, 3], (0..500).flat_map(|i| [u.at2(i, 0) + z.at2(i, 0), z.at2(i, 1), u.at2(i, 1) * 0.5 + z.at2(i, 2)]).collect()).unwrap();
        let before = sap(&u, &z).unwrap();
        for i in 0..500 {
            z.data_mut()[i * 3] = 3.0 * z.data()[i * 3] - 7.0;
        }
        assert!((sap(&u, &z).unwrap() - before).abs() < 1e-10);
    }

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..h * w).map(|_| rng.random()).collect()
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(12, 10, &mut rng);
        assert!((ssim(&x, &x, 12, 10, SsimParams::default()).unwrap() - 1.0).abs() < 1e-8);
        let a = vec![0.5; 64];
        let b = vec![0.25; 64];
        let v = ssim(&a, &b, 8, 8, SsimParams::default()).unwrap();
        let expected = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.8001).abs() < 1e-4);
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..64).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&x, &y, 8, 8, SsimParams::default()).unwrap() < 0.0);
    }

    #[test]
    fn ssim_errors() {
        let x = vec![0.0; 36];
        assert!(matches!(ssim(&x, &x, 6, 6, SsimParams::default()), Err(MetricsError::ImageTooSmall { .. })));
        assert!(matches!(ssim(&x, &x[..35], 6, 6, SsimParams { win: 3, ..Default::default() }), Err(MetricsError::ShapeMismatch(..))));
    }

    #[test]
    fn mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(9, 9, &mut rng);
        let y = random_image(9, 9, &mut rng);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(mse(&[0.0; 16], &[1.0; 16]).unwrap(), 1.0);
        let mut acc = 0.0;
        for i in 0..x.len() {
            acc += (x[i] - y[i]) * (x[i] - y[i]);
        }
        assert!((mse(&x, &y).unwrap() - acc / x.len() as f64).abs() < 1e-12);
        assert_eq!(mse(&x, &y).unwrap(), mse(&y, &x).unwrap());
    }

    #[test]
    fn corr_report_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5000;
        let u = uniform(n, 2, &mut rng);
        let noise = uniform(n, 2, &mut rng);
        let z = Tensor::new(vec![n, 4], (0..n).flat_map(|i| [u.at2(i, 0), u.at2(i, 1), noise.at2(i, 0), noise.at2(i, 1)]).collect()).unwrap();
        let r = corr_report(&u, &z, &["a".into(), "b".into()]).unwrap();
        assert!((r.corr[0][0] - 1.0).abs() < 1e-6 && (r.corr[1][1] - 1.0).abs() < 1e-6);
        assert!(r.corr[0][1].abs() < 0.05 && r.corr[1][2].abs() < 0.05);
        let g = Graph::<f64>::new();
        let c = batch_corr(g.constant(u.clone()), g.constant(z.clone()), 1e-8).unwrap().value();
        for j in 0..2 {
            for l in 0..4 {
                assert!((c.at2(j, l) - r.corr[j][l]).abs() < 1e-12);
            }
        }
        let two = Tensor::from_f64([2, 1], &[0.0, 1.0]).unwrap();
        let zz = Tensor::from_f64([2, 2], &[3.0, 1.0, 5.0, 0.0]).unwrap();
        let r = corr_report(&two, &zz, &[]).unwrap();
        assert!((r.corr[0][0] - 1.0).abs() < 1e-6 && (r.corr[0][1] + 1.0).abs() < 1e-6);
        assert!(matches!(corr_report(&two.gather_rows(&[0]), &zz.gather_rows(&[0]), &[]), Err(MetricsError::TooFewSamples { .. })));
    }

    #[test]
    fn csv_has_metric_rows_and_correlation_block() {
        let r = MetricsReport {
            lds: 0.5,
            sap: 0.2,
            mse: 0.01,
            ssim: SsimSummary::from_values(&[0.5, 0.7, 0.9]),
            corr: report(vec![vec![0.1, 0.9]]),
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,value\nlds,0.5\n"));
        assert!(csv.contains("factor,z0,z1\nu0,0.1,0.9\n"));
        assert_eq!(r.ssim.median, 0.7);
    }

    proptest! {
        #[test]
        fn lds_invariant_under_permutation_and_sign(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let base = lds(&report(rows.clone())).unwrap();
            let perm = [3, 0, 4, 2, 1];
            let flip = rng.random_range(0..5);
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&p| if p == flip { -r[p] } else { r[p] }).collect()).collect();
            prop_assert!((lds(&report(moved)).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn ssim_symmetry_and_scale_invariance(seed in 0u64..1000, s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_image(9, 11, &mut rng);
            let y = random_image(9, 11, &mut rng);
            let p = SsimParams::default();
            let a = ssim(&x, &y, 9, 11, p).unwrap();
            prop_assert!((a - ssim(&y, &x, 9, 11, p).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
            let xs: Vec<f64> = x.iter().map(|v| v * s).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * s).collect();
            let scaled = ssim(&xs, &ys, 9, 11, SsimParams { l: s, ..p }).unwrap();
            prop_assert!((scaled - a).abs() < 1e-9);
        }
    }
}
