//! Sheared exponential disks convolved with a Gaussian PSF.

use serde::{Deserialize, Serialize};

use super::DatagenError;

/// Ratio of half-light radius to scale length for an exponential disk.
pub const HALF_LIGHT_TO_SCALE: f64 = 1.6783;
/// FWHM of a Gaussian in units of its standard deviation.
pub const FWHM_TO_SIGMA: f64 = 2.3548;

/// Factor names in storage order.
pub const GALAXY_FACTOR_NAMES: [&str; 5] = ["flux", "radius", "g1", "g2", "psf"];
/// Sampling range of each factor, in [`GALAXY_FACTOR_NAMES`] order.
pub const GALAXY_FACTOR_RANGES: [(f64, f64); 5] = [(1e4, 1e5), (0.1, 1.0), (-0.5, 0.5), (-0.5, 0.5), (0.2, 0.4)];

/// Physical parameters of one galaxy stamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GalaxyFactors {
    /// Total counts.
    pub flux: f64,
    /// Half-light radius in arcseconds.
    pub radius: f64,
    pub g1: f64,
    pub g2: f64,
    /// PSF full width at half maximum, arcseconds.
    pub psf_fwhm: f64,
}

impl GalaxyFactors {
    pub fn from_row(row: &[f64]) -> Self {
        Self { flux: row[0], radius: row[1], g1: row[2], g2: row[3], psf_fwhm: row[4] }
    }

    pub fn to_row(&self) -> [f64; 5] {
        [self.flux, self.radius, self.g1, self.g2, self.psf_fwhm]
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let g2 = self.g1 * self.g1 + self.g2 * self.g2;
        if !(g2 < 1.0) {
            return Err(DatagenError::InvalidShear { g1: self.g1, g2: self.g2 });
        }
        for ((name, (lo, hi)), v) in GALAXY_FACTOR_NAMES.iter().zip(GALAXY_FACTOR_RANGES).zip(self.to_row()) {
            // allow rounding slack at the range edges
            let slack = 1e-9 * (hi - lo);
            if !(v >= lo - slack && v <= hi + slack) {
                return Err(DatagenError::OutOfRange { factor: name, value: v, lo, hi });
            }
        }
        Ok(())
    }
}

/// How rendered images are scaled into `[0, 1]` when building a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the largest pixel in the whole dataset.
    #[default]
    GlobalMax,
    /// Divide each image by its own largest pixel.
    PerImageMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Stamp side in pixels; odd so the galaxy sits on the central pixel.
    pub size: usize,
    /// Arcseconds per pixel.
    pub pixel_scale: f64,
    /// Sub-pixels per pixel side.
    pub oversample: usize,
    /// PSF kernel half-width in standard deviations.
    pub psf_truncation: f64,
    pub normalization: Normalization,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { size: 33, pixel_scale: 0.4, oversample: 3, psf_truncation: 4.0, normalization: Normalization::GlobalMax }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.size % 2 == 0 || self.size == 0 {
            return Err(DatagenError::Config(format!("stamp size must be odd, got {}", self.size)));
        }
        if self.oversample == 0 {
            return Err(DatagenError::Config("oversample must be at least 1".into()));
        }
        if !(self.pixel_scale > 0.0 && self.pixel_scale.is_finite()) || !(self.psf_truncation > 0.0) {
            return Err(DatagenError::Config("pixel scale and PSF truncation must be positive".into()));
        }
        Ok(())
    }
}

/// A rendered stamp in counts, row-major `size×size`.
#[derive(Debug, Clone, PartialEq)]
pub struct GalaxyImage {
    pub pixels: Vec<f64>,
    pub size: usize,
    /// Half-light radius below a quarter pixel.
    pub unresolved: bool,
}

/// Inverse of the shear matrix `S = (1/√(1−|g|²))·[[1+g1, g2], [g2, 1−g1]]`.
///
/// `det S = 1`, so the inverse is the adjugate with the same prefactor.
pub fn inverse_shear(g1: f64, g2: f64) -> [[f64; 2]; 2] {
    let k = 1.0 / (1.0 - g1 * g1 - g2 * g2).sqrt();
    [[k * (1.0 - g1), -k * g2], [-k * g2, k * (1.0 + g1)]]
}

pub fn shear_matrix(g1: f64, g2: f64) -> [[f64; 2]; 2] {
    let k = 1.0 / (1.0 - g1 * g1 - g2 * g2).sqrt();
    [[k * (1.0 + g1), k * g2], [k * g2, k * (1.0 - g1)]]
}

fn gaussian_kernel(sigma_px: f64, truncation: f64) -> Vec<f64> {
    let half = (truncation * sigma_px).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma_px * sigma_px)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution with zero boundary, same-size output.
fn convolve_separable(img: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let jj = j as isize + t as isize - half;
                if (0..n as isize).contains(&jj) {
                    acc += kv * img[i * n + jj as usize];
                }
            }
            tmp[i * n + j] = acc;
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let ii = i as isize + t as isize - half;
                if (0..n as isize).contains(&ii) {
                    acc += kv * tmp[ii as usize * n + j];
                }
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Renders one stamp in counts.
///
/// The profile `exp(−|S⁻¹x| / r_s)` is sampled at sub-pixel centres and scaled so
/// its sum over an unbounded sub-pixel lattice is the flux; the stamp then loses
/// only the light that falls outside it. The PSF is applied on a margin-padded
/// sub-pixel canvas before cropping and summing sub-pixels into pixels.
pub fn render_galaxy(f: &GalaxyFactors, cfg: &RenderConfig) -> Result<GalaxyImage, DatagenError> {
    f.validate()?;
    cfg.validate()?;
    let os = cfg.oversample;
    let fine = cfg.pixel_scale / os as f64;
    let r_s = f.radius / HALF_LIGHT_TO_SCALE;
    let inv = inverse_shear(f.g1, f.g2);
    let profile = |x: f64, y: f64| {
        let u = inv[0][0] * x + inv[0][1] * y;
        let v = inv[1][0] * x + inv[1][1] * y;
        (-(u * u + v * v).sqrt() / r_s).exp()
    };

    let kernel = gaussian_kernel(f.psf_fwhm / FWHM_TO_SIGMA / fine, cfg.psf_truncation);
    let margin = kernel.len() / 2;
    let n_fine = cfg.size * os;
    let n_canvas = n_fine + 2 * margin;
    let centre = (n_canvas as f64 - 1.0) / 2.0;

    // Normalizing lattice: same sub-pixel phase, extended well past the light.
    let g = (f.g1 * f.g1 + f.g2 * f.g2).sqrt();
    let stretch = (1.0 + g) / (1.0 - g * g).sqrt();
    let reach = (15.0 * r_s * stretch / fine).ceil() as isize;
    let half_canvas = (n_canvas / 2) as isize;
    let reach = reach.max(half_canvas);
    let mut z = 0.0;
    for i in -reach..=reach {
        for j in -reach..=reach {
            z += profile(j as f64 * fine, i as f64 * fine);
        }
    }

    let scale = f.flux / z;
    let mut canvas = vec![0.0; n_canvas * n_canvas];
    for i in 0..n_canvas {
        let y = (i as f64 - centre) * fine;
        for j in 0..n_canvas {
            let x = (j as f64 - centre) * fine;
            canvas[i * n_canvas + j] = scale * profile(x, y);
        }
    }
    let blurred = convolve_separable(&canvas, n_canvas, &kernel);

    let n = cfg.size;
    let mut pixels = vec![0.0; n * n];
    for i in 0..n_fine {
        for j in 0..n_fine {
            pixels[(i / os) * n + j / os] += blurred[(i + margin) * n_canvas + j + margin];
        }
    }
    Ok(GalaxyImage { pixels, size: n, unresolved: f.radius < 0.25 * cfg.pixel_scale })
}
