//! Factor-controlled synthetic datasets and their binary file format.

mod dsprites;
mod galaxy;
mod lhs;

pub use dsprites::{render_dsprite, Shape, SpriteFactors, SPRITE_FACTOR_NAMES, SPRITE_FACTOR_RANGES, SPRITE_SIZE};
pub use galaxy::{
    inverse_shear, render_galaxy, shear_matrix, GalaxyFactors, GalaxyImage, Normalization, RenderConfig,
    GALAXY_FACTOR_NAMES, GALAXY_FACTOR_RANGES,
};
pub use lhs::lhs_sample;

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Smallest dataset [`build_dataset`] will produce.
pub const MIN_DATASET_SIZE: usize = 10;

const MAGIC: &[u8; 4] = b"AXVD";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("range {dim} is degenerate: [{lo}, {hi}]")]
    DegenerateRange { dim: usize, lo: f64, hi: f64 },
    #[error("shear |g| must be below 1, got g1={g1}, g2={g2}")]
    InvalidShear { g1: f64, g2: f64 },
    #[error("{factor}={value} outside [{lo}, {hi}]")]
    OutOfRange { factor: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("unknown dataset kind `{0}` (expected galaxy or dsprites)")]
    UnknownKind(String),
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error("invalid render config: {0}")]
    Config(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Galaxy,
    Dsprites,
}

impl DatasetKind {
    pub fn factor_names(self) -> &'static [&'static str; 5] {
        match self {
            DatasetKind::Galaxy => &GALAXY_FACTOR_NAMES,
            DatasetKind::Dsprites => &SPRITE_FACTOR_NAMES,
        }
    }

    pub fn factor_ranges(self) -> &'static [(f64, f64); 5] {
        match self {
            DatasetKind::Galaxy => &GALAXY_FACTOR_RANGES,
            DatasetKind::Dsprites => &SPRITE_FACTOR_RANGES,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = DatagenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "galaxy" => Ok(DatasetKind::Galaxy),
            "dsprites" => Ok(DatasetKind::Dsprites),
            other => Err(DatagenError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Galaxy => "galaxy",
            DatasetKind::Dsprites => "dsprites",
        })
    }
}

/// Images with their generating factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×C×H×W`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    /// `N×F`, each column mapped from its sampling range onto `[0, 1]`.
    pub factors: Tensor<f32>,
    /// `N×F` in physical units.
    pub raw_factors: Tensor<f32>,
    pub names: Vec<String>,
    /// SHA-256 over the generator inputs (kind, size, seed, render config).
    pub fingerprint: [u8; 32],
}

/// Side information from [`build_dataset`] that is not stored in the file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuildReport {
    /// Indices of galaxies whose half-light radius is below a quarter pixel.
    pub unresolved: Vec<usize>,
    /// Largest pixel before normalization.
    pub max_pixel: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn factor_index(&self, name: &str) -> Result<usize, DatagenError> {
        self.names.iter().position(|n| n == name).ok_or_else(|| DatagenError::UnknownFactor(name.to_string()))
    }

    /// Normalized factor columns in the order given, `N×names.len()`.
    pub fn select_factors(&self, names: &[impl AsRef<str>]) -> Result<Tensor<f32>, DatagenError> {
        let cols = names.iter().map(|n| self.factor_index(n.as_ref())).collect::<Result<Vec<_>, _>>()?;
        Ok(self.factors.select_columns(&cols))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_rows(idx),
            factors: self.factors.gather_rows(idx),
            raw_factors: self.raw_factors.gather_rows(idx),
            names: self.names.clone(),
            fingerprint: self.fingerprint,
        }
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [c, h, w] = self.image_shape();
        let f = self.names.len();
        let mut out = Vec::with_capacity(32 + 4 * (self.images.numel() + 2 * self.factors.numel()));
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, c as u32, h as u32, w as u32, f as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in [&self.images, &self.factors, &self.raw_factors] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for name in &self.names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out.extend_from_slice(&self.fingerprint);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatagenError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DatagenError::Format("bad magic (expected AXVD)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DatagenError::Format(format!("unsupported version {version}")));
        }
        let [n, c, h, w, f] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
        let images = Tensor::new(vec![n, c, h, w], r.f32s(n * c * h * w)?)?;
        let factors = Tensor::new(vec![n, f], r.f32s(n * f)?)?;
        let raw_factors = Tensor::new(vec![n, f], r.f32s(n * f)?)?;
        let names = (0..f)
            .map(|_| {
                let len = r.u32()? as usize;
                String::from_utf8(r.take(len)?.to_vec()).map_err(|_| DatagenError::Format("factor name is not UTF-8".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if r.pos != bytes.len() {
            return Err(DatagenError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Dataset { images, factors, raw_factors, names, fingerprint })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatagenError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&self.to_bytes())?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatagenError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], DatagenError> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DatagenError::Format("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DatagenError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, DatagenError> {
        let len = count.checked_mul(4).ok_or_else(|| DatagenError::Format("size overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }
}

fn fingerprint(kind: DatasetKind, n: usize, seed: u64, cfg: &RenderConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"auxvae-datagen-v1\0");
    h.update(kind.to_string().as_bytes());
    h.update((n as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(cfg).expect("render config serializes"));
    h.finalize().into()
}

/// Factor rows for `n` samples: a Latin-hypercube design over the factor box.
///
/// For sprites the shape alternates square/ellipse and the continuous factors
/// come from the same stratified design.
pub fn sample_factors(kind: DatasetKind, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, DatagenError> {
    match kind {
        DatasetKind::Galaxy => lhs_sample(n, &GALAXY_FACTOR_RANGES, seed),
        DatasetKind::Dsprites => {
            let mut rows = lhs_sample(n, &SPRITE_FACTOR_RANGES[1..], seed)?;
            for (i, r) in rows.iter_mut().enumerate() {
                r.insert(0, (i % 2) as f64);
            }
            Ok(rows)
        }
    }
}

/// Generates `n` samples, normalizes intensities into `[0, 1]` and records a fingerprint.
pub fn build_dataset(
    kind: DatasetKind,
    n: usize,
    seed: u64,
    cfg: &RenderConfig,
) -> Result<(Dataset, BuildReport), DatagenError> {
    if n < MIN_DATASET_SIZE {
        return Err(DatagenError::TooFewSamples { needed: MIN_DATASET_SIZE, got: n });
    }
    cfg.validate()?;
    let rows = sample_factors(kind, n, seed)?;
    let (side, rendered): (usize, Vec<(Vec<f64>, bool)>) = match kind {
        DatasetKind::Galaxy => {
            let imgs = rows
                .par_iter()
                .map(|r| render_galaxy(&GalaxyFactors::from_row(r), cfg).map(|g| (g.pixels, g.unresolved)))
                .collect::<Result<Vec<_>, _>>()?;
            (cfg.size, imgs)
        }
        DatasetKind::Dsprites => {
            let imgs = rows
                .par_iter()
                .map(|r| {
                    let shape = if r[0] < 0.5 { Shape::Square } else { Shape::Ellipse };
                    let f = SpriteFactors { shape, scale: r[1], orientation: r[2], posx: r[3], posy: r[4] };
                    (render_dsprite(&f), false)
                })
                .collect();
            (SPRITE_SIZE, imgs)
        }
    };

    let max_pixel = rendered.iter().flat_map(|(p, _)| p.iter().copied()).fold(0.0, f64::max);
    if !(max_pixel > 0.0) {
        return Err(DatagenError::Config("every rendered image is blank".into()));
    }
    let mut images = Vec::with_capacity(n * side * side);
    for (pixels, _) in &rendered {
        let scale = match cfg.normalization {
            Normalization::GlobalMax => max_pixel,
            Normalization::PerImageMax => pixels.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE),
        };
        images.extend(pixels.iter().map(|&p| (p / scale).clamp(0.0, 1.0) as f32));
    }
    let unresolved = rendered.iter().enumerate().filter(|(_, (_, u))| *u).map(|(i, _)| i).collect();

    let ranges = kind.factor_ranges();
    let f = ranges.len();
    let raw: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    let norm: Vec<f32> = rows
        .iter()
        .flat_map(|r| r.iter().zip(ranges).map(|(&v, &(lo, hi))| ((v - lo) / (hi - lo)).clamp(0.0, 1.0) as f32))
        .collect();
    let ds = Dataset {
        images: Tensor::new(vec![n, 1, side, side], images)?,
        factors: Tensor::new(vec![n, f], norm)?,
        raw_factors: Tensor::new(vec![n, f], raw)?,
        names: kind.factor_names().iter().map(|s| s.to_string()).collect(),
        fingerprint: fingerprint(kind, n, seed, cfg),
    };
    Ok((ds, BuildReport { unresolved, max_pixel }))
}

/// Index sets of a train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Part sizes for `n` items in the given ratios.
///
/// Each part gets the floor of its exact share; the leftover items go one each
/// to the parts with the largest fractional remainders (earlier parts win ties).
pub fn split_sizes(n: usize, ratios: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    let exact = ratios.map(|r| n as u64 * r as u64);
    let mut sizes = exact.map(|e| (e / total) as usize);
    let mut order = [0, 1, 2];
    order.sort_by_key(|&i| std::cmp::Reverse(exact[i] % total));
    let left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        sizes[i] += 1;
    }
    sizes
}

/// Shuffles `0..n` with `seed` and cuts it 7:2:1.
pub fn split_indices(n: usize, seed: u64) -> SplitIndices {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = split_sizes(n, [7, 2, 1]);
    let test = idx.split_off(a + b);
    let val = idx.split_off(a);
    SplitIndices { train: idx, val, test }
}

/// Train, validation and test subsets in the ratio 7:2:1.
pub fn split(ds: &Dataset, seed: u64) -> (Dataset, Dataset, Dataset) {
    let s = split_indices(ds.len(), seed);
    (ds.subset(&s.train), ds.subset(&s.val), ds.subset(&s.test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_galaxies() -> (Dataset, BuildReport) {
        build_dataset(DatasetKind::Galaxy, 24, 7, &RenderConfig::default()).unwrap()
    }

    #[test]
    fn galaxy_dataset_is_normalized_and_in_range() {
        let (ds, report) = small_galaxies();
        assert_eq!(ds.images.shape(), &[24, 1, 33, 33]);
        assert_eq!(ds.images.data().iter().copied().fold(0.0f32, f32::max), 1.0);
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(report.max_pixel > 0.0);
        for i in 0..ds.len() {
            let raw = ds.raw_factors.row(i);
            for (k, &(lo, hi)) in GALAXY_FACTOR_RANGES.iter().enumerate() {
                let v = raw[k] as f64;
                let slack = 1e-6 * hi.abs().max(1.0);
                assert!(v >= lo - slack && v <= hi + slack, "{}={v}", GALAXY_FACTOR_NAMES[k]);
                let u = ds.factors.at2(i, k) as f64;
                assert!((u - (v - lo) / (hi - lo)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn builds_are_bit_identical() {
        let (a, _) = small_galaxies();
        let (b, _) = small_galaxies();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let (c, _) = build_dataset(DatasetKind::Galaxy, 24, 8, &RenderConfig::default()).unwrap();
        assert_ne!(a.fingerprint, c.fingerprint);
    }

    #[test]
    fn too_small_datasets_are_rejected() {
        assert!(matches!(
            build_dataset(DatasetKind::Galaxy, 9, 0, &RenderConfig::default()),
            Err(DatagenError::TooFewSamples { needed: 10, got: 9 })
        ));
    }

    #[test]
    fn sprite_dataset_has_binary_shape_factor() {
        let (ds, _) = build_dataset(DatasetKind::Dsprites, 12, 1, &RenderConfig::default()).unwrap();
        assert_eq!(ds.image_shape(), [1, 64, 64]);
        let shapes: Vec<f32> = (0..12).map(|i| ds.factors.at2(i, 0)).collect();
        assert!(shapes.iter().all(|&s| s == 0.0 || s == 1.0));
        assert_eq!(ds.images.data().iter().copied().fold(0.0f32, f32::max), 1.0);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let (ds, _) = small_galaxies();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.axvd");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(std::fs::read(&path).unwrap(), ds.to_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (ds, _) = small_galaxies();
        let bytes = ds.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(DatagenError::Format(_))));
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1]), Err(DatagenError::Format(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(Dataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn split_sizes_follow_floor_then_distribute() {
        assert_eq!(split_sizes(10, [7, 2, 1]), [7, 2, 1]);
        assert_eq!(split_sizes(16384, [7, 2, 1]), [11469, 3277, 1638]);
        assert_eq!(split_sizes(2048, [7, 2, 1]), [1434, 409, 205]);
    }

    #[test]
    fn factor_selection_by_name() {
        let (ds, _) = small_galaxies();
        let u = ds.select_factors(&["g1", "radius"]).unwrap();
        assert_eq!(u.shape(), &[24, 2]);
        assert_eq!(u.at2(3, 1), ds.factors.at2(3, 1));
        assert!(matches!(ds.select_factors(&["colour"]), Err(DatagenError::UnknownFactor(_))));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 10usize..3000, seed in any::<u64>()) {
            let s = split_indices(n, seed);
            let sizes = split_sizes(n, [7, 2, 1]);
            prop_assert_eq!([s.train.len(), s.val.len(), s.test.len()], sizes);
            for (size, share) in sizes.iter().zip([0.7, 0.2, 0.1]) {
                prop_assert!((*size as f64 - share * n as f64).abs() < 1.0);
            }
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(split_indices(n, seed), s);
        }
    }
}
