//! Encoder/decoder pair, reparameterized sampling and the `(z_aux, z_recon)` split.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{init_params, Activation, BoundParams, LayerSpec, NetSpec, NnError, ParamStore};
use crate::tensor::{concat, Graph, Scalar, Tensor, TensorError, Var};

/// Lower and upper bound applied to the encoder's log-variance head.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("auxiliary width {d} outside 0..={d_z}")]
    SplitOutOfRange { d: usize, d_z: usize },
    #[error("input shape {found:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub variant: Variant,
    pub encoder: NetSpec,
    pub decoder: NetSpec,
    pub d_z: usize,
    pub d: usize,
    /// Per-sample image shape `[C, H, W]`.
    pub image: [usize; 3],
}

impl ArchitectureDescriptor {
    /// Fully connected pair: `HW→512→256→2·d_Z` and `d_Z→256→512→HW`.
    pub fn mlp(image: [usize; 3], d_z: usize, d: usize) -> Result<Self, ModelError> {
        let pixels = image.iter().product();
        let encoder = NetSpec::new(
            "encoder",
            image,
            vec![
                LayerSpec::reshape([pixels]),
                LayerSpec::dense(pixels, 512),
                LayerSpec::act(Activation::Relu),
                LayerSpec::dense(512, 256),
                LayerSpec::act(Activation::Relu),
                LayerSpec::dense(256, 2 * d_z),
            ],
        );
        let decoder = NetSpec::new(
            "decoder",
            [d_z],
            vec![
                LayerSpec::dense(d_z, 256),
                LayerSpec::act(Activation::Relu),
                LayerSpec::dense(256, 512),
                LayerSpec::act(Activation::Relu),
                LayerSpec::dense(512, pixels),
                LayerSpec::reshape(image),
                LayerSpec::act(Activation::Sigmoid),
            ],
        );
        let arch = Self { variant: Variant::Mlp, encoder, decoder, d_z, d, image };
        arch.validate()?;
        Ok(arch)
    }

    /// Convolutional pair for 33×33 single-channel stamps.
    ///
    /// The decoder starts with a dense map `d_Z→32` viewed as `32×1×1` so the
    /// transposed-convolution chain `1→2→4→8→33` lands on the image size.
    pub fn conv(image: [usize; 3], d_z: usize, d: usize) -> Result<Self, ModelError> {
        let [c, _, _] = image;
        let encoder = NetSpec::new(
            "encoder",
            image,
            vec![
                LayerSpec::conv2d(c, 32, 4, 2, 1),
                LayerSpec::act(Activation::Relu),
                LayerSpec::conv2d(32, 64, 4, 2, 1),
                LayerSpec::act(Activation::Relu),
                LayerSpec::conv2d(64, 128, 4, 2, 1),
                LayerSpec::act(Activation::Relu),
                LayerSpec::conv2d(128, 256, 4, 2, 1),
                LayerSpec::act(Activation::Relu),
            ],
        );
        let flat: usize = encoder.output_shape()?.iter().product();
        let mut encoder = encoder;
        encoder.layers.extend([
            LayerSpec::reshape([flat]),
            LayerSpec::dense(flat, 256),
            LayerSpec::act(Activation::Relu),
            LayerSpec::dense(256, 2 * d_z),
        ]);
        let decoder = NetSpec::new(
            "decoder",
            [d_z],
            vec![
                LayerSpec::dense(d_z, 32),
                LayerSpec::reshape([32, 1, 1]),
                LayerSpec::conv_transpose2d(32, 128, 4, 2, 1),
                LayerSpec::act(Activation::Relu),
                LayerSpec::conv_transpose2d(128, 64, 4, 2, 1),
                LayerSpec::act(Activation::Relu),
                LayerSpec::conv_transpose2d(64, 32, 4, 2, 1),
                LayerSpec::act(Activation::Relu),
                LayerSpec::conv_transpose2d(32, c, 5, 4, 0),
                LayerSpec::act(Activation::Sigmoid),
            ],
        );
        let arch = Self { variant: Variant::Conv, encoder, decoder, d_z, d, image };
        arch.validate()?;
        Ok(arch)
    }

    pub fn build(variant: Variant, image: [usize; 3], d_z: usize, d: usize) -> Result<Self, ModelError> {
        match variant {
            Variant::Mlp => Self::mlp(image, d_z, d),
            Variant::Conv => Self::conv(image, d_z, d),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Architecture(m));
        if self.d_z == 0 {
            return bad("d_Z must be positive".into());
        }
        if self.d > self.d_z {
            return Err(ModelError::SplitOutOfRange { d: self.d, d_z: self.d_z });
        }
        if self.encoder.input != self.image {
            return bad(format!("encoder input {:?} is not the image shape {:?}", self.encoder.input, self.image));
        }
        if self.encoder.output_shape()? != [2 * self.d_z] {
            return bad(format!("encoder must end in {} outputs (mean and log-variance heads)", 2 * self.d_z));
        }
        if self.decoder.input != [self.d_z] {
            return bad(format!("decoder input must be [{}]", self.d_z));
        }
        if self.decoder.output_shape()? != self.image {
            return bad(format!("decoder output must be the image shape {:?}", self.image));
        }
        if self.decoder.layers.last() != Some(&LayerSpec::act(Activation::Sigmoid)) {
            return bad("decoder must end in a sigmoid".into());
        }
        Ok(())
    }

    pub fn nets(&self) -> [NetSpec; 2] {
        [self.encoder.clone(), self.decoder.clone()]
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>, ModelError> {
        Ok(init_params(&self.nets(), seed)?)
    }
}

/// Diagonal-Gaussian posterior parameters, each `B×d_Z`.
#[derive(Debug, Clone, Copy)]
pub struct Posterior<'g, T> {
    pub mu: Var<'g, T>,
    pub logvar: Var<'g, T>,
}

/// Posterior mean and clamped log-variance for a batch `x` of shape `B×C×H×W`.
pub fn encode<'g, T: Scalar>(
    arch: &ArchitectureDescriptor,
    params: &BoundParams<'g, T>,
    x: Var<'g, T>,
) -> Result<Posterior<'g, T>, ModelError> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1..] != arch.image {
        return Err(ModelError::InputShape { expected: arch.image.to_vec(), found: shape });
    }
    let h = arch.encoder.forward(params, x)?;
    let mu = h.slice(1, 0, arch.d_z)?;
    let logvar = h.slice(1, arch.d_z, arch.d_z)?.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)?;
    Ok(Posterior { mu, logvar })
}

/// `z = μ + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize<'g, T: Scalar>(post: &Posterior<'g, T>, noise: Var<'g, T>) -> Result<Var<'g, T>, ModelError> {
    let mu_shape = post.mu.shape();
    if noise.shape() != mu_shape {
        return Err(TensorError::ShapeMismatch { op: "reparameterize", lhs: mu_shape, rhs: noise.shape() }.into());
    }
    let std = post.logvar.mul_scalar(0.5)?.exp()?;
    Ok(post.mu.add(&std.mul(&noise)?)?)
}

/// Splits `B×d_Z` into the first `d` columns and the rest. Either part may be empty.
pub fn partition<'g, T: Scalar>(z: Var<'g, T>, d: usize) -> Result<(Var<'g, T>, Var<'g, T>), ModelError> {
    let shape = z.shape();
    let d_z = *shape.get(1).ok_or_else(|| ModelError::Architecture(format!("latent batch must be B×d_Z, got {shape:?}")))?;
    if d > d_z {
        return Err(ModelError::SplitOutOfRange { d, d_z });
    }
    Ok((z.slice(1, 0, d)?, z.slice(1, d, d_z - d)?))
}

/// Inverse of [`partition`].
pub fn unpartition<'g, T: Scalar>(aux: Var<'g, T>, recon: Var<'g, T>) -> Result<Var<'g, T>, ModelError> {
    Ok(concat(&[aux, recon], 1)?)
}

/// Decoder output before the terminal sigmoid, `B×C×H×W`.
pub fn decode_logits<'g, T: Scalar>(
    arch: &ArchitectureDescriptor,
    params: &BoundParams<'g, T>,
    z: Var<'g, T>,
) -> Result<Var<'g, T>, ModelError> {
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != arch.d_z {
        return Err(ModelError::InputShape { expected: vec![arch.d_z], found: shape });
    }
    let n = arch.decoder.layers.len();
    Ok(arch.decoder.forward_range(params, z, 0..n - 1)?)
}

/// Reconstruction `x̂ ∈ (0, 1)`, `B×C×H×W`.
pub fn decode<'g, T: Scalar>(
    arch: &ArchitectureDescriptor,
    params: &BoundParams<'g, T>,
    z: Var<'g, T>,
) -> Result<Var<'g, T>, ModelError> {
    Ok(decode_logits(arch, params, z)?.sigmoid()?)
}

/// Architecture plus parameters, with graph-free batch helpers for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub arch: ArchitectureDescriptor,
    pub params: ParamStore<T>,
}

/// Rows per forward pass in the batch helpers.
const EVAL_CHUNK: usize = 256;

impl<T: Scalar> Model<T> {
    pub fn init(arch: ArchitectureDescriptor, seed: u64) -> Result<Self, ModelError> {
        let params = arch.init_params(seed)?;
        Ok(Self { arch, params })
    }

    fn chunked(
        &self,
        input: &Tensor<T>,
        f: impl for<'g> Fn(&'g Graph<T>, &BoundParams<'g, T>, Var<'g, T>) -> Result<Vec<Var<'g, T>>, ModelError>,
    ) -> Result<Vec<Tensor<T>>, ModelError> {
        let n = input.shape()[0];
        let mut outs: Vec<Vec<T>> = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let mut start = 0;
        while start < n || (n == 0 && outs.is_empty()) {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let g = Graph::new();
            let p = self.params.attach_frozen(&g);
            let x = g.constant(input.gather_rows(&idx));
            let vars = f(&g, &p, x)?;
            if outs.is_empty() {
                outs = vec![Vec::new(); vars.len()];
                shapes = vars.iter().map(|v| v.shape()).collect();
            }
            for (o, v) in outs.iter_mut().zip(&vars) {
                o.extend_from_slice(v.value().data());
            }
            if n == 0 {
                break;
            }
            start = end;
        }
        outs.into_iter()
            .zip(shapes)
            .map(|(data, mut shape)| {
                shape[0] = n;
                Ok(Tensor::new(shape, data)?)
            })
            .collect()
    }

    /// Posterior means and log-variances for `images` (`N×C×H×W`).
    pub fn encode_tensor(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut out = self.chunked(images, |_, p, x| {
            let post = encode(&self.arch, p, x)?;
            Ok(vec![post.mu, post.logvar])
        })?;
        let logvar = out.pop().expect("two outputs");
        let mu = out.pop().expect("two outputs");
        Ok((mu, logvar))
    }

    /// Decoded images for latent codes `z` (`N×d_Z`).
    pub fn decode_tensor(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut out = self.chunked(z, |_, p, z| Ok(vec![decode(&self.arch, p, z)?]))?;
        Ok(out.pop().expect("one output"))
    }

    /// `decode(μ(x))`: the noise-free reconstruction.
    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut out = self.chunked(images, |_, p, x| {
            let post = encode(&self.arch, p, x)?;
            Ok(vec![decode(&self.arch, p, post.mu)?])
        })?;
        Ok(out.pop().expect("one output"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const IMG: [usize; 3] = [1, 33, 33];

    #[test]
    fn conv_descriptor_matches_architecture_table() {
        let arch = ArchitectureDescriptor::conv(IMG, 10, 5).unwrap();
        let enc = arch.encoder.layers.iter().map(ToString::to_string).collect::<Vec<_>>();
        assert_eq!(enc[0], "Conv2d(1, 32, 4, stride 2, padding 1)");
        assert_eq!(enc[6], "Conv2d(128, 256, 4, stride 2, padding 1)");
        assert!(enc.contains(&"Dense(1024, 256)".to_string()));
        assert_eq!(enc.last().unwrap(), "Dense(256, 20)");
        let dec = arch.decoder.layers.iter().map(ToString::to_string).collect::<Vec<_>>();
        assert_eq!(dec[2], "ConvT2d(32, 128, 4, stride 2, padding 1)");
        assert_eq!(dec[8], "ConvT2d(32, 1, 5, stride 4, padding 0)");
    }

    #[test]
    fn conv_encode_yields_ten_latents() {
        let model = Model::<f32>::init(ArchitectureDescriptor::conv(IMG, 10, 5).unwrap(), 0).unwrap();
        let x = Tensor::full([1, 1, 33, 33], 0.3);
        let (mu, lv) = model.encode_tensor(&x).unwrap();
        assert_eq!(mu.shape(), &[1, 10]);
        assert_eq!(lv.shape(), &[1, 10]);
        assert_eq!(model.decode_tensor(&mu).unwrap().shape(), &[1, 1, 33, 33]);
    }

    #[test]
    fn encode_is_deterministic_and_bounded() {
        let model = Model::<f32>::init(ArchitectureDescriptor::mlp(IMG, 10, 5).unwrap(), 4).unwrap();
        let x = Tensor::zeros([2, 1, 33, 33]);
        let (mu, lv) = model.encode_tensor(&x).unwrap();
        assert_eq!(model.encode_tensor(&x).unwrap(), (mu.clone(), lv.clone()));
        assert!(mu.all_finite() && mu.data().iter().all(|m| m.abs() < 10.0));
        assert!(lv.data().iter().all(|&v| (-10.0..=10.0).contains(&v)));
    }

    #[test]
    fn fresh_mlp_decodes_zero_to_half() {
        let model = Model::<f32>::init(ArchitectureDescriptor::mlp(IMG, 10, 5).unwrap(), 1).unwrap();
        let out = model.decode_tensor(&Tensor::zeros([3, 10])).unwrap();
        assert_eq!(out.shape(), &[3, 1, 33, 33]);
        assert!(out.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn encode_rejects_wrong_image_shape() {
        let model = Model::<f32>::init(ArchitectureDescriptor::mlp(IMG, 4, 2).unwrap(), 1).unwrap();
        assert!(matches!(model.encode_tensor(&Tensor::zeros([1, 1, 32, 32])), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn invalid_descriptors_are_rejected() {
        assert!(matches!(ArchitectureDescriptor::mlp(IMG, 4, 5), Err(ModelError::SplitOutOfRange { .. })));
        let mut arch = ArchitectureDescriptor::mlp(IMG, 4, 2).unwrap();
        arch.decoder.layers.pop();
        assert!(arch.validate().is_err());
        assert!(ArchitectureDescriptor::conv([1, 32, 32], 4, 2).is_err());
    }

    fn posterior_graph(mu: &[f64], lv: &[f64], noise: &[f64]) -> Vec<f64> {
        let g = Graph::<f64>::new();
        let n = mu.len();
        let post = Posterior {
            mu: g.constant(Tensor::from_f64([1, n], mu).unwrap()),
            logvar: g.constant(Tensor::from_f64([1, n], lv).unwrap()),
        };
        let noise = g.constant(Tensor::from_f64([1, n], noise).unwrap());
        reparameterize(&post, noise).unwrap().value().to_f64_vec()
    }

    #[test]
    fn reparameterize_identities() {
        assert_eq!(posterior_graph(&[0.5, -1.0], &[2.0, -3.0], &[0.0, 0.0]), vec![0.5, -1.0]);
        assert_eq!(posterior_graph(&[0.5, -1.0], &[0.0, 0.0], &[0.25, 2.0]), vec![0.75, 1.0]);
    }

    #[test]
    fn reparameterized_variance_matches_exp_logvar() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let lv = 0.7;
        let z = posterior_graph(&vec![1.0; n], &vec![lv; n], &noise);
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / f64::exp(lv) - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn partition_widths_and_roundtrip() {
        let g = Graph::<f32>::new();
        let z = g.constant(Tensor::from_f64([2, 10], &(0..20).map(f64::from).collect::<Vec<_>>()).unwrap());
        for (d, widths) in [(5, (5, 5)), (0, (0, 10)), (10, (10, 0))] {
            let (a, r) = partition(z, d).unwrap();
            assert_eq!((a.shape()[1], r.shape()[1]), widths);
            assert_eq!(unpartition(a, r).unwrap().value().data(), z.value().data());
        }
        assert!(matches!(partition(z, 11), Err(ModelError::SplitOutOfRange { d: 11, d_z: 10 })));
    }

    #[test]
    fn decode_gradient_wrt_latents() {
        let arch = ArchitectureDescriptor::mlp([1, 4, 4], 3, 1).unwrap();
        let params = arch.init_params::<f64>(5).unwrap();
        let point = Tensor::from_f64([2, 3], &[0.1, -0.4, 0.8, 1.2, 0.0, -0.7]).unwrap();
        let report = grad_check(
            |z| {
                let p = params.attach_frozen(z.graph());
                Ok::<_, ModelError>(decode(&arch, &p, z)?.sum()?)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{}", report.max_rel_error);
    }

    #[test]
    fn zero_noise_pipeline_is_deterministic() {
        let model = Model::<f32>::init(ArchitectureDescriptor::mlp([1, 8, 8], 4, 2).unwrap(), 9).unwrap();
        let x = Tensor::full([3, 1, 8, 8], 0.2);
        assert_eq!(model.reconstruct(&x).unwrap(), model.reconstruct(&x).unwrap());
    }

    #[test]
    fn chunked_helpers_cover_every_row() {
        let model = Model::<f32>::init(ArchitectureDescriptor::mlp([1, 4, 4], 2, 1).unwrap(), 2).unwrap();
        let n = EVAL_CHUNK + 3;
        let x = Tensor::new(vec![n, 1, 4, 4], (0..n * 16).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let (mu, _) = model.encode_tensor(&x).unwrap();
        assert_eq!(mu.shape(), &[n, 2]);
        let (mu_last, _) = model.encode_tensor(&x.gather_rows(&[n - 1])).unwrap();
        assert_eq!(mu.row(n - 1), mu_last.row(0));
    }
}
