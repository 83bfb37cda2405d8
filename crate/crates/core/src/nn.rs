//! Layer specifications, parameter storage with Glorot initialization, and Adam.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{conv2d_out_extent, conv_transpose2d_out_extent, Gradients, Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{net}: layer {index} ({layer}) cannot accept shape {found:?}: {detail}")]
    Inconsistent { net: String, index: usize, layer: String, found: Vec<usize>, detail: String },
    #[error("{net}: input shape {found:?} does not match declared {expected:?}")]
    InputShape { net: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),
    #[error("no parameter named `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {expected:?}, got {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    None,
}

/// One layer. Shapes exclude the leading batch axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    ConvTranspose2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Activation { activation: Activation },
    /// Reinterprets the per-sample extents; used to flatten and unflatten.
    Reshape { shape: Vec<usize> },
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize) -> Self {
        Self::Dense { input, output }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::Conv2d { in_channels, out_channels, kernel, stride, padding }
    }

    pub fn conv_transpose2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::ConvTranspose2d { in_channels, out_channels, kernel, stride, padding }
    }

    pub fn act(activation: Activation) -> Self {
        Self::Activation { activation }
    }

    pub fn reshape(shape: impl Into<Vec<usize>>) -> Self {
        Self::Reshape { shape: shape.into() }
    }

    /// `(weight shape, bias shape, fan_in, fan_out)` for parameterized layers.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize, usize)> {
        match *self {
            Self::Dense { input, output } => Some((vec![output, input], vec![output], input, output)),
            Self::Conv2d { in_channels, out_channels, kernel, .. } => {
                let area = kernel * kernel;
                Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels], in_channels * area, out_channels * area))
            }
            Self::ConvTranspose2d { in_channels, out_channels, kernel, .. } => {
                let area = kernel * kernel;
                Some((vec![in_channels, out_channels, kernel, kernel], vec![out_channels], out_channels * area, in_channels * area))
            }
            Self::Activation { .. } | Self::Reshape { .. } => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            Self::Dense { input: n_in, output } => {
                if *n_in == 0 || *output == 0 {
                    return Err("extents must be positive".into());
                }
                if input != [*n_in] {
                    return Err(format!("expected [{n_in}]"));
                }
                Ok(vec![*output])
            }
            Self::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [c, h, w] = *input else { return Err("expected [C, H, W]".into()) };
                if c != *in_channels || *out_channels == 0 {
                    return Err(format!("expected {in_channels} input channels"));
                }
                let oh = conv2d_out_extent(h, *kernel, *stride, *padding).map_err(|e| e.to_string())?;
                let ow = conv2d_out_extent(w, *kernel, *stride, *padding).map_err(|e| e.to_string())?;
                Ok(vec![*out_channels, oh, ow])
            }
            Self::ConvTranspose2d { in_channels, out_channels, kernel, stride, padding } => {
                let [c, h, w] = *input else { return Err("expected [C, H, W]".into()) };
                if c != *in_channels || *out_channels == 0 {
                    return Err(format!("expected {in_channels} input channels"));
                }
                let oh = conv_transpose2d_out_extent(h, *kernel, *stride, *padding).map_err(|e| e.to_string())?;
                let ow = conv_transpose2d_out_extent(w, *kernel, *stride, *padding).map_err(|e| e.to_string())?;
                Ok(vec![*out_channels, oh, ow])
            }
            Self::Activation { .. } => Ok(input.to_vec()),
            Self::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() || shape.contains(&0) {
                    return Err(format!("cannot reshape to {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dense { input, output } => write!(f, "Dense({input}, {output})"),
            Self::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                write!(f, "Conv2d({in_channels}, {out_channels}, {kernel}, stride {stride}, padding {padding})")
            }
            Self::ConvTranspose2d { in_channels, out_channels, kernel, stride, padding } => {
                write!(f, "ConvT2d({in_channels}, {out_channels}, {kernel}, stride {stride}, padding {padding})")
            }
            Self::Activation { activation } => write!(f, "{activation:?}"),
            Self::Reshape { shape } => write!(f, "Reshape({shape:?})"),
        }
    }
}

/// A named chain of layers with a declared per-sample input shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: String,
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn new(name: impl Into<String>, input: impl Into<Vec<usize>>, layers: Vec<LayerSpec>) -> Self {
        Self { name: name.into(), input: input.into(), layers }
    }

    /// Per-sample output shape, or an error naming the first inconsistent boundary.
    pub fn output_shape(&self) -> Result<Vec<usize>, NnError> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(NnError::InputShape { net: self.name.clone(), expected: vec![], found: self.input.clone() });
        }
        let mut shape = self.input.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|detail| NnError::Inconsistent {
                net: self.name.clone(),
                index,
                layer: layer.to_string(),
                found: shape.clone(),
                detail,
            })?;
        }
        Ok(shape)
    }

    fn param_name(&self, index: usize, which: &str) -> String {
        format!("{}.{index}.{which}", self.name)
    }

    /// Applies the chain to a batch `x` of shape `[B, input..]`.
    pub fn forward<'g, T: Scalar>(&self, params: &BoundParams<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>, NnError> {
        self.forward_range(params, x, 0..self.layers.len())
    }

    /// Applies layers `range` only; the input must match the shape at `range.start`.
    pub fn forward_range<'g, T: Scalar>(
        &self,
        params: &BoundParams<'g, T>,
        x: Var<'g, T>,
        range: std::ops::Range<usize>,
    ) -> Result<Var<'g, T>, NnError> {
        if range.start == 0 {
            let shape = x.shape();
            if shape.len() != self.input.len() + 1 || shape[1..] != self.input[..] {
                return Err(NnError::InputShape { net: self.name.clone(), expected: self.input.clone(), found: shape });
            }
        }
        let mut h = x;
        for index in range {
            let layer = &self.layers[index];
            h = match layer {
                LayerSpec::Dense { .. } => {
                    let w = params.get(&self.param_name(index, "weight"))?;
                    let b = params.get(&self.param_name(index, "bias"))?;
                    h.matmul_t(&w, false, true)?.add(&b)?
                }
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let w = params.get(&self.param_name(index, "weight"))?;
                    let b = params.get(&self.param_name(index, "bias"))?;
                    h.conv2d(&w, Some(&b), *stride, *padding)?
                }
                LayerSpec::ConvTranspose2d { stride, padding, .. } => {
                    let w = params.get(&self.param_name(index, "weight"))?;
                    let b = params.get(&self.param_name(index, "bias"))?;
                    h.conv_transpose2d(&w, Some(&b), *stride, *padding)?
                }
                LayerSpec::Activation { activation } => match activation {
                    Activation::Relu => h.relu()?,
                    Activation::Sigmoid => h.sigmoid()?,
                    Activation::Tanh => h.tanh()?,
                    Activation::None => h,
                },
                LayerSpec::Reshape { shape } => {
                    let mut full = vec![h.shape()[0]];
                    full.extend_from_slice(shape);
                    h.reshape(&full)?
                }
            };
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Named parameters in insertion order, with per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: BTreeMap<String, Tensor<T>>,
    state: BTreeMap<String, AdamState<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: BTreeMap::new(), state: BTreeMap::new(), step: 0 }
    }
}

/// Gradients keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients so their global L2 norm is at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or replaces) a parameter, resetting its optimizer moments.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let zeros = Tensor::zeros(value.shape().to_vec());
        self.state.insert(name.clone(), AdamState { m: zeros.clone(), v: zeros });
        if self.values.insert(name.clone(), value).is_none() {
            self.names.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.values.get(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| (n.as_str(), &self.values[n]))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.state.get(name).map(|s| (&s.m, &s.v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-tracking leaf of `graph`.
    pub fn attach<'g>(&self, graph: &'g Graph<T>) -> BoundParams<'g, T> {
        let vars = self.iter().map(|(n, t)| (n.to_string(), graph.param(t.clone()))).collect();
        BoundParams { vars }
    }

    /// Records every parameter as a constant of `graph` (no gradients flow into them).
    pub fn attach_frozen<'g>(&self, graph: &'g Graph<T>) -> BoundParams<'g, T> {
        let vars = self.iter().map(|(n, t)| (n.to_string(), graph.constant(t.clone()))).collect();
        BoundParams { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// One bias-corrected Adam update. Every parameter must have a gradient.
    pub fn adam_step(&mut self, grads: &GradMap<T>, cfg: &AdamConfig) -> Result<(), NnError> {
        for name in &self.names {
            let g = grads.get(name).ok_or_else(|| NnError::MissingGradient(name.clone()))?;
            let p = &self.values[name];
            if g.shape() != p.shape() {
                return Err(NnError::ParamShape { name: name.clone(), expected: p.shape().to_vec(), found: g.shape().to_vec() });
            }
        }
        let scale = match cfg.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .filter(|(n, _)| self.values.contains_key(*n))
                    .flat_map(|(_, g)| g.data().iter().map(|x| x.f64() * x.f64()))
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1t, b2t, eps, lr) = (T::lit(b1), T::lit(b2), T::lit(cfg.eps), T::lit(cfg.lr));
        let (bc1, bc2, scale) = (T::lit(bc1), T::lit(bc2), T::lit(scale));
        let one = T::one();
        for name in &self.names {
            let g = &grads[name];
            let st = self.state.get_mut(name).expect("state for every parameter");
            let p = self.values.get_mut(name).expect("value for every parameter");
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(st.m.data_mut()).zip(st.v.data_mut()).zip(g.data()) {
                let gi = gi * scale;
                *mi = b1t * *mi + (one - b1t) * gi;
                *vi = b2t * *vi + (one - b2t) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Parameters recorded on one graph, addressable by name.
pub struct BoundParams<'g, T> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> BoundParams<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>, NnError> {
        self.vars.get(name).copied().ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    /// Replaces the variable bound to `name`, e.g. to probe one parameter in isolation.
    pub fn rebind(&mut self, name: &str, var: Var<'g, T>) -> Result<(), NnError> {
        let slot = self.vars.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        *slot = var;
        Ok(())
    }

    /// Extracts the gradient of every bound parameter.
    pub fn grads(&self, grads: &Gradients<T>) -> Result<GradMap<T>, NnError> {
        self.vars.iter().map(|(n, v)| Ok((n.clone(), grads.get(*v)?))).collect()
    }
}

/// Glorot-uniform weights, zero biases; a pure function of `(nets, seed)`.
pub fn init_params<T: Scalar>(nets: &[NetSpec], seed: u64) -> Result<ParamStore<T>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for net in nets {
        net.output_shape()?;
        for (index, layer) in net.layers.iter().enumerate() {
            let Some((w_shape, b_shape, fan_in, fan_out)) = layer.param_shapes() else { continue };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = w_shape.iter().product();
            let data = (0..n).map(|_| T::lit(rng.random_range(-a..a))).collect();
            store.insert(net.param_name(index, "weight"), Tensor::new(w_shape, data)?);
            store.insert(net.param_name(index, "bias"), Tensor::zeros(b_shape));
        }
    }
    Ok(store)
}
