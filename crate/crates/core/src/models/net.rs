//! Small MLP and CNN classifiers in three flavors: deconvolution layers,
//! batch-normalized baselines and plain layers.

use std::str::FromStr;

use rand::Rng;

use crate::datamatrix::{data_matrix_graph, WindowGeometry};
use crate::error::{Error, Result};
use crate::matfun::BlockPolicy;
use crate::ndpp::{InverseSqrtMethod, Mode, NdppLayer, NdppLayerConfig, ScaleMode};
use crate::tensor::{Graph, Tensor, Var};

pub const MLP_WIDTH: usize = 64;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Ndpp,
    BnBaseline,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    Cnn,
    Linear,
}

/// Architecture plus flavor, as named on the command line (`ndpp-mlp`, `bn-cnn`, `linear`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelKind {
    pub arch: Arch,
    pub flavor: Flavor,
}

impl ModelKind {
    pub fn name(self) -> String {
        let flavor = match self.flavor {
            Flavor::Ndpp => "ndpp",
            Flavor::BnBaseline => "bn",
            Flavor::Plain => "plain",
        };
        match self.arch {
            Arch::Linear => "linear".into(),
            Arch::Mlp => format!("{flavor}-mlp"),
            Arch::Cnn => format!("{flavor}-cnn"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(ModelKind { arch: Arch::Linear, flavor: Flavor::Plain });
        }
        let (flavor, arch) = s.split_once('-').ok_or_else(|| Error::Config(format!("unknown model {s:?}")))?;
        let flavor = match flavor {
            "ndpp" => Flavor::Ndpp,
            "bn" => Flavor::BnBaseline,
            "plain" => Flavor::Plain,
            _ => return Err(Error::Config(format!("unknown model flavor {flavor:?}"))),
        };
        let arch = match arch {
            "mlp" => Arch::Mlp,
            "cnn" => Arch::Cnn,
            _ => return Err(Error::Config(format!("unknown architecture {arch:?}"))),
        };
        Ok(ModelKind { arch, flavor })
    }
}

/// Settings applied to every deconvolution layer of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NdppOptions {
    pub scale_mode: ScaleMode,
    pub block_size: BlockPolicy,
    pub subsample: usize,
    pub epsilon: f64,
    pub isqrt_method: InverseSqrtMethod,
    pub newton_iterations: usize,
    pub running_momentum: f64,
    pub workers: usize,
}

impl Default for NdppOptions {
    fn default() -> Self {
        let c = NdppLayerConfig::fully_connected(1, 1);
        NdppOptions {
            scale_mode: c.scale_mode,
            block_size: c.block_size,
            subsample: c.subsample,
            epsilon: c.epsilon,
            isqrt_method: c.isqrt_method,
            newton_iterations: c.newton_iterations,
            running_momentum: c.running_momentum,
            workers: c.workers,
        }
    }
}

impl NdppOptions {
    fn apply(&self, c: &mut NdppLayerConfig) {
        c.scale_mode = self.scale_mode;
        c.block_size = self.block_size;
        c.subsample = self.subsample;
        c.epsilon = self.epsilon;
        c.isqrt_method = self.isqrt_method;
        c.newton_iterations = self.newton_iterations;
        c.running_momentum = self.running_momentum;
        c.workers = self.workers;
    }
}

/// Per-feature `(z − μ)/σ·γ + β` over the batch (and spatial positions for
/// convolution outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub mode: Mode,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[1, features]),
            beta: Tensor::zeros(&[1, features]),
            running_mean: Tensor::zeros(&[1, features]),
            running_var: Tensor::ones(&[1, features]),
            mode: Mode::Training,
        }
    }

    fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes the columns of an `M×F` matrix.
    fn normalize_rows(&mut self, g: &Graph, z: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (mean, var) = match self.mode {
            Mode::Training => {
                let m = g.shape(z)[0] as f64;
                let mean = g.scale(g.sum_rows(z)?, 1.0 / m);
                let centered = g.add_row(z, g.scale(mean, -1.0))?;
                let var = g.scale(g.sum_rows(g.mul(centered, centered)?)?, 1.0 / m);
                let blend = |r: &Tensor, b: &Tensor| r.scale(BN_MOMENTUM).add(&b.scale(1.0 - BN_MOMENTUM));
                self.running_mean = blend(&self.running_mean, &g.value(mean))?;
                self.running_var = blend(&self.running_var, &g.value(var))?;
                (mean, var)
            }
            Mode::Evaluation => (g.constant(self.running_mean.clone()), g.constant(self.running_var.clone())),
        };
        let centered = g.add_row(z, g.scale(mean, -1.0))?;
        let inv_sd = g.pow(g.add_const(var, BN_EPSILON), -0.5);
        let y = g.mul_row(g.mul_row(centered, inv_sd)?, gamma)?;
        g.add_row(y, beta)
    }

    fn forward_graph(&mut self, g: &Graph, z: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = g.shape(z);
        if shape.len() < 2 || shape[1] != self.features() {
            return Err(Error::dim(format!("batch norm over {} features got {shape:?}", self.features())));
        }
        if shape.len() == 2 {
            return self.normalize_rows(g, z, gamma, beta);
        }
        // Channels last, normalize, then back.
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let mut to_rows = vec![0; n * c * spatial];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..spatial {
                    to_rows[(b * spatial + p) * c + ch] = (b * c + ch) * spatial + p;
                }
            }
        }
        let mut back = vec![0; to_rows.len()];
        for (dst, &src) in to_rows.iter().enumerate() {
            back[src] = dst;
        }
        let flat = g.reshape(z, &[n * c * spatial])?;
        let rows = g.gather(flat, to_rows.into(), &[n * spatial, c])?;
        let y = self.normalize_rows(g, rows, gamma, beta)?;
        let flat = g.reshape(y, &[n * c * spatial])?;
        g.gather(flat, back.into(), &shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Ndpp(NdppLayer),
    /// `z = x·W + b` with `W: in×out`, `b: 1×out`.
    Dense { weight: Tensor, bias: Tensor },
    /// Cross-correlation with `weight: out×C×k×k` and `bias: 1×out`.
    Conv { weight: Tensor, bias: Tensor, kernel: usize, padding: usize, stride: usize },
    BatchNorm(BatchNorm),
    Relu,
    /// Mean over all spatial positions, `N×C×… → N×C`.
    GlobalAvgPool,
    /// Reshapes every sample to the given shape.
    Reshape(Vec<usize>),
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl Layer {
    pub fn dense(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Layer::Dense { weight: uniform(&[input, output], input, rng), bias: Tensor::zeros(&[1, output]) }
    }

    pub fn conv(input: usize, output: usize, kernel: usize, padding: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Layer::Conv {
            weight: uniform(&[output, input, kernel, kernel], input * kernel * kernel, rng),
            bias: Tensor::zeros(&[1, output]),
            kernel,
            padding,
            stride,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Ndpp(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::Dense { weight, bias } | Layer::Conv { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Ndpp(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::Dense { weight, bias } | Layer::Conv { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => Vec::new(),
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        match self {
            Layer::Ndpp(l) => l.set_mode(mode),
            Layer::BatchNorm(bn) => bn.mode = mode,
            _ => {}
        }
    }

    fn forward_graph(&mut self, g: &Graph, x: Var, p: &[Var]) -> Result<Var> {
        match self {
            Layer::Ndpp(l) => l.forward_graph(g, x, p[0], p.get(1).copied()),
            Layer::Dense { .. } => g.add_row(g.matmul(x, p[0])?, p[1]),
            Layer::Conv { weight, kernel, padding, stride, .. } => {
                let (out, d) = (weight.shape()[0], weight.len() / weight.shape()[0]);
                let geom = WindowGeometry::new(&g.shape(x), *kernel, *padding, *stride)?;
                if geom.cols() != d {
                    return Err(Error::dim(format!("conv weight {:?} on input {:?}", weight.shape(), g.shape(x))));
                }
                let cols = data_matrix_graph(g, x, &geom, 1)?;
                let wm = g.transpose(g.reshape(p[0], &[out, d])?)?;
                let y = g.add_row(g.matmul(cols, wm)?, p[1])?;
                let flat = g.reshape(y, &[g.value(y).len()])?;
                g.gather(flat, geom.output_permutation(out).into(), &geom.output_shape(out))
            }
            Layer::BatchNorm(bn) => bn.forward_graph(g, x, p[0], p[1]),
            Layer::Relu => Ok(g.relu(x)),
            Layer::GlobalAvgPool => {
                let shape = g.shape(x);
                if shape.len() < 3 {
                    return Err(Error::dim(format!("global pooling needs spatial axes, got {shape:?}")));
                }
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let m = g.reshape(x, &[n * c, spatial])?;
                let pooled = g.scale(g.sum_cols(m)?, 1.0 / spatial as f64);
                g.reshape(pooled, &[n, c])
            }
            Layer::Reshape(sample) => {
                let n = g.shape(x)[0];
                let shape: Vec<usize> = std::iter::once(n).chain(sample.iter().copied()).collect();
                g.reshape(x, &shape)
            }
        }
    }
}

/// A feed-forward classifier producing `N×classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub layers: Vec<Layer>,
    /// Shape of one input sample.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl Model {
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for l in &mut self.layers {
            l.set_mode(mode);
        }
    }

    pub fn ndpp_layers_mut(&mut self) -> impl Iterator<Item = &mut NdppLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Ndpp(n) => Some(n),
            _ => None,
        })
    }

    /// Records the network on `g`; `params` follows the order of [`Model::params`].
    pub fn forward_graph(&mut self, g: &Graph, x: Var, params: &[Var]) -> Result<Var> {
        let expected = self.params().len();
        if params.len() != expected {
            return Err(Error::dim(format!("{} parameter handles for {expected} parameters", params.len())));
        }
        let shape = g.shape(x);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::dim(format!("input {shape:?} does not match sample shape {:?}", self.input_shape)));
        }
        let mut at = 0;
        let mut h = x;
        for layer in &mut self.layers {
            let k = layer.params().len();
            h = layer.forward_graph(g, h, &params[at..at + k])?;
            at += k;
        }
        Ok(h)
    }

    /// Logits in evaluation mode; the model's mode is restored afterwards.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let saved: Vec<Mode> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Ndpp(n) => Some(n.mode()),
                Layer::BatchNorm(b) => Some(b.mode),
                _ => None,
            })
            .collect();
        self.set_mode(Mode::Evaluation);
        let g = Graph::new();
        let params: Vec<Var> = self.params().into_iter().map(|p| g.constant(p.clone())).collect();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&g, xv, &params).map(|y| (*g.value(y)).clone());
        let mut saved = saved.into_iter();
        for l in &mut self.layers {
            match l {
                Layer::Ndpp(n) => n.set_mode(saved.next().unwrap_or_default()),
                Layer::BatchNorm(b) => b.mode = saved.next().unwrap_or_default(),
                _ => {}
            }
        }
        out
    }
}

fn linear_layer(flavor: Flavor, input: usize, output: usize, opts: &NdppOptions, rng: &mut impl Rng) -> Result<Layer> {
    Ok(match flavor {
        Flavor::Ndpp => {
            let mut c = NdppLayerConfig::fully_connected(input, output);
            opts.apply(&mut c);
            Layer::Ndpp(NdppLayer::new(c, rng)?)
        }
        _ => Layer::dense(input, output, rng),
    })
}

fn conv_layer(
    flavor: Flavor,
    input: usize,
    output: usize,
    stride: usize,
    opts: &NdppOptions,
    rng: &mut impl Rng,
) -> Result<Layer> {
    Ok(match flavor {
        Flavor::Ndpp => {
            let mut c = NdppLayerConfig::convolution(input, output, 3);
            c.padding = 1;
            c.stride = stride;
            opts.apply(&mut c);
            Layer::Ndpp(NdppLayer::new(c, rng)?)
        }
        _ => Layer::conv(input, output, 3, 1, stride, rng),
    })
}

fn check_sample(input_shape: &[usize], classes: usize) -> Result<usize> {
    let d: usize = input_shape.iter().product();
    if input_shape.is_empty() || d == 0 {
        return Err(Error::Config(format!("invalid sample shape {input_shape:?}")));
    }
    if classes < 2 {
        return Err(Error::Config(format!("need at least two classes, got {classes}")));
    }
    Ok(d)
}

/// Two hidden layers of width 64 with ReLU, then a linear head. Batch
/// normalization, where used, follows each hidden linear layer.
pub fn build_mlp(
    flavor: Flavor,
    input_shape: &[usize],
    classes: usize,
    opts: &NdppOptions,
    rng: &mut impl Rng,
) -> Result<Model> {
    let d = check_sample(input_shape, classes)?;
    let mut layers = Vec::new();
    if input_shape.len() > 1 {
        layers.push(Layer::Reshape(vec![d]));
    }
    let mut width = d;
    for _ in 0..2 {
        layers.push(linear_layer(flavor, width, MLP_WIDTH, opts, rng)?);
        if flavor == Flavor::BnBaseline {
            layers.push(Layer::BatchNorm(BatchNorm::new(MLP_WIDTH)));
        }
        layers.push(Layer::Relu);
        width = MLP_WIDTH;
    }
    layers.push(linear_layer(flavor, width, classes, opts, rng)?);
    let kind = ModelKind { arch: Arch::Mlp, flavor };
    Ok(Model { kind, layers, input_shape: input_shape.to_vec(), classes })
}

/// Channel widths of the two convolutions.
pub const CNN_CHANNELS: [usize; 2] = [8, 16];

/// `conv3(→8) relu conv3(→16, stride 2) relu, global average pool, linear head`.
///
/// Flat samples whose length is a perfect square are viewed as one-channel images.
pub fn build_cnn(
    flavor: Flavor,
    input_shape: &[usize],
    classes: usize,
    opts: &NdppOptions,
    rng: &mut impl Rng,
) -> Result<Model> {
    let d = check_sample(input_shape, classes)?;
    let mut layers = Vec::new();
    let channels = match input_shape.len() {
        3 => input_shape[0],
        1 => {
            let side = (d as f64).sqrt().round() as usize;
            if side * side != d {
                return Err(Error::Config(format!("cannot view {d} features as a square image")));
            }
            layers.push(Layer::Reshape(vec![1, side, side]));
            1
        }
        _ => return Err(Error::Config(format!("CNN needs C×H×W or flat square samples, got {input_shape:?}"))),
    };
    let mut width = channels;
    for (i, &out) in CNN_CHANNELS.iter().enumerate() {
        layers.push(conv_layer(flavor, width, out, i + 1, opts, rng)?);
        if flavor == Flavor::BnBaseline {
            layers.push(Layer::BatchNorm(BatchNorm::new(out)));
        }
        layers.push(Layer::Relu);
        width = out;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(linear_layer(flavor, width, classes, opts, rng)?);
    let kind = ModelKind { arch: Arch::Cnn, flavor };
    Ok(Model { kind, layers, input_shape: input_shape.to_vec(), classes })
}

/// A single linear map from the flattened sample to the logits.
pub fn build_linear(input_shape: &[usize], classes: usize, rng: &mut impl Rng) -> Result<Model> {
    let d = check_sample(input_shape, classes)?;
    let mut layers = Vec::new();
    if input_shape.len() > 1 {
        layers.push(Layer::Reshape(vec![d]));
    }
    layers.push(Layer::dense(d, classes, rng));
    let kind = ModelKind { arch: Arch::Linear, flavor: Flavor::Plain };
    Ok(Model { kind, layers, input_shape: input_shape.to_vec(), classes })
}

pub fn build(kind: ModelKind, input_shape: &[usize], classes: usize, opts: &NdppOptions, rng: &mut impl Rng) -> Result<Model> {
    match kind.arch {
        Arch::Mlp => build_mlp(kind.flavor, input_shape, classes, opts, rng),
        Arch::Cnn => build_cnn(kind.flavor, input_shape, classes, opts, rng),
        Arch::Linear => build_linear(input_shape, classes, rng),
    }
}
