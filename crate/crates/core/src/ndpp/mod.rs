//! Deconvolution layers: `y = S·X·D·w` computed as `(S·X)·(D·w)`.
//!
//! `S` standardizes every sample with its own statistics, `X` is the layer's
//! data matrix and `D` the block-diagonal inverse square root of the data
//! matrix covariance. The correction is applied to the weights, so the layer
//! runs as an ordinary linear map or convolution.
//!
//! In training mode [`NdppLayer::forward_graph`] records the whole chain
//! (standardization, covariance, Newton iteration, fused weight) so gradients
//! flow through the statistics. The batch `D` is also folded into a running
//! average which evaluation mode uses instead.

mod serialize;

use std::ops::Range;
use std::rc::Rc;

use rand::Rng;

pub use serialize::{load_layers, save_layers, FORMAT_VERSION, MAGIC};

use crate::datamatrix::{data_matrix_graph, split_columns_graph, LayerKind, WindowGeometry};
use crate::error::{Error, Result};
use crate::matfun::{
    inverse_sqrt_eigen, inverse_sqrt_newton_graph, partition_columns, regularize_graph, BlockPolicy,
    DEFAULT_NEWTON_ITERATIONS,
};
use crate::syncsim::shard_ranges;
use crate::tensor::{Graph, Tensor, Var};

/// Floor applied to per-sample scale denominators.
pub const SCALE_DELTA: f64 = 1e-8;

/// Per-sample standardization applied before the data matrix is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    #[default]
    None,
    /// Subtract the sample mean, divide by the sample standard deviation.
    MuSigma,
    /// Divide by the sample's mean absolute value.
    L1,
}

impl ScaleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScaleMode::None => "none",
            ScaleMode::MuSigma => "musigma",
            ScaleMode::L1 => "l1",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            ScaleMode::None => 0,
            ScaleMode::MuSigma => 1,
            ScaleMode::L1 => 2,
        }
    }

    pub(crate) fn from_code(c: u32) -> Option<Self> {
        [ScaleMode::None, ScaleMode::MuSigma, ScaleMode::L1].into_iter().find(|m| m.code() == c)
    }
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ScaleMode::None),
            "musigma" | "mu_sigma" => Ok(ScaleMode::MuSigma),
            "l1" => Ok(ScaleMode::L1),
            other => Err(Error::Config(format!("unknown scale mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InverseSqrtMethod {
    /// Coupled Newton iteration, differentiated through.
    #[default]
    Newton,
    /// Jacobi eigendecomposition; `D` is treated as a constant by the graph.
    Eigen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Training,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdppLayerConfig {
    pub layer_kind: LayerKind,
    /// Input features (fully-connected) or channels.
    pub in_features: usize,
    pub out_features: usize,
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
    /// 1 for `N×C×L` signals, 2 for `N×C×H×W` images; ignored by fully-connected layers.
    pub spatial_dims: usize,
    pub scale_mode: ScaleMode,
    pub block_size: BlockPolicy,
    /// Keep every `s`-th output location when estimating the covariance.
    pub subsample: usize,
    pub epsilon: f64,
    pub running_momentum: f64,
    pub newton_iterations: usize,
    pub with_bias: bool,
    pub isqrt_method: InverseSqrtMethod,
    /// Simulated workers whose statistics are synchronized.
    pub workers: usize,
}

impl NdppLayerConfig {
    fn base(layer_kind: LayerKind, in_features: usize, out_features: usize, kernel: usize) -> Self {
        NdppLayerConfig {
            layer_kind,
            in_features,
            out_features,
            kernel,
            padding: 0,
            stride: 1,
            spatial_dims: 2,
            scale_mode: ScaleMode::None,
            block_size: BlockPolicy::Default,
            subsample: 1,
            epsilon: 1e-5,
            running_momentum: 0.9,
            newton_iterations: DEFAULT_NEWTON_ITERATIONS,
            with_bias: true,
            isqrt_method: InverseSqrtMethod::Newton,
            workers: 1,
        }
    }

    pub fn fully_connected(in_features: usize, out_features: usize) -> Self {
        Self::base(LayerKind::FullyConnected, in_features, out_features, 1)
    }

    pub fn convolution(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::base(LayerKind::Convolution, in_channels, out_channels, kernel)
    }

    /// Full-mode correlation layer; padding is always `kernel − 1` and stride 1.
    pub fn correlation(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let mut c = Self::base(LayerKind::Correlation, in_channels, out_channels, kernel);
        c.padding = kernel.saturating_sub(1);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_features == 0 || self.out_features == 0 {
            return bad("feature counts must be at least 1".into());
        }
        if self.kernel == 0 || self.stride == 0 {
            return bad("kernel and stride must be at least 1".into());
        }
        if self.subsample == 0 {
            return bad("subsample stride must be at least 1".into());
        }
        if let BlockPolicy::Fixed(0) = self.block_size {
            return bad("block size must be at least 1".into());
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be a finite non-negative number, got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.running_momentum) {
            return bad(format!("running momentum must lie in [0, 1], got {}", self.running_momentum));
        }
        if self.workers == 0 {
            return bad("at least one worker is required".into());
        }
        match self.layer_kind {
            LayerKind::FullyConnected if self.kernel != 1 || self.padding != 0 || self.stride != 1 => {
                bad("fully-connected layers take kernel 1, padding 0, stride 1".into())
            }
            LayerKind::Correlation if self.stride != 1 || self.padding != self.kernel - 1 => {
                bad("correlation layers use stride 1 and padding kernel-1".into())
            }
            LayerKind::Convolution | LayerKind::Correlation if !(1..=2).contains(&self.spatial_dims) => {
                bad(format!("spatial_dims must be 1 or 2, got {}", self.spatial_dims))
            }
            _ => Ok(()),
        }
    }

    /// Data-matrix columns, `d` (including the bias column for fully-connected layers).
    pub fn data_columns(&self) -> usize {
        match self.layer_kind {
            LayerKind::FullyConnected => self.in_features + usize::from(self.with_bias),
            _ => self.in_features * self.window(),
        }
    }

    fn window(&self) -> usize {
        if self.spatial_dims == 1 {
            self.kernel
        } else {
            self.kernel * self.kernel
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match (self.layer_kind, self.spatial_dims) {
            (LayerKind::FullyConnected, _) => vec![self.data_columns(), self.out_features],
            (_, 1) => vec![self.out_features, self.in_features, self.kernel],
            _ => vec![self.out_features, self.in_features, self.kernel, self.kernel],
        }
    }

    /// Shape of the separate bias (convolution and correlation only).
    pub fn bias_shape(&self) -> Option<Vec<usize>> {
        (self.with_bias && self.layer_kind != LayerKind::FullyConnected).then(|| vec![self.out_features])
    }

    pub fn blocks(&self) -> Vec<Range<usize>> {
        partition_columns(self.data_columns(), self.layer_kind, self.kernel, self.block_size)
    }

    fn fan_in(&self) -> usize {
        match self.layer_kind {
            LayerKind::FullyConnected => self.in_features,
            _ => self.in_features * self.window(),
        }
    }
}

/// Per-sample statistics used by [`scale_standardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRecord {
    /// Subtracted per-sample shift (zero unless `MuSigma`).
    pub shift: Vec<f64>,
    /// Per-sample divisor (one for `None`).
    pub scale: Vec<f64>,
}

/// Standardizes every sample (leading index) of `x` by its own statistics.
pub fn scale_standardize(x: &Tensor, mode: ScaleMode) -> Result<(Tensor, ScaleRecord)> {
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let (y, record) = scale_standardize_graph(&g, xv, mode)?;
    Ok(((*g.value(y)).clone(), record))
}

/// [`scale_standardize`] recorded on a graph; the statistics are differentiated through.
pub fn scale_standardize_graph(g: &Graph, x: Var, mode: ScaleMode) -> Result<(Var, ScaleRecord)> {
    let shape = g.shape(x);
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::dim(format!("cannot standardize a tensor of shape {shape:?}")));
    }
    let n = shape[0];
    let m = shape[1..].iter().product::<usize>();
    if mode == ScaleMode::None || m == 0 {
        return Ok((x, ScaleRecord { shift: vec![0.0; n], scale: vec![1.0; n] }));
    }
    let flat = g.reshape(x, &[n, m])?;
    let inv_m = 1.0 / m as f64;
    let (centered, shift, denom) = match mode {
        ScaleMode::L1 => {
            let mean_abs = g.scale(g.sum_cols(g.abs(flat))?, inv_m);
            (flat, None, g.clamp_min(mean_abs, SCALE_DELTA))
        }
        ScaleMode::MuSigma => {
            let mu = g.scale(g.sum_cols(flat)?, inv_m);
            let centered = g.add_col(flat, g.scale(mu, -1.0))?;
            let var = g.scale(g.sum_cols(g.mul(centered, centered)?)?, inv_m);
            let sigma = g.pow(g.clamp_min(var, SCALE_DELTA * SCALE_DELTA), 0.5);
            (centered, Some(mu), sigma)
        }
        ScaleMode::None => unreachable!(),
    };
    let y = g.mul_col(centered, g.pow(denom, -1.0))?;
    let record = ScaleRecord {
        shift: shift.map_or_else(|| vec![0.0; n], |s| g.value(s).data().to_vec()),
        scale: g.value(denom).data().to_vec(),
    };
    Ok((g.reshape(y, &shape)?, record))
}

/// Batch and running corrections for one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WhiteningState {
    /// Per-block `D` from the most recent training batch.
    pub batch_d: Option<Vec<Tensor>>,
    /// Per-block exponential moving average of `D`.
    pub running_d: Option<Vec<Tensor>>,
    pub mode: Mode,
    /// Newton residual of each block in the most recent fit (zero for the eigen method).
    pub last_residuals: Vec<f64>,
}

impl WhiteningState {
    fn record_batch(&mut self, ds: Vec<Tensor>, momentum: f64) -> Result<()> {
        self.running_d = Some(match self.running_d.take() {
            None => ds.clone(),
            Some(running) => running
                .iter()
                .zip(&ds)
                .map(|(r, d)| r.scale(momentum).add(&d.scale(1.0 - momentum)))
                .collect::<Result<_>>()?,
        });
        self.batch_d = Some(ds);
        Ok(())
    }

    /// The correction the forward pass reads in the current mode.
    pub fn active(&self) -> Result<&[Tensor]> {
        let (d, what) = match self.mode {
            Mode::Training => (&self.batch_d, "training forward before fit_whitening"),
            Mode::Evaluation => (&self.running_d, "evaluation before any whitening statistics were fit"),
        };
        d.as_deref().ok_or_else(|| Error::contract(what))
    }
}

/// A fully-connected, convolution or correlation layer with deconvolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NdppLayer {
    pub config: NdppLayerConfig,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub state: WhiteningState,
}

/// Row `r` of the `d×out` weight matrix equals which flat weight entry, per layer kind.
fn weight_matrix_index(config: &NdppLayerConfig) -> Rc<[usize]> {
    let out = config.out_features;
    let win = config.window();
    let d = config.in_features * win;
    let mut index = vec![0; d * out];
    for o in 0..out {
        for c in 0..config.in_features {
            for p in 0..win {
                // Correlation applies the kernel flipped in every spatial axis.
                let src = if config.layer_kind == LayerKind::Correlation { win - 1 - p } else { p };
                index[(c * win + p) * out + o] = (o * config.in_features + c) * win + src;
            }
        }
    }
    index.into()
}

fn slice_rows_graph(g: &Graph, x: Var, range: Range<usize>) -> Result<Var> {
    let shape = g.shape(x);
    if range.start == 0 && range.end == shape[0] {
        return Ok(x);
    }
    let cols = shape[1];
    let index: Rc<[usize]> = (range.start * cols..range.end * cols).collect();
    g.gather(x, index, &[range.len(), cols])
}

fn append_ones_graph(g: &Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let (n, d) = (shape[0], shape[1]);
    let widen = g.constant(Tensor::from_fn(&[d, d + 1], |k| if k / (d + 1) == k % (d + 1) { 1.0 } else { 0.0 }));
    let ones = g.constant(Tensor::from_fn(&[n, d + 1], |k| if k % (d + 1) == d { 1.0 } else { 0.0 }));
    g.add(g.matmul(x, widen)?, ones)
}

/// Data-matrix rows used for covariance estimation, from a standardized input.
fn covariance_rows_graph(config: &NdppLayerConfig, g: &Graph, xs: Var) -> Result<Var> {
    match config.layer_kind {
        LayerKind::FullyConnected if config.with_bias => append_ones_graph(g, xs),
        LayerKind::FullyConnected => Ok(xs),
        _ => {
            let geom = WindowGeometry::new(&g.shape(xs), config.kernel, config.padding, config.stride)?;
            data_matrix_graph(g, xs, &geom, config.subsample)
        }
    }
}

/// The standardized, subsampled data matrix whose second moments define the
/// layer's covariance.
pub fn covariance_data_matrix(config: &NdppLayerConfig, x: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let (xs, _) = scale_standardize_graph(&g, xv, config.scale_mode)?;
    let rows = covariance_rows_graph(config, &g, xs)?;
    Ok((*g.value(rows)).clone())
}

impl NdppLayer {
    /// Weights drawn uniformly from `±√(1/fan_in)`; the bias starts at zero.
    pub fn new(config: NdppLayerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let bound = (1.0 / config.fan_in() as f64).sqrt();
        let weight = Tensor::from_fn(&config.weight_shape(), |_| rng.random_range(-bound..bound));
        let bias = config.bias_shape().map(|s| Tensor::zeros(&s));
        Ok(NdppLayer { config, weight, bias, state: WhiteningState::default() })
    }

    pub fn with_weights(config: NdppLayerConfig, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        config.validate()?;
        if weight.shape() != config.weight_shape() {
            return Err(Error::dim(format!(
                "weight shape {:?} does not match config {:?}",
                weight.shape(),
                config.weight_shape()
            )));
        }
        if bias.as_ref().map(|b| b.shape().to_vec()) != config.bias_shape() {
            return Err(Error::dim("bias shape does not match config"));
        }
        Ok(NdppLayer { config, weight, bias, state: WhiteningState::default() })
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    /// Switches which correction the forward pass reads.
    pub fn set_mode(&mut self, mode: Mode) {
        self.state.mode = mode;
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = match c.layer_kind {
            LayerKind::FullyConnected => shape.len() == 2 && shape[1] == c.in_features,
            _ => shape.len() == c.spatial_dims + 2 && shape[1] == c.in_features,
        };
        if ok && shape[0] > 0 {
            Ok(())
        } else {
            Err(Error::dim(format!("input shape {shape:?} does not fit layer {:?}", c.layer_kind)))
        }
    }

    fn geometry(&self, shape: &[usize]) -> Result<WindowGeometry> {
        WindowGeometry::new(shape, self.config.kernel, self.config.padding, self.config.stride)
    }

    /// Regularized per-block covariance of `rows`, with second moments summed
    /// shard by shard in worker order when more than one worker is configured.
    pub(crate) fn block_covariances_graph(&self, g: &Graph, rows: Var, samples: usize) -> Result<Vec<Var>> {
        let shape = g.shape(rows);
        let total = shape[0];
        let per_sample = total / samples;
        let shards = shard_ranges(samples, self.config.workers)?;
        let blocks = split_columns_graph(g, rows, &self.config.blocks())?;
        blocks
            .into_iter()
            .map(|xb| {
                let mut acc: Option<Var> = None;
                for shard in &shards {
                    let part = slice_rows_graph(g, xb, shard.start * per_sample..shard.end * per_sample)?;
                    let gram = g.matmul(g.transpose(part)?, part)?;
                    acc = Some(match acc {
                        None => gram,
                        Some(a) => g.add(a, gram)?,
                    });
                }
                let sum = acc.expect("at least one shard");
                let cov = g.scale(sum, 1.0 / total as f64);
                let sym = g.scale(g.add(cov, g.transpose(cov)?)?, 0.5);
                regularize_graph(g, sym, self.config.epsilon)
            })
            .collect()
    }

    fn corrections_graph(&self, g: &Graph, covs: Vec<Var>) -> Result<Vec<Var>> {
        covs.into_iter()
            .map(|cov| match self.config.isqrt_method {
                InverseSqrtMethod::Newton => inverse_sqrt_newton_graph(g, cov, self.config.newton_iterations),
                InverseSqrtMethod::Eigen => Ok(g.constant(inverse_sqrt_eigen(&g.value(cov))?)),
            })
            .collect()
    }

    /// The `d×out` weight matrix acting on data-matrix columns.
    fn weight_matrix_graph(&self, g: &Graph, w: Var) -> Result<Var> {
        match self.config.layer_kind {
            LayerKind::FullyConnected => Ok(w),
            _ => {
                let flat = g.reshape(w, &[self.weight.len()])?;
                let d = self.config.data_columns();
                g.gather(flat, weight_matrix_index(&self.config), &[d, self.config.out_features])
            }
        }
    }

    /// `blockdiag(D)·W`, assembled block by block.
    fn fused_weight_graph(&self, g: &Graph, ds: &[Var], w: Var) -> Result<Var> {
        let wm = self.weight_matrix_graph(g, w)?;
        let parts = self
            .config
            .blocks()
            .into_iter()
            .zip(ds)
            .map(|(r, &d)| g.matmul(d, slice_rows_graph(g, wm, r)?))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&parts)
    }

    /// Applies the layer as a plain linear map or convolution with weight matrix `wm`.
    fn apply_graph(&self, g: &Graph, xs: Var, wm: Var, bias: Option<Var>) -> Result<Var> {
        match self.config.layer_kind {
            LayerKind::FullyConnected => {
                let x = if self.config.with_bias { append_ones_graph(g, xs)? } else { xs };
                g.matmul(x, wm)
            }
            _ => {
                let geom = self.geometry(&g.shape(xs))?;
                let cols = data_matrix_graph(g, xs, &geom, 1)?;
                let mut y = g.matmul(cols, wm)?;
                if let Some(b) = bias {
                    y = g.add_row(y, b)?;
                }
                let out = self.config.out_features;
                let flat = g.reshape(y, &[g.value(y).len()])?;
                g.gather(flat, geom.output_permutation(out).into(), &geom.output_shape(out))
            }
        }
    }

    /// Records the layer on `g` for input `x`, weight `w` and bias `b` (the
    /// latter two are passed in so the caller decides what is differentiable).
    ///
    /// In training mode the batch correction is computed inside the graph and
    /// stored in the state, and the running average is updated. In evaluation
    /// mode the running average enters as a constant.
    pub fn forward_graph(&mut self, g: &Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = g.shape(x);
        self.check_input(&shape)?;
        let (xs, _) = scale_standardize_graph(g, x, self.config.scale_mode)?;
        let ds = match self.state.mode {
            Mode::Training => {
                let rows = covariance_rows_graph(&self.config, g, xs)?;
                let covs = self.block_covariances_graph(g, rows, shape[0])?;
                let ds = self.corrections_graph(g, covs.clone())?;
                let values: Vec<Tensor> = ds.iter().map(|&d| (*g.value(d)).clone()).collect();
                self.state.last_residuals = match self.config.isqrt_method {
                    InverseSqrtMethod::Eigen => vec![0.0; ds.len()],
                    InverseSqrtMethod::Newton => covs
                        .iter()
                        .zip(&values)
                        .map(|(&c, d)| crate::matfun::whitening_residual(d, &g.value(c)))
                        .collect::<Result<_>>()?,
                };
                self.state.record_batch(values, self.config.running_momentum)?;
                ds
            }
            Mode::Evaluation => {
                let running = self.state.active()?.to_vec();
                running.into_iter().map(|d| g.constant(d)).collect()
            }
        };
        let wf = self.fused_weight_graph(g, &ds, w)?;
        self.apply_graph(g, xs, wf, b)
    }

    /// Fits the batch correction on `x` (training mode only) and updates the running average.
    pub fn fit_whitening(&mut self, x: &Tensor) -> Result<()> {
        if self.state.mode != Mode::Training {
            return Err(Error::contract("fit_whitening requires training mode"));
        }
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(self.weight.clone());
        let b = self.bias.clone().map(|b| g.constant(b));
        self.forward_graph(&g, xv, w, b)?;
        Ok(())
    }

    /// Per-block covariance of the (subsampled) data matrix, after regularization.
    pub fn block_covariances(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x.shape())?;
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let (xs, _) = scale_standardize_graph(&g, xv, self.config.scale_mode)?;
        let rows = covariance_rows_graph(&self.config, &g, xs)?;
        let covs = self.block_covariances_graph(&g, rows, x.shape()[0])?;
        Ok(covs.into_iter().map(|c| (*g.value(c)).clone()).collect())
    }

    /// Standardized, unsubsampled data matrix `S·X` of the layer for input `x`.
    pub fn standardized_data_matrix(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let (xs, _) = scale_standardize(x, self.config.scale_mode)?;
        let m = match self.config.layer_kind {
            LayerKind::FullyConnected => crate::datamatrix::build_fc(&xs, self.config.with_bias)?,
            _ => crate::datamatrix::build_conv(&xs, self.config.kernel, self.config.padding, self.config.stride, 1)?,
        };
        Ok(m.values)
    }

    /// `blockdiag(D)·W` with the correction of the current mode.
    pub fn fused_weight(&self) -> Result<Tensor> {
        let g = Graph::new();
        let ds: Vec<Var> = self.state.active()?.iter().map(|d| g.constant(d.clone())).collect();
        let w = g.constant(self.weight.clone());
        let wf = self.fused_weight_graph(&g, &ds, w)?;
        Ok((*g.value(wf)).clone())
    }

    /// Fused forward pass using the stored correction of the current mode.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let (xs, _) = scale_standardize_graph(&g, xv, self.config.scale_mode)?;
        let wf = g.constant(self.fused_weight()?);
        let b = self.bias.clone().map(|b| g.constant(b));
        let y = self.apply_graph(&g, xs, wf, b)?;
        Ok((*g.value(y)).clone())
    }

    /// Unfused reference: `((S·X)·blockdiag(D))·W`, evaluated explicitly.
    pub fn forward_explicit(&self, x: &Tensor) -> Result<Tensor> {
        let sx = self.standardized_data_matrix(x)?;
        let d = Tensor::block_diag(self.state.active()?)?;
        let g = Graph::new();
        let w = g.constant(self.weight.clone());
        let wm = (*g.value(self.weight_matrix_graph(&g, w)?)).clone();
        let mut y = sx.matmul(&d)?.matmul(&wm)?;
        if self.config.layer_kind == LayerKind::FullyConnected {
            return Ok(y);
        }
        if let Some(b) = &self.bias {
            let out = self.config.out_features;
            for (k, v) in y.data_mut().iter_mut().enumerate() {
                *v += b.data()[k % out];
            }
        }
        let geom = self.geometry(x.shape())?;
        let perm = geom.output_permutation(self.config.out_features);
        let data = perm.iter().map(|&i| y.data()[i]).collect();
        Tensor::new(geom.output_shape(self.config.out_features), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matfun::covariance;
    use crate::tensor::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn layer(config: NdppLayerConfig, seed: u64) -> NdppLayer {
        NdppLayer::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn scale_examples() {
        let x = random(&[3, 4], 1);
        assert_eq!(scale_standardize(&x, ScaleMode::None).unwrap().0, x);
        let (y, rec) = scale_standardize(&Tensor::from_rows(&[vec![1.0, 3.0]]), ScaleMode::MuSigma).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        assert_eq!(rec.shift, vec![2.0]);
        let (y, _) = scale_standardize(&Tensor::from_rows(&[vec![2.0, -2.0, 4.0, -4.0]]), ScaleMode::L1).unwrap();
        let expected = [2.0 / 3.0, -2.0 / 3.0, 4.0 / 3.0, -4.0 / 3.0];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let zero = Tensor::zeros(&[2, 3]);
        for mode in [ScaleMode::L1, ScaleMode::MuSigma] {
            assert_eq!(scale_standardize(&zero, mode).unwrap().0, zero);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = NdppLayerConfig::fully_connected(4, 2);
        assert!(c.validate().is_ok());
        c.epsilon = -1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = NdppLayerConfig::convolution(2, 3, 3);
        c.running_momentum = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = NdppLayerConfig::correlation(2, 3, 3);
        c.stride = 2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = NdppLayerConfig::fully_connected(4, 2);
        c.block_size = BlockPolicy::Fixed(0);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn whitened_input_gives_identity_correction() {
        // Columns of ±1 Hadamard patterns have identity covariance.
        let h = Tensor::from_rows(&[
            vec![1.0, 1.0, 1.0, 1.0],
            vec![1.0, -1.0, 1.0, -1.0],
            vec![1.0, 1.0, -1.0, -1.0],
            vec![1.0, -1.0, -1.0, 1.0],
        ]);
        let mut c = NdppLayerConfig::fully_connected(4, 2);
        c.with_bias = false;
        c.epsilon = 0.0;
        let mut l = layer(c, 1);
        l.fit_whitening(&h).unwrap();
        assert!(l.state.batch_d.as_ref().unwrap()[0].max_abs_diff(&Tensor::eye(4)).unwrap() < 1e-12);
    }

    #[test]
    fn running_average_with_zero_momentum_tracks_batch() {
        let mut c = NdppLayerConfig::fully_connected(3, 2);
        c.running_momentum = 0.0;
        let mut l = layer(c, 2);
        let x = random(&[16, 3], 3);
        l.fit_whitening(&x).unwrap();
        l.fit_whitening(&x).unwrap();
        assert_eq!(l.state.batch_d, l.state.running_d);
        let train = l.forward(&x).unwrap();
        l.set_mode(Mode::Evaluation);
        assert_eq!(l.forward(&x).unwrap(), train);
        l.set_mode(Mode::Training);
        l.set_mode(Mode::Evaluation);
        assert_eq!(l.forward(&x).unwrap(), train);
    }

    #[test]
    fn running_average_blends() {
        let mut c = NdppLayerConfig::fully_connected(3, 2);
        c.running_momentum = 0.5;
        let mut l = layer(c, 2);
        l.fit_whitening(&random(&[16, 3], 3)).unwrap();
        let first = l.state.batch_d.clone().unwrap();
        l.fit_whitening(&random(&[16, 3], 4)).unwrap();
        let second = l.state.batch_d.clone().unwrap();
        let expected = first[0].scale(0.5).add(&second[0].scale(0.5)).unwrap();
        assert!(l.state.running_d.unwrap()[0].max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn evaluation_before_fit_is_rejected() {
        let mut l = layer(NdppLayerConfig::fully_connected(3, 2), 1);
        l.set_mode(Mode::Evaluation);
        assert!(matches!(l.forward(&random(&[2, 3], 1)), Err(Error::Contract(_))));
        assert!(matches!(l.fit_whitening(&random(&[2, 3], 1)), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_correction_gives_plain_layer() {
        let mut c = NdppLayerConfig::fully_connected(3, 2);
        c.with_bias = false;
        let mut l = layer(c, 5);
        l.state.batch_d = Some(vec![Tensor::eye(3)]);
        let x = random(&[4, 3], 6);
        assert_eq!(l.forward(&x).unwrap(), x.matmul(&l.weight).unwrap());
    }

    #[test]
    fn one_dimensional_convolution_is_windowed_product() {
        // y = X·w for the 3-tap windows of a 5-sample signal.
        let mut c = NdppLayerConfig::convolution(1, 1, 3);
        c.spatial_dims = 1;
        c.with_bias = false;
        let w = Tensor::new(vec![1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut l = NdppLayer::with_weights(c, w, None).unwrap();
        l.state.batch_d = Some(vec![Tensor::eye(3)]);
        let x = Tensor::new(vec![1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3]);
        assert_eq!(y.data(), &[4.5, 6.0, 7.5]);
    }

    #[test]
    fn correlation_applies_flipped_kernel() {
        let mut c = NdppLayerConfig::correlation(1, 1, 2);
        c.spatial_dims = 1;
        c.with_bias = false;
        let w = Tensor::new(vec![1, 1, 2], vec![1.0, 10.0]).unwrap();
        let mut l = NdppLayer::with_weights(c, w, None).unwrap();
        l.state.batch_d = Some(vec![Tensor::eye(2)]);
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        // Full convolution of [1, 2] with [1, 10].
        assert_eq!(l.forward(&x).unwrap().data(), &[1.0, 12.0, 20.0]);
    }

    fn all_kinds() -> Vec<(NdppLayerConfig, Vec<usize>)> {
        let mut fc = NdppLayerConfig::fully_connected(5, 3);
        fc.block_size = BlockPolicy::Fixed(4);
        let mut conv = NdppLayerConfig::convolution(2, 3, 3);
        conv.padding = 1;
        conv.stride = 2;
        conv.block_size = BlockPolicy::Fixed(8);
        let mut corr = NdppLayerConfig::correlation(2, 2, 2);
        corr.subsample = 2;
        vec![(fc, vec![12, 5]), (conv, vec![3, 2, 5, 5]), (corr, vec![2, 2, 4, 3])]
    }

    #[test]
    fn fused_matches_explicit_for_all_kinds() {
        for (i, (mut c, shape)) in all_kinds().into_iter().enumerate() {
            c.scale_mode = ScaleMode::MuSigma;
            let mut l = layer(c, 10 + i as u64);
            if let Some(b) = &mut l.bias {
                *b = random(b.shape(), 20);
            }
            let x = random(&shape, 30 + i as u64);
            l.fit_whitening(&x).unwrap();
            let fused = l.forward(&x).unwrap();
            let explicit = l.forward_explicit(&x).unwrap();
            assert!(fused.max_abs_diff(&explicit).unwrap() <= 1e-10, "kind {i}");
        }
    }

    #[test]
    fn transformed_covariance_is_identity_with_eigen() {
        let mut c = NdppLayerConfig::fully_connected(4, 2);
        c.epsilon = 0.0;
        c.isqrt_method = InverseSqrtMethod::Eigen;
        c.block_size = BlockPolicy::Fixed(3);
        let mut l = layer(c, 1);
        let x = random(&[40, 4], 2).matmul(&random(&[4, 4], 3)).unwrap();
        l.fit_whitening(&x).unwrap();
        let sx = l.standardized_data_matrix(&x).unwrap();
        for (r, d) in l.config.blocks().into_iter().zip(l.state.batch_d.as_ref().unwrap()) {
            let t = sx.slice_cols(r).unwrap().matmul(d).unwrap();
            let cov = covariance(&t).unwrap();
            assert!(cov.max_abs_diff(&Tensor::eye(cov.rows())).unwrap() < 1e-8);
        }
    }

    #[test]
    fn full_layer_gradchecks_for_all_kinds() {
        for (i, (mut c, shape)) in all_kinds().into_iter().enumerate() {
            c.scale_mode = [ScaleMode::L1, ScaleMode::MuSigma, ScaleMode::L1][i];
            c.workers = 1 + i % 2;
            let l = layer(c, 40 + i as u64);
            let x = random(&shape, 50 + i as u64);
            let mut inputs = vec![x, l.weight.clone()];
            inputs.extend(l.bias.iter().map(|b| random(b.shape(), 60)));
            let out_shape = {
                let mut probe_layer = l.clone();
                probe_layer.fit_whitening(&inputs[0]).unwrap();
                probe_layer.forward(&inputs[0]).unwrap().shape().to_vec()
            };
            let probe = random(&out_shape, 70);
            let report = gradcheck(
                |g, v| {
                    let mut l = l.clone();
                    let y = l.forward_graph(g, v[0], v[1], v.get(2).copied())?;
                    let p = g.constant(probe.clone());
                    Ok(g.sum(g.mul(y, p)?))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "kind {i}: {report:?}");
        }
    }

    #[test]
    fn sharded_statistics_match_single_worker() {
        let (mut c, shape) = all_kinds().remove(1);
        let x = random(&shape, 3);
        let single = layer(c.clone(), 1).block_covariances(&x).unwrap();
        c.workers = 3;
        let sharded = layer(c, 1).block_covariances(&x).unwrap();
        for (a, b) in single.iter().zip(&sharded) {
            assert!(a.max_abs_diff(b).unwrap() <= 1e-12);
        }
    }
}
