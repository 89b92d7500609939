//! Data matrices (im2col) for fully-connected, convolution and correlation layers.
//!
//! Columns are channel-major: `C` contiguous groups of window entries, each
//! group in row-major spatial order. Rows enumerate `(sample, out_row, out_col)`
//! in that nesting order. One-dimensional signals are rank-3 tensors `N×C×L`
//! and are treated as images of height 1 with a `1×k` window.

use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, ZERO_INDEX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    FullyConnected,
    Convolution,
    Correlation,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::FullyConnected => "fc",
            LayerKind::Convolution => "conv",
            LayerKind::Correlation => "corr",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            LayerKind::FullyConnected => 0,
            LayerKind::Convolution => 1,
            LayerKind::Correlation => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LayerKind::FullyConnected),
            1 => Some(LayerKind::Convolution),
            2 => Some(LayerKind::Correlation),
            _ => None,
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" | "linear" => Ok(LayerKind::FullyConnected),
            "conv" => Ok(LayerKind::Convolution),
            "corr" => Ok(LayerKind::Correlation),
            other => Err(Error::Config(format!("unknown layer kind '{other}'"))),
        }
    }
}

/// Sliding-window geometry of a convolution-type layer on a concrete input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Input was rank 3 (`N×C×L`).
    pub one_dimensional: bool,
}

impl WindowGeometry {
    /// Geometry of a `k`-window with symmetric `pad` and `stride` over `shape`
    /// (`N×C×L` or `N×C×H×W`).
    pub fn new(shape: &[usize], k: usize, pad: usize, stride: usize) -> Result<Self> {
        let (batch, channels, height, width, one_dimensional) = match *shape {
            [n, c, l] => (n, c, 1, l, true),
            [n, c, h, w] => (n, c, h, w, false),
            _ => return Err(Error::dim(format!("expected N×C×L or N×C×H×W input, got {shape:?}"))),
        };
        if k == 0 || stride == 0 {
            return Err(Error::dim("kernel and stride must be at least 1"));
        }
        let (kernel_h, pad_h) = if one_dimensional { (1, 0) } else { (k, pad) };
        let (kernel_w, pad_w) = (k, pad);
        if height + 2 * pad_h < kernel_h || width + 2 * pad_w < kernel_w {
            return Err(Error::dim(format!(
                "kernel {k} larger than padded input {}×{}",
                height + 2 * pad_h,
                width + 2 * pad_w
            )));
        }
        Ok(WindowGeometry {
            batch,
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            pad_h,
            pad_w,
            stride,
            out_h: (height + 2 * pad_h - kernel_h) / stride + 1,
            out_w: (width + 2 * pad_w - kernel_w) / stride + 1,
            one_dimensional,
        })
    }

    /// Columns of the data matrix, `C·k` or `C·k²`.
    pub fn cols(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Output rows and columns kept by subsampling with stride `s`, origin 0.
    pub fn sampled(&self, s: usize) -> (Vec<usize>, Vec<usize>) {
        let s = s.max(1);
        ((0..self.out_h).step_by(s).collect(), (0..self.out_w).step_by(s).collect())
    }

    /// Output tensor shape for `out` channels.
    pub fn output_shape(&self, out: usize) -> Vec<usize> {
        if self.one_dimensional {
            vec![self.batch, out, self.out_w]
        } else {
            vec![self.batch, out, self.out_h, self.out_w]
        }
    }

    /// Flat gather index (into the input buffer) for the data matrix, with
    /// [`ZERO_INDEX`] marking padding.
    pub fn gather_index(&self, s: usize) -> (Vec<usize>, usize) {
        let (rows_h, rows_w) = self.sampled(s);
        let cols = self.cols();
        let n_rows = self.batch * rows_h.len() * rows_w.len();
        let mut index = Vec::with_capacity(n_rows * cols);
        let plane = self.height * self.width;
        for n in 0..self.batch {
            for &oh in &rows_h {
                for &ow in &rows_w {
                    for c in 0..self.channels {
                        let base = (n * self.channels + c) * plane;
                        for i in 0..self.kernel_h {
                            let ih = (oh * self.stride + i) as isize - self.pad_h as isize;
                            for j in 0..self.kernel_w {
                                let iw = (ow * self.stride + j) as isize - self.pad_w as isize;
                                let inside = ih >= 0
                                    && iw >= 0
                                    && (ih as usize) < self.height
                                    && (iw as usize) < self.width;
                                index.push(if inside {
                                    base + ih as usize * self.width + iw as usize
                                } else {
                                    ZERO_INDEX
                                });
                            }
                        }
                    }
                }
            }
        }
        (index, n_rows)
    }

    /// Permutation taking a `(N·out_h·out_w)×out` matrix to `N×out×out_h×out_w` order.
    pub fn output_permutation(&self, out: usize) -> Vec<usize> {
        let spatial = self.out_h * self.out_w;
        let mut index = Vec::with_capacity(self.batch * out * spatial);
        for n in 0..self.batch {
            for o in 0..out {
                for p in 0..spatial {
                    index.push((n * spatial + p) * out + o);
                }
            }
        }
        index
    }
}

/// A data matrix and the layer context it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    pub values: Tensor,
    pub layer_kind: LayerKind,
    pub channels: usize,
    /// Kernel size; 1 for fully-connected layers.
    pub kernel: usize,
    pub subsample: usize,
    pub with_bias: bool,
}

impl DataMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

/// The input itself, with an optional trailing column of ones.
pub fn build_fc(x: &Tensor, with_bias: bool) -> Result<DataMatrix> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("fully-connected input must be rank 2, got {:?}", x.shape())));
    }
    let values = if with_bias { Tensor::hcat(&[x, &Tensor::ones(&[x.rows(), 1])])? } else { x.clone() };
    Ok(DataMatrix {
        values,
        layer_kind: LayerKind::FullyConnected,
        channels: x.cols(),
        kernel: 1,
        subsample: 1,
        with_bias,
    })
}

fn gather_matrix(x: &Tensor, geom: &WindowGeometry, s: usize) -> Tensor {
    let (index, rows) = geom.gather_index(s);
    let data = x.data();
    let values = index.iter().map(|&i| if i == ZERO_INDEX { 0.0 } else { data[i] }).collect();
    Tensor::new(vec![rows, geom.cols()], values).expect("gather shape")
}

/// Sliding-window data matrix of a convolution with padding `pad` and layer
/// stride `stride`, keeping every `s`-th output location in each spatial axis.
pub fn build_conv(x: &Tensor, k: usize, pad: usize, stride: usize, s: usize) -> Result<DataMatrix> {
    let geom = WindowGeometry::new(x.shape(), k, pad, stride)?;
    Ok(DataMatrix {
        values: gather_matrix(x, &geom, s),
        layer_kind: LayerKind::Convolution,
        channels: geom.channels,
        kernel: k,
        subsample: s.max(1),
        with_bias: false,
    })
}

/// As [`build_conv`] with `k − 1` zeros of padding on every side and stride 1.
pub fn build_corr(x: &Tensor, k: usize, s: usize) -> Result<DataMatrix> {
    if k == 0 {
        return Err(Error::dim("kernel must be at least 1"));
    }
    let mut m = build_conv(x, k, k - 1, 1, s)?;
    m.layer_kind = LayerKind::Correlation;
    Ok(m)
}

/// The data matrix recorded on a graph; gradients scatter back to `x`.
pub fn data_matrix_graph(g: &Graph, x: Var, geom: &WindowGeometry, s: usize) -> Result<Var> {
    let (index, rows) = geom.gather_index(s);
    let flat = g.reshape(x, &[g.value(x).len()])?;
    g.gather(flat, Rc::from(index), &[rows, geom.cols()])
}

fn check_ranges(blocks: &[Range<usize>], d: usize) -> Result<()> {
    let mut at = 0;
    for r in blocks {
        if r.start != at || r.end <= r.start {
            return Err(Error::contract(format!("block ranges {blocks:?} do not tile 0..{d}")));
        }
        at = r.end;
    }
    if at != d {
        return Err(Error::contract(format!("block ranges {blocks:?} do not tile 0..{d}")));
    }
    Ok(())
}

/// Column slices of the data matrix, one per block.
pub fn reshape_for_blocks(x: &DataMatrix, blocks: &[Range<usize>]) -> Result<Vec<Tensor>> {
    check_ranges(blocks, x.cols())?;
    blocks.iter().map(|r| x.values.slice_cols(r.clone())).collect()
}

/// Column slices of a recorded matrix, one per block.
pub fn split_columns_graph(g: &Graph, x: Var, blocks: &[Range<usize>]) -> Result<Vec<Var>> {
    let shape = g.shape(x);
    if shape.len() != 2 {
        return Err(Error::dim("split_columns_graph needs a matrix"));
    }
    let (n, d) = (shape[0], shape[1]);
    check_ranges(blocks, d)?;
    if blocks.len() == 1 {
        return Ok(vec![x]);
    }
    blocks
        .iter()
        .map(|r| {
            let index: Rc<[usize]> = (0..n).flat_map(|i| r.clone().map(move |j| i * d + j)).collect();
            g.gather(x, index, &[n, r.len()])
        })
        .collect()
}
