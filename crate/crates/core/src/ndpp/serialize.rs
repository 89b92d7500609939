//! Binary layer-state container.
//!
//! All integers and floats are little-endian. Counts and sizes are `u64`,
//! enum tags `u32`, flags `u8`. Layout:
//!
//! ```text
//! header:  b"NDPP"  u32 version  u64 layer_count
//! layer:   u32 layer_kind  u64 in_features  u64 out_features  u64 kernel
//!          u64 padding  u64 stride  u64 spatial_dims  u32 scale_mode
//!          u32 block_tag  u64 block_value  u64 subsample  f64 epsilon
//!          f64 running_momentum  u64 newton_iterations  u8 with_bias
//!          u32 isqrt_method  u64 workers
//!          u32 mode
//!          u64 weight_rank  u64 dims[weight_rank]  f64 weight[product(dims)]
//!          u8 has_bias  [u64 len  f64 bias[len]]
//!          u8 has_running  [u64 blocks  (u64 b  f64 d[b·b])*]
//! ```
//!
//! Buffers are row-major. Batch statistics are not stored.

use std::io::{Read, Write};

use super::{InverseSqrtMethod, Mode, NdppLayer, NdppLayerConfig, ScaleMode, WhiteningState};
use crate::datamatrix::LayerKind;
use crate::error::{Error, Result};
use crate::matfun::BlockPolicy;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NDPP";
pub const FORMAT_VERSION: u32 = 1;

/// Sanity cap on any single length read from a file.
const MAX_LEN: u64 = 1 << 32;

struct Writer<'a, W: Write>(&'a mut W);

impl<W: Write> Writer<'_, W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn usize(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn floats(&mut self, v: &[f64]) -> Result<()> {
        v.iter().try_for_each(|&x| self.f64(x))
    }
}

struct Reader<'a, R: Read>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated layer file".into()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(Error::Format(format!("length {v} exceeds limit")));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("invalid flag byte {v}"))),
        }
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn block_tag(p: BlockPolicy) -> (u32, u64) {
    match p {
        BlockPolicy::Default => (0, 0),
        BlockPolicy::Fixed(b) => (1, b as u64),
        BlockPolicy::Full => (2, 0),
    }
}

fn write_layer<W: Write>(w: &mut Writer<W>, l: &NdppLayer) -> Result<()> {
    let c = &l.config;
    w.u32(c.layer_kind.code())?;
    w.usize(c.in_features)?;
    w.usize(c.out_features)?;
    w.usize(c.kernel)?;
    w.usize(c.padding)?;
    w.usize(c.stride)?;
    w.usize(c.spatial_dims)?;
    w.u32(c.scale_mode.code())?;
    let (tag, value) = block_tag(c.block_size);
    w.u32(tag)?;
    w.u64(value)?;
    w.usize(c.subsample)?;
    w.f64(c.epsilon)?;
    w.f64(c.running_momentum)?;
    w.usize(c.newton_iterations)?;
    w.u8(u8::from(c.with_bias))?;
    w.u32(match c.isqrt_method {
        InverseSqrtMethod::Newton => 0,
        InverseSqrtMethod::Eigen => 1,
    })?;
    w.usize(c.workers)?;
    w.u32(match l.state.mode {
        Mode::Training => 0,
        Mode::Evaluation => 1,
    })?;
    w.usize(l.weight.rank())?;
    for &d in l.weight.shape() {
        w.usize(d)?;
    }
    w.floats(l.weight.data())?;
    match &l.bias {
        None => w.u8(0)?,
        Some(b) => {
            w.u8(1)?;
            w.usize(b.len())?;
            w.floats(b.data())?;
        }
    }
    match &l.state.running_d {
        None => w.u8(0)?,
        Some(blocks) => {
            w.u8(1)?;
            w.usize(blocks.len())?;
            for d in blocks {
                w.usize(d.rows())?;
                w.floats(d.data())?;
            }
        }
    }
    Ok(())
}

fn read_layer<R: Read>(r: &mut Reader<R>) -> Result<NdppLayer> {
    let bad = |what: &str, v: u64| Error::Format(format!("invalid {what} {v}"));
    let code = r.u32()?;
    let layer_kind = LayerKind::from_code(code).ok_or_else(|| bad("layer kind", code.into()))?;
    let in_features = r.len()?;
    let out_features = r.len()?;
    let kernel = r.len()?;
    let padding = r.len()?;
    let stride = r.len()?;
    let spatial_dims = r.len()?;
    let code = r.u32()?;
    let scale_mode = ScaleMode::from_code(code).ok_or_else(|| bad("scale mode", code.into()))?;
    let tag = r.u32()?;
    let value = r.len()?;
    let block_size = match tag {
        0 => BlockPolicy::Default,
        1 => BlockPolicy::Fixed(value),
        2 => BlockPolicy::Full,
        t => return Err(bad("block tag", t.into())),
    };
    let subsample = r.len()?;
    let epsilon = r.f64()?;
    let running_momentum = r.f64()?;
    let newton_iterations = r.len()?;
    let with_bias = r.flag()?;
    let isqrt_method = match r.u32()? {
        0 => InverseSqrtMethod::Newton,
        1 => InverseSqrtMethod::Eigen,
        t => return Err(bad("inverse square root method", t.into())),
    };
    let workers = r.len()?;
    let config = NdppLayerConfig {
        layer_kind,
        in_features,
        out_features,
        kernel,
        padding,
        stride,
        spatial_dims,
        scale_mode,
        block_size,
        subsample,
        epsilon,
        running_momentum,
        newton_iterations,
        with_bias,
        isqrt_method,
        workers,
    };
    config.validate().map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;
    let mode = match r.u32()? {
        0 => Mode::Training,
        1 => Mode::Evaluation,
        t => return Err(bad("mode", t.into())),
    };
    let rank = r.len()?;
    let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let weight = Tensor::new(shape, r.floats(n)?)?;
    let bias = if r.flag()? {
        let n = r.len()?;
        Some(Tensor::new(vec![n], r.floats(n)?)?)
    } else {
        None
    };
    let running_d = if r.flag()? {
        let count = r.len()?;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let b = r.len()?;
            blocks.push(Tensor::new(vec![b, b], r.floats(b * b)?)?);
        }
        Some(blocks)
    } else {
        None
    };
    let mut layer = NdppLayer::with_weights(config, weight, bias)
        .map_err(|e| Error::Format(format!("stored buffers do not match config: {e}")))?;
    layer.state = WhiteningState { batch_d: None, running_d, mode, last_residuals: Vec::new() };
    Ok(layer)
}

/// Writes the layers' configs, weights and running statistics.
pub fn save_layers<W: Write>(layers: &[&NdppLayer], out: &mut W) -> Result<()> {
    let mut w = Writer(out);
    w.0.write_all(MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.usize(layers.len())?;
    layers.iter().try_for_each(|l| write_layer(&mut w, l))
}

/// Reads layers written by [`save_layers`]. The batch statistics come back empty.
pub fn load_layers<R: Read>(input: &mut R) -> Result<Vec<NdppLayer>> {
    let mut r = Reader(input);
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Format("not a layer file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let count = r.len()?;
    (0..count).map(|_| read_layer(&mut r)).collect()
}
