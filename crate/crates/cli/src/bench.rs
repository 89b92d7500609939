//! Timing of the whitening pipeline against a plain convolution.

use std::io::Write;
use std::time::Instant;

use ndpp_core::datamatrix::{build_conv, LayerKind};
use ndpp_core::matfun::{covariance, gram, inverse_sqrt_blocks, inverse_sqrt_newton, partition_columns, regularize, BlockPolicy};
use ndpp_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CSV_HEADER: &str = "kernel,stride,ch_in,ch_out,h,w,t_getX,t_cov,t_isqrt,t_fuse,t_conv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub kernel: usize,
    pub stride: usize,
    pub ch_in: usize,
    pub ch_out: usize,
    pub h: usize,
    pub w: usize,
}

const fn shape(kernel: usize, stride: usize, ch_in: usize, ch_out: usize, h: usize, w: usize) -> LayerShape {
    LayerShape { kernel, stride, ch_in, ch_out, h, w }
}

/// Layer shapes from a small image network: a wide early layer, mid-depth
/// 3×3 layers, a strided transition, a 1×1 projection and the widest 3×3 layer last.
pub const LADDER: [LayerShape; 6] = [
    shape(3, 1, 3, 16, 32, 32),
    shape(3, 1, 16, 16, 32, 32),
    shape(3, 2, 16, 32, 32, 32),
    shape(3, 1, 32, 32, 16, 16),
    shape(1, 1, 64, 64, 16, 16),
    shape(3, 1, 64, 64, 32, 32),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub batch: usize,
    /// Columns per whitening block.
    pub block: usize,
    /// Subsampling stride of the covariance data matrix.
    pub subsample: usize,
    pub newton_iterations: usize,
    /// Each timing is the minimum over this many runs.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { batch: 16, block: 64, subsample: 3, newton_iterations: 5, repeats: 3, seed: 0 }
    }
}

/// Seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub shape: LayerShape,
    pub t_getx: f64,
    pub t_cov: f64,
    pub t_isqrt: f64,
    pub t_fuse: f64,
    pub t_conv: f64,
}

impl BenchRow {
    /// Everything the deconvolution adds on top of the convolution.
    pub fn whitening_total(&self) -> f64 {
        self.t_getx + self.t_cov + self.t_isqrt + self.t_fuse
    }
}

/// Minimum wall time of `repeats` runs of `f`, with the last run's output.
pub fn time_min<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let v = f()?;
        best = best.min(start.elapsed().as_secs_f64());
        out = Some(v);
    }
    Ok((best, out.expect("at least one run")))
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn bench_layer(s: LayerShape, cfg: &BenchConfig) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = random(&[cfg.batch, s.ch_in, s.h, s.w], &mut rng);
    let d = s.ch_in * s.kernel * s.kernel;
    let w = random(&[d, s.ch_out], &mut rng);
    let pad = s.kernel / 2;
    let blocks = partition_columns(d, LayerKind::Convolution, s.kernel, BlockPolicy::Fixed(cfg.block));

    let (t_getx, xm) = time_min(cfg.repeats, || build_conv(&x, s.kernel, pad, s.stride, cfg.subsample))?;
    let (t_cov, covs) = time_min(cfg.repeats, || {
        blocks
            .iter()
            .map(|r| regularize(&covariance(&xm.values.slice_cols(r.clone())?)?, 1e-5))
            .collect::<Result<Vec<_>>>()
    })?;
    let (t_isqrt, ds) = time_min(cfg.repeats, || inverse_sqrt_blocks(&covs, cfg.newton_iterations))?;
    let (t_fuse, _) = time_min(cfg.repeats, || {
        let parts = blocks
            .iter()
            .zip(&ds)
            .map(|(r, d)| d.d.matmul(&w.slice_rows(r.clone())?))
            .collect::<Result<Vec<_>>>()?;
        Tensor::vcat(&parts.iter().collect::<Vec<_>>())
    })?;
    let (t_conv, _) = time_min(cfg.repeats, || build_conv(&x, s.kernel, pad, s.stride, 1)?.values.matmul(&w))?;
    Ok(BenchRow { shape: s, t_getx, t_cov, t_isqrt, t_fuse, t_conv })
}

pub fn run_ladder(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    LADDER.iter().map(|&s| bench_layer(s, cfg)).collect()
}

/// Writes the ladder with times in milliseconds.
pub fn write_csv(rows: &[BenchRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        let s = r.shape;
        writeln!(
            w,
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            s.kernel,
            s.stride,
            s.ch_in,
            s.ch_out,
            s.h,
            s.w,
            r.t_getx * 1e3,
            r.t_cov * 1e3,
            r.t_isqrt * 1e3,
            r.t_fuse * 1e3,
            r.t_conv * 1e3
        )?;
    }
    Ok(())
}

/// Times for `XᵗX` of an `N×B` and a `2N×B` matrix.
pub fn cov_scaling(n: usize, b: usize, repeats: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let small = random(&[n, b], &mut rng);
    let large = random(&[2 * n, b], &mut rng);
    let (t1, _) = time_min(repeats, || gram(&small))?;
    let (t2, _) = time_min(repeats, || gram(&large))?;
    Ok((t1, t2))
}

/// Times for the Newton inverse square root of a `B×B` and a `2B×B` block.
pub fn isqrt_scaling(b: usize, iterations: usize, repeats: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spd = |n: usize, rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let a = random(&[2 * n, n], rng);
        regularize(&covariance(&a)?, 1e-3)
    };
    let small = spd(b, &mut rng)?;
    let large = spd(2 * b, &mut rng)?;
    let (t1, _) = time_min(repeats, || inverse_sqrt_newton(&small, iterations))?;
    let (t2, _) = time_min(repeats, || inverse_sqrt_newton(&large, iterations))?;
    Ok((t1, t2))
}
