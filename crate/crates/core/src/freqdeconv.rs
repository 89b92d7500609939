//! Frequency-domain whitening and the spatial deconvolution kernel.
//!
//! Transforms are direct sums (separable along each axis for images), which is
//! plenty for signals up to a few hundred samples per side.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitude stabilizer used when dividing by `|F(x)|`.
pub const MAGNITUDE_DELTA: f64 = 1e-12;

/// Complex spectrum stored as two real tensors of the signal's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl Spectrum {
    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn magnitude(&self) -> Tensor {
        Tensor::from_fn(self.re.shape(), |k| self.re.data()[k].hypot(self.im.data()[k]))
    }
}

fn dims(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] if n > 0 => Ok((1, n)),
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::dim(format!("expected a non-empty 1-d or 2-d signal, got {shape:?}"))),
    }
}

/// In-place 1-d transform of `len` complex values spaced `stride` apart.
fn transform_axis(re: &mut [f64], im: &mut [f64], offset: usize, stride: usize, len: usize, sign: f64) {
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..len)
        .map(|k| {
            let a = sign * 2.0 * PI * k as f64 / len as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    let xr: Vec<f64> = (0..len).map(|j| re[offset + j * stride]).collect();
    let xi: Vec<f64> = (0..len).map(|j| im[offset + j * stride]).collect();
    for k in 0..len {
        let (mut sr, mut si) = (0.0, 0.0);
        for j in 0..len {
            let t = (k * j) % len;
            sr += xr[j] * cos[t] - xi[j] * sin[t];
            si += xr[j] * sin[t] + xi[j] * cos[t];
        }
        re[offset + k * stride] = sr;
        im[offset + k * stride] = si;
    }
}

fn transform(re: &Tensor, im: &Tensor, sign: f64) -> Result<Spectrum> {
    let (h, w) = dims(re.shape())?;
    let mut r = re.data().to_vec();
    let mut i = im.data().to_vec();
    for row in 0..h {
        transform_axis(&mut r, &mut i, row * w, 1, w, sign);
    }
    if h > 1 {
        for col in 0..w {
            transform_axis(&mut r, &mut i, col, w, h, sign);
        }
    }
    Ok(Spectrum { re: Tensor::new(re.shape().to_vec(), r)?, im: Tensor::new(re.shape().to_vec(), i)? })
}

/// Unnormalized forward transform, `F[k] = Σ x[j]·e^{−2πi·jk/n}`.
pub fn dft(x: &Tensor) -> Result<Spectrum> {
    transform(x, &Tensor::zeros(x.shape()), -1.0)
}

/// Inverse of [`dft`]; returns the real part.
pub fn idft(s: &Spectrum) -> Result<Tensor> {
    let out = transform(&s.re, &s.im, 1.0)?;
    let n = s.re.len() as f64;
    Ok(out.re.scale(1.0 / n))
}

/// `F⁻¹(F(x)/(|F(x)|+δ))`.
pub fn spectral_whiten(x: &Tensor) -> Result<Tensor> {
    let s = dft(x)?;
    let mag = s.magnitude();
    let scale = mag.map(|m| 1.0 / (m + MAGNITUDE_DELTA));
    idft(&Spectrum { re: s.re.mul(&scale)?, im: s.im.mul(&scale)? })
}

/// Moves index 0 to the center (`n/2`) along every axis.
pub fn fftshift(x: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(x.shape())?;
    let mut out = Tensor::zeros(x.shape());
    for i in 0..h {
        for j in 0..w {
            out.data_mut()[((i + h / 2) % h) * w + (j + w / 2) % w] = x.data()[i * w + j];
        }
    }
    Ok(out)
}

/// Spatial kernel `F⁻¹(1/(|F(x)|+δ))` of a 2-d image, centered.
pub fn deconv_kernel(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("deconvolution kernel needs a 2-d image, got {:?}", x.shape())));
    }
    let mag = dft(x)?.magnitude();
    let inv = mag.map(|m| 1.0 / (m + MAGNITUDE_DELTA));
    fftshift(&idft(&Spectrum { re: inv, im: Tensor::zeros(x.shape()) })?)
}

/// Center value and the mean of its four (circular) neighbours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSummary {
    pub center: f64,
    pub neighbor_mean: f64,
    /// Largest absolute value away from the center.
    pub max_surround: f64,
}

impl KernelSummary {
    pub fn of(kernel: &Tensor) -> Result<Self> {
        let (h, w) = dims(kernel.shape())?;
        let (ci, cj) = (h / 2, w / 2);
        let at = |i: usize, j: usize| kernel.data()[(i % h) * w + j % w];
        let center = at(ci, cj);
        let neighbors = [at(ci + h - 1, cj), at(ci + 1, cj), at(ci, cj + w - 1), at(ci, cj + 1)];
        let max_surround = kernel
            .data()
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != ci * w + cj)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max);
        Ok(KernelSummary { center, neighbor_mean: neighbors.iter().sum::<f64>() / 4.0, max_surround })
    }

    /// Positive center with a negative neighbourhood mean.
    pub fn is_center_surround(&self) -> bool {
        self.center > 0.0 && self.neighbor_mean < 0.0
    }
}

/// Largest deviation of a centered kernel under transposition and axis flips,
/// relative to its largest magnitude.
pub fn symmetry_defect(kernel: &Tensor) -> Result<f64> {
    let (h, w) = dims(kernel.shape())?;
    if h != w {
        return Err(Error::dim("symmetry check needs a square kernel"));
    }
    let n = h;
    let c = n / 2;
    let at = |i: usize, j: usize| kernel.data()[(i % n) * n + j % n];
    let flip = |i: usize| (2 * c + n - i) % n;
    let scale = kernel.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = at(i, j);
            for u in [at(j, i), at(flip(i), j), at(i, flip(j))] {
                worst = worst.max((v - u).abs());
            }
        }
    }
    Ok(if scale > 0.0 { worst / scale } else { 0.0 })
}

/// `x[t] = ρ·x[t−1] + e[t]` with standard normal innovations and `x[−1] = 0`.
pub fn ar1_signal(n: usize, rho: f64, rng: &mut impl Rng) -> Tensor {
    let mut prev = 0.0;
    Tensor::from_fn(&[n], |_| {
        let e: f64 = rng.sample(StandardNormal);
        prev = rho * prev + e;
        prev
    })
}

/// Separable 2-d AR(1) field
/// `x[i,j] = e + ρ·x[i−1,j] + ρ·x[i,j−1] − ρ²·x[i−1,j−1]`, zero outside the grid.
pub fn ar1_image(h: usize, w: usize, rho: f64, rng: &mut impl Rng) -> Tensor {
    let mut x = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let e: f64 = rng.sample(StandardNormal);
            let up = if i > 0 { x.at(i - 1, j) } else { 0.0 };
            let left = if j > 0 { x.at(i, j - 1) } else { 0.0 };
            let diag = if i > 0 && j > 0 { x.at(i - 1, j - 1) } else { 0.0 };
            x.set(i, j, e + rho * up + rho * left - rho * rho * diag);
        }
    }
    x
}

/// Real image with unit spectral magnitude at every frequency and random phases.
pub fn flat_spectrum_noise(h: usize, w: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let mut re: Tensor = Tensor::zeros(&[h, w]);
    let mut im: Tensor = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let (ci, cj) = ((h - i) % h, (w - j) % w);
            let k = i * w + j;
            let mirror = ci * w + cj;
            if mirror < k {
                // Conjugate of the bin already drawn.
                re.data_mut()[k] = re.data()[mirror];
                im.data_mut()[k] = -im.data()[mirror];
            } else if mirror == k {
                re.data_mut()[k] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            } else {
                let phase = rng.random_range(0.0..2.0 * PI);
                re.data_mut()[k] = phase.cos();
                im.data_mut()[k] = phase.sin();
            }
        }
    }
    idft(&Spectrum { re, im })
}

/// Circular autocorrelation of a 1-d signal at `lag`.
pub fn circular_autocorrelation(x: &Tensor, lag: usize) -> f64 {
    let n = x.len();
    (0..n).map(|t| x.data()[t] * x.data()[(t + lag) % n]).sum()
}
