//! Spatial deconvolution kernels of synthetic or loaded images.

use std::io::Write;
use std::path::Path;

use ndpp_core::freqdeconv::{ar1_image, deconv_kernel, flat_spectrum_noise, KernelSummary};
use ndpp_core::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Grayscale image in `[0, 1]`, center-cropped to `size×size`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < size || h < size {
        return Err(Error::Format(format!("{}: {w}×{h} image is smaller than {size}×{size}", path.display())));
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    Ok(Tensor::from_fn(&[size, size], |k| {
        img.get_pixel((left + k % size) as u32, (top + k / size) as u32)[0] as f64 / 255.0
    }))
}

pub fn synthetic_ar1(size: usize, rho: f64, seed: u64) -> Tensor {
    ar1_image(size, size, rho, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn synthetic_white(size: usize, seed: u64) -> Result<Tensor> {
    flat_spectrum_noise(size, size, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sign(v: f64) -> char {
    if v > 0.0 {
        '+'
    } else if v < 0.0 {
        '-'
    } else {
        '0'
    }
}

/// Writes the centered kernel as a CSV grid followed by a sign-summary line.
pub fn write_kernel(img: &Tensor, w: &mut impl Write) -> Result<KernelSummary> {
    let k = deconv_kernel(img)?;
    let n = k.shape()[1];
    for row in k.data().chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    let s = KernelSummary::of(&k)?;
    writeln!(
        w,
        "# center={} surround_mean={} center_value={:.6e} surround_mean_value={:.6e} max_surround_ratio={:.3e}",
        sign(s.center),
        sign(s.neighbor_mean),
        s.center,
        s.neighbor_mean,
        if s.center != 0.0 { s.max_surround / s.center.abs() } else { f64::INFINITY },
    )?;
    Ok(s)
}
