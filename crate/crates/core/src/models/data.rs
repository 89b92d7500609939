//! Classification datasets: Gaussian blobs, AR(1)-textured images and IDX files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::freqdeconv::ar1_image;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `N×…` training samples.
    pub x_train: Tensor,
    pub y_train: Vec<usize>,
    pub x_eval: Tensor,
    pub y_eval: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn sample_shape(&self) -> &[usize] {
        &self.x_train.shape()[1..]
    }

    pub fn train_len(&self) -> usize {
        self.y_train.len()
    }
}

/// Selects samples `rows` of `x` along the leading axis.
pub fn take_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let per: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        if r >= x.shape()[0] {
            return Err(Error::dim(format!("row {r} outside {} samples", x.shape()[0])));
        }
        data.extend_from_slice(&x.data()[r * per..(r + 1) * per]);
    }
    let shape = std::iter::once(rows.len()).chain(x.shape()[1..].iter().copied()).collect();
    Tensor::new(shape, data)
}

fn split(name: &str, x: Tensor, y: Vec<usize>, n_train: usize, classes: usize) -> Result<Dataset> {
    let n = y.len();
    let train: Vec<usize> = (0..n_train).collect();
    let eval: Vec<usize> = (n_train..n).collect();
    Ok(Dataset {
        name: name.into(),
        x_train: take_rows(&x, &train)?,
        y_train: y[..n_train].to_vec(),
        x_eval: take_rows(&x, &eval)?,
        y_eval: y[n_train..].to_vec(),
        classes,
    })
}

pub const BLOBS_FEATURES: usize = 16;

/// Two Gaussian classes in 16 dimensions with means `±m` along a random
/// direction and a shared, strongly correlated noise covariance.
pub fn blobs(n_train: usize, n_eval: usize, seed: u64) -> Result<Dataset> {
    let d = BLOBS_FEATURES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: Vec<f64> = {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| 1.5 * x / norm).collect()
    };
    let mixing = Tensor::from_fn(&[d, d], |k| {
        let z: f64 = rng.sample(StandardNormal);
        if k / d == k % d { 1.0 + z * 0.3 } else { 0.4 * z }
    });
    let n = n_train + n_eval;
    let noise = Tensor::from_fn(&[n, d], |_| rng.sample(StandardNormal)).matmul(&mixing)?;
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Tensor::from_fn(&[n, d], |k| {
        let sign = if y[k / d] == 1 { 1.0 } else { -1.0 };
        noise.data()[k] + sign * direction[k % d]
    });
    split("blobs", x, y, n_train, 2)
}

/// Side length and background correlation of the AR(1) image task.
pub const AR1_SIZE: usize = 16;
pub const AR1_RHO: f64 = 0.9;
/// Checkerboard amplitude of the class signal.
pub const AR1_AMPLITUDE: f64 = 0.05;
/// Input gain of the steep variant, large enough that unnormalized networks
/// blow up at unit learning rate.
pub const AR1_STEEP_GAIN: f64 = 100.0;

/// One-channel `16×16` images: an AR(1) background (`ρ = 0.9`, unnormalized)
/// plus `±amplitude` times a checkerboard, the sign giving the class, all
/// multiplied by `gain`.
pub fn ar1_images(n_train: usize, n_eval: usize, amplitude: f64, gain: f64, seed: u64) -> Result<Dataset> {
    let s = AR1_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_train + n_eval;
    let mut data = Vec::with_capacity(n * s * s);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 1 { amplitude } else { -amplitude };
        let background = ar1_image(s, s, AR1_RHO, &mut rng);
        data.extend(background.data().iter().enumerate().map(|(k, v)| {
            let checker = if (k / s + k % s) % 2 == 0 { 1.0 } else { -1.0 };
            gain * (v + sign * checker)
        }));
        y.push(label);
    }
    split("ar1", Tensor::new(vec![n, 1, s, s], data)?, y, n_train, 2)
}

const IDX_UBYTE: u8 = 0x08;

/// Reads an unsigned-byte IDX file: two zero bytes, type code `0x08`, rank,
/// big-endian `u32` dimensions, then the raw bytes.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic[0] != 0 || magic[1] != 0 || magic[2] != IDX_UBYTE || magic[3] == 0 {
        return Err(Error::Format(format!("{}: not an unsigned-byte IDX file", path.display())));
    }
    let mut dims = Vec::with_capacity(magic[3] as usize);
    for _ in 0..magic[3] {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        dims.push(u32::from_be_bytes(b) as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = vec![0u8; len];
    r.read_exact(&mut data).map_err(|e| Error::Format(format!("{}: truncated IDX data ({e})", path.display())))?;
    Ok((dims, data))
}

pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() || dims.is_empty() || dims.len() > 255 {
        return Err(Error::dim(format!("{} bytes for IDX dims {dims:?}", data.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&[0, 0, IDX_UBYTE, dims.len() as u8])?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::dim("IDX dimension exceeds u32"))?;
        w.write_all(&d.to_be_bytes())?;
    }
    w.write_all(data)?;
    w.flush()?;
    Ok(())
}

/// Images (`N×H×W` or `N×C×H×W`, bytes scaled to `[0, 1]`) and labels from
/// IDX files; a seeded shuffle puts 80% into training.
pub fn load_idx(images: &Path, labels: &Path, seed: u64) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images)?;
    let (ldims, labels) = read_idx(labels)?;
    let n = *dims.first().unwrap_or(&0);
    if dims.len() < 2 || ldims != [n] || n < 2 {
        return Err(Error::Format(format!("image dims {dims:?} do not match label dims {ldims:?}")));
    }
    let sample: Vec<usize> = match dims.len() {
        3 => vec![1, dims[1], dims[2]],
        _ => dims[1..].to_vec(),
    };
    let x = Tensor::new(
        std::iter::once(n).chain(sample.iter().copied()).collect(),
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = y.iter().max().map_or(0, |m| m + 1).max(2);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let x = take_rows(&x, &order)?;
    let y = order.iter().map(|&i| y[i]).collect();
    let n_train = (n * 4 / 5).clamp(1, n - 1);
    split("idx", x, y, n_train, classes)
}

/// Dataset named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs,
    Ar1,
    /// `idx:<images>[,<labels>]`; without an explicit label file, `images`
    /// must contain `images` in its name and the labels are found by
    /// replacing that with `labels`.
    Idx { images: PathBuf, labels: PathBuf },
}

pub const DEFAULT_TRAIN: usize = 512;
pub const DEFAULT_EVAL: usize = 256;

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs => blobs(DEFAULT_TRAIN, DEFAULT_EVAL, seed),
            DatasetSpec::Ar1 => ar1_images(DEFAULT_TRAIN, DEFAULT_EVAL, AR1_AMPLITUDE, 1.0, seed),
            DatasetSpec::Idx { images, labels } => load_idx(images, labels, seed),
        }
    }

    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Blobs => "blobs".into(),
            DatasetSpec::Ar1 => "ar1".into(),
            DatasetSpec::Idx { images, labels } => format!("idx:{},{}", images.display(), labels.display()),
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => return Ok(DatasetSpec::Blobs),
            "ar1" => return Ok(DatasetSpec::Ar1),
            _ => {}
        }
        let rest = s.strip_prefix("idx:").ok_or_else(|| Error::Config(format!("unknown dataset {s:?}")))?;
        let (images, labels) = match rest.split_once(',') {
            Some((i, l)) => (PathBuf::from(i), PathBuf::from(l)),
            None => {
                let name = Path::new(rest).file_name().and_then(|n| n.to_str()).unwrap_or("");
                if !name.contains("images") {
                    return Err(Error::Config(format!("cannot infer the label file for {rest:?}; use idx:<images>,<labels>")));
                }
                (PathBuf::from(rest), Path::new(rest).with_file_name(name.replacen("images", "labels", 1)))
            }
        };
        Ok(DatasetSpec::Idx { images, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_sets_are_seeded_and_balanced() {
        let a = blobs(40, 20, 3).unwrap();
        assert_eq!(a, blobs(40, 20, 3).unwrap());
        assert_ne!(a, blobs(40, 20, 4).unwrap());
        assert_eq!(a.x_train.shape(), &[40, 16]);
        assert_eq!(a.y_train.iter().filter(|&&y| y == 1).count(), 20);
        let b = ar1_images(10, 4, 1.0, 1.0, 5).unwrap();
        assert_eq!(b.sample_shape(), &[1, 16, 16]);
        assert_eq!(b.y_eval.len(), 4);
    }

    #[test]
    fn ar1_class_signal_is_the_checkerboard() {
        let d = ar1_images(200, 0, 1.0, 1.0, 6).unwrap();
        // Projection onto the checkerboard separates the class means by about 2·amplitude.
        let mut means = [0.0; 2];
        for (i, &y) in d.y_train.iter().enumerate() {
            let img = &d.x_train.data()[i * 256..(i + 1) * 256];
            let proj: f64 = img.iter().enumerate().map(|(k, v)| if (k / 16 + k % 16) % 2 == 0 { *v } else { -v }).sum();
            means[y] += proj / 256.0 / 100.0;
        }
        assert!((means[1] - means[0] - 2.0).abs() < 0.2, "{means:?}");
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("ndpp-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let images = dir.join("train-images.idx");
        let pixels: Vec<u8> = (0..10 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        write_idx(&images, &[10, 3, 3], &pixels).unwrap();
        write_idx(&dir.join("train-labels.idx"), &[10], &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0]).unwrap();
        assert_eq!(read_idx(&images).unwrap(), (vec![10, 3, 3], pixels));

        let source: DatasetSpec = format!("idx:{}", images.display()).parse().unwrap();
        let d = source.load(1).unwrap();
        assert_eq!(d.classes, 3);
        assert_eq!(d.sample_shape(), &[1, 3, 3]);
        assert_eq!(d.train_len() + d.y_eval.len(), 10);
        assert!(d.x_train.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        std::fs::write(dir.join("bad.idx"), [0u8, 0, 8, 1, 0, 0, 0, 9, 1, 2]).unwrap();
        assert!(matches!(read_idx(&dir.join("bad.idx")), Err(Error::Format(_))));
        assert!(matches!(read_idx(&dir.join("missing.idx")), Err(Error::Io(_))));
        assert!("idx:foo.bin".parse::<DatasetSpec>().is_err());
        assert!("mnist".parse::<DatasetSpec>().is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }
}
