//! Property checks shared by `ndpp verify` and the acceptance target.

use ndpp_core::freqdeconv::{ar1_image, deconv_kernel, KernelSummary};
use ndpp_core::matfun::{covariance, inverse_sqrt_eigen, jacobi_eigh, regularize, BlockPolicy};
use ndpp_core::models::toy::{closed_form_solution, ndpp_one_step_predictions, standardized_one_step_predictions, witness, ToyProblem};
use ndpp_core::ndpp::{covariance_data_matrix, InverseSqrtMethod, NdppLayer, NdppLayerConfig, ScaleMode};
use ndpp_core::syncsim::synchronized_moments;
use ndpp_core::tensor::gradcheck::gradcheck;
use ndpp_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SUITES: [&str; 6] = ["whitening", "one-step", "gln", "sync", "gradcheck", "center-surround"];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

/// `N×C×L` batch of independent AR(1) sequences, started from the stationary law.
pub fn ar1_signals(n: usize, channels: usize, len: usize, rho: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let sd = 1.0 / (1.0 - rho * rho).sqrt();
    let mut out = Tensor::zeros(&[n, channels, len]);
    for seq in out.data_mut().chunks_mut(len) {
        let mut prev: f64 = sd * r.sample::<f64, _>(StandardNormal);
        for v in seq.iter_mut() {
            *v = prev;
            prev = rho * prev + r.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Largest `|D·Cov·D − I|` entry over the blocks of a 1-d convolution layer
/// (`k = 3`) fitted to AR(1) input, where `Cov` is the unregularized
/// covariance of the layer's data matrix.
pub fn whitening_identity_error(channels: usize, method: InverseSqrtMethod, epsilon: f64, seed: u64) -> Result<f64> {
    let mut c = NdppLayerConfig::convolution(channels, 2, 3);
    c.spatial_dims = 1;
    c.isqrt_method = method;
    c.epsilon = epsilon;
    let mut layer = NdppLayer::new(c.clone(), &mut rng(seed))?;
    let x = ar1_signals(64, channels, 128, 0.5, seed + 1);
    layer.fit_whitening(&x)?;
    let xm = covariance_data_matrix(&c, &x)?;
    let ds = layer.state.batch_d.clone().ok_or_else(|| Error::Contract("no batch correction".into()))?;
    let mut worst: f64 = 0.0;
    for (r, d) in c.blocks().into_iter().zip(&ds) {
        let cov = covariance(&xm.slice_cols(r)?)?;
        let whitened = d.matmul(&cov)?.matmul(d)?;
        worst = worst.max(whitened.max_abs_diff(&Tensor::eye(d.rows()))?);
    }
    Ok(worst)
}

/// Correlated features `Z·M` and noisy linear targets.
pub fn correlated_problem(n: usize, d: usize, seed: u64) -> Result<ToyProblem> {
    let z = gaussian(&[n, d], seed);
    let m = Tensor::eye(d).add(&gaussian(&[d, d], seed + 1).scale(0.5))?;
    let x = z.matmul(&m)?;
    let w = gaussian(&[d, 1], seed + 2);
    let y = x.matmul(&w)?.add(&gaussian(&[n, 1], seed + 3).scale(0.1))?;
    ToyProblem::new(x, y, false)
}

/// Loss after one `η = 1` step from zero on eigen-whitened features, minus the optimal loss.
pub fn one_step_gap(n: usize, d: usize, seed: u64) -> Result<f64> {
    let p = correlated_problem(n, d, seed)?;
    let dm = inverse_sqrt_eigen(&covariance(&p.x)?)?;
    let whitened = ToyProblem::new(p.x.matmul(&dm)?, p.y.clone(), false)?;
    let w0 = Tensor::zeros(&[d, 1]);
    let w1 = w0.sub(&whitened.gradient(&w0)?)?;
    let best = p.loss(&closed_form_solution(&p)?)?;
    Ok((whitened.loss(&w1)? - best).abs())
}

/// Random orthogonal matrix: eigenvectors of a random symmetric matrix.
pub fn random_orthogonal(n: usize, seed: u64) -> Result<Tensor> {
    let a = gaussian(&[n, n], seed);
    Ok(jacobi_eigh(&a.add(&a.transpose()?)?)?.1)
}

/// `Q₁·diag(s)·Q₂` with singular values spread log-uniformly over `[1, cond]`.
pub fn random_invertible(n: usize, cond: f64, seed: u64) -> Result<Tensor> {
    let q1 = random_orthogonal(n, seed)?;
    let q2 = random_orthogonal(n, seed + 1)?;
    let s: Vec<f64> = (0..n).map(|i| cond.powf(i as f64 / (n - 1).max(1) as f64)).collect();
    q1.matmul(&Tensor::diag(&s))?.matmul(&q2)
}

/// Relative difference of the corrected one-step predictions on `X` and `X·A`.
pub fn gln_gap(p: &ToyProblem, a: &Tensor) -> Result<f64> {
    let base = ndpp_one_step_predictions(&p.x, &p.y)?;
    let moved = ndpp_one_step_predictions(&p.x.matmul(a)?, &p.y)?;
    moved.rel_frobenius_diff(&base)
}

/// Largest prediction difference of plain standardized descent on the recorded witness.
pub fn witness_gap() -> Result<f64> {
    let x = witness::features();
    let y = witness::targets();
    let a = standardized_one_step_predictions(&x, &y)?;
    let b = standardized_one_step_predictions(&x.matmul(&witness::basis_change())?, &y)?;
    a.max_abs_diff(&b)
}

/// Layer used by the synchronization checks: 3×3 convolution with per-sample
/// standardization and 5-column blocks.
pub fn sync_layer_config() -> NdppLayerConfig {
    let mut c = NdppLayerConfig::convolution(2, 3, 3);
    c.padding = 1;
    c.scale_mode = ScaleMode::MuSigma;
    c.block_size = BlockPolicy::Fixed(5);
    c
}

/// Largest difference between `k`-worker aggregated block covariances and
/// those of the concatenated batch.
pub fn sync_gap(k: usize, per_worker: usize, seed: u64) -> Result<f64> {
    let c = sync_layer_config();
    let x = gaussian(&[k * per_worker, 2, 5, 5], seed);
    let agg = synchronized_moments(&x, &c, k)?.covariance_blocks(c.epsilon)?;
    let xm = covariance_data_matrix(&c, &x)?;
    let mut worst: f64 = 0.0;
    for (r, a) in c.blocks().into_iter().zip(&agg) {
        let reference = regularize(&covariance(&xm.slice_cols(r)?)?, c.epsilon)?;
        worst = worst.max(a.max_abs_diff(&reference)?);
    }
    Ok(worst)
}

/// Small layer of each kind with its input shape.
pub fn gradcheck_layers() -> Vec<(NdppLayerConfig, Vec<usize>)> {
    let mut fc = NdppLayerConfig::fully_connected(5, 3);
    fc.block_size = BlockPolicy::Fixed(4);
    fc.scale_mode = ScaleMode::L1;
    let mut conv = NdppLayerConfig::convolution(2, 3, 3);
    conv.padding = 1;
    conv.stride = 2;
    conv.block_size = BlockPolicy::Fixed(8);
    conv.scale_mode = ScaleMode::MuSigma;
    let mut corr = NdppLayerConfig::correlation(2, 2, 2);
    corr.subsample = 2;
    corr.scale_mode = ScaleMode::L1;
    vec![(fc, vec![12, 5]), (conv, vec![3, 2, 5, 5]), (corr, vec![2, 2, 4, 3])]
}

/// Worst relative error of central differences against the recorded
/// gradients of the full layer (standardization, covariance, Newton chain,
/// fused weight) with respect to input, weight and bias.
pub fn layer_gradcheck(config: &NdppLayerConfig, input_shape: &[usize], seed: u64) -> Result<f64> {
    let layer = NdppLayer::new(config.clone(), &mut rng(seed))?;
    let x = gaussian(input_shape, seed + 1);
    let mut inputs = vec![x.clone(), layer.weight.clone()];
    inputs.extend(layer.bias.iter().map(|b| gaussian(b.shape(), seed + 2)));
    let mut probe_layer = layer.clone();
    probe_layer.fit_whitening(&x)?;
    let probe = gaussian(probe_layer.forward(&x)?.shape(), seed + 3);
    let report = gradcheck(
        |g, v| {
            let mut l = layer.clone();
            let y = l.forward_graph(g, v[0], v[1], v.get(2).copied())?;
            Ok(g.sum(g.mul(y, g.constant(probe.clone()))?))
        },
        &inputs,
        1e-5,
    )?;
    Ok(report.max_rel_error)
}

/// Kernel summary for a 32×32 separable AR(1) image.
pub fn center_surround(rho: f64, seed: u64) -> Result<KernelSummary> {
    let img = ar1_image(32, 32, rho, &mut rng(seed));
    KernelSummary::of(&deconv_kernel(&img)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Overrides accepted by `ndpp verify`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VerifyOptions {
    /// Regularization for the Newton whitening suite.
    pub epsilon: Option<f64>,
}

fn suite(name: &'static str, checks: Vec<(String, bool)>) -> SuiteResult {
    let passed = checks.iter().all(|(_, ok)| *ok);
    let detail = checks.into_iter().map(|(d, _)| d).collect::<Vec<_>>().join("; ");
    SuiteResult { name, passed, detail }
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Result<SuiteResult> {
    let name = SUITES
        .iter()
        .copied()
        .find(|s| *s == name)
        .ok_or_else(|| Error::Config(format!("unknown suite {name:?}; expected one of {SUITES:?}")))?;
    let mut checks = Vec::new();
    match name {
        "whitening" => {
            let eps = opts.epsilon.unwrap_or(1e-5);
            for ch in [1, 4] {
                let e = whitening_identity_error(ch, InverseSqrtMethod::Newton, eps, 10 + ch as u64)?;
                checks.push((format!("newton C={ch} {e:.2e}"), e <= 1e-3));
                let e = whitening_identity_error(ch, InverseSqrtMethod::Eigen, 0.0, 10 + ch as u64)?;
                checks.push((format!("eigen C={ch} {e:.2e}"), e <= 1e-8));
            }
        }
        "one-step" => {
            for seed in 0..3 {
                let gap = one_step_gap(256, 8, seed)?;
                checks.push((format!("seed {seed} gap {gap:.1e}"), gap <= 1e-10));
            }
        }
        "gln" => {
            let p = correlated_problem(64, 6, 20)?;
            for seed in 0..5 {
                let a = random_invertible(6, 100.0, 30 + seed)?;
                let gap = gln_gap(&p, &a)?;
                checks.push((format!("A#{seed} {gap:.1e}"), gap <= 1e-6));
            }
            let w = witness_gap()?;
            checks.push((format!("witness {w:.3}"), w > 1e-3));
        }
        "sync" => {
            for k in [1, 2, 4, 8] {
                let gap = sync_gap(k, 2, 40 + k as u64)?;
                checks.push((format!("K={k} {gap:.1e}"), gap <= 1e-12));
            }
        }
        "gradcheck" => {
            for (c, shape) in gradcheck_layers() {
                let e = layer_gradcheck(&c, &shape, 50)?;
                checks.push((format!("{} {e:.1e}", c.layer_kind.name()), e <= 1e-4));
            }
        }
        "center-surround" => {
            for (i, rho) in [0.7, 0.8, 0.9].into_iter().enumerate() {
                let s = center_surround(rho, 60 + i as u64)?;
                checks.push((
                    format!("rho {rho} center {:.3} surround {:.3}", s.center, s.neighbor_mean),
                    s.is_center_surround(),
                ));
            }
        }
        _ => unreachable!("suite names are checked above"),
    }
    Ok(suite(name, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_invertible_has_requested_condition() {
        let a = random_invertible(5, 50.0, 1).unwrap();
        let (lambda, _) = jacobi_eigh(&a.transpose().unwrap().matmul(&a).unwrap()).unwrap();
        let (lo, hi) = lambda.iter().fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(((hi / lo).sqrt() - 50.0).abs() < 1e-6);
    }

    #[test]
    fn ar1_signals_have_the_requested_correlation() {
        let x = ar1_signals(200, 1, 64, 0.5, 2);
        let d = x.data();
        let (mut num, mut den) = (0.0, 0.0);
        for seq in d.chunks(64) {
            for t in 1..64 {
                num += seq[t] * seq[t - 1];
                den += seq[t] * seq[t];
            }
        }
        assert!((num / den - 0.5).abs() < 0.03);
    }

    #[test]
    fn unknown_suite_is_a_config_error() {
        assert!(matches!(run_suite("nope", &VerifyOptions::default()), Err(Error::Config(_))));
    }
}
