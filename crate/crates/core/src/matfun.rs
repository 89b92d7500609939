//! Covariance, regularization, column blocking and inverse square roots.
//!
//! The inverse square root is computed with the coupled inverse Newton
//! iteration
//!
//! ```text
//! X₀ = I, M₀ = Cov/τ
//! T  = (3I − M_k)/2
//! X_{k+1} = X_k·T,  M_{k+1} = T²·M_k
//! D  = X_K / √τ
//! ```
//!
//! which converges to `Cov^{-1/2}` when the spectrum of `M₀` lies in `(0, 3)`.
//! The scale `τ` is chosen so that the largest eigenvalue of `M₀` is provably at
//! most 2.5 (see [`newton_scale`]). A cyclic Jacobi eigendecomposition serves as
//! the reference implementation.

use std::ops::Range;
use std::rc::Rc;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::datamatrix::LayerKind;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Default number of coupled Newton iterations.
pub const DEFAULT_NEWTON_ITERATIONS: usize = 5;
/// Residual above which a Newton result is flagged as not converged.
pub const CONVERGENCE_THRESHOLD: f64 = 0.5;
/// Upper bound placed on the pre-scaled spectrum.
const SPECTRUM_CEILING: f64 = 2.5;

/// `(1/N)·XᵗX`, symmetrized.
pub fn covariance<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.rows() == 0 || x.cols() == 0 {
        return Err(Error::contract(format!("covariance of empty or non-matrix input {:?}", x.shape())));
    }
    let n = T::from_f64(x.rows() as f64);
    gram(x)?.map(|v| v / n).symmetrize()
}

/// `XᵗX` without normalization.
pub fn gram<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.transpose()?.matmul(x)
}

fn mean_diag<T: Scalar>(cov: &Tensor<T>) -> Result<T> {
    let d = cov.rows();
    if cov.rank() != 2 || cov.cols() != d || d == 0 {
        return Err(Error::dim(format!("expected a non-empty square matrix, got {:?}", cov.shape())));
    }
    Ok(cov.trace()? / T::from_f64(d as f64))
}

/// `cov + ε·mean(diag(cov))·I`, or `cov + ε·I` when the mean diagonal is zero.
pub fn regularize<T: Scalar>(cov: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    if !(epsilon >= 0.0) {
        return Err(Error::contract(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let m = mean_diag(cov)?;
    let shift = if m == T::zero() { T::from_f64(epsilon) } else { T::from_f64(epsilon) * m };
    let mut out = cov.clone();
    for i in 0..cov.rows() {
        out.set(i, i, out.at(i, i) + shift);
    }
    Ok(out)
}

/// Differentiable version of [`regularize`]; the shift depends on `cov` through its trace.
pub fn regularize_graph(g: &Graph, cov: Var, epsilon: f64) -> Result<Var> {
    if !(epsilon >= 0.0) {
        return Err(Error::contract(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let value = g.value(cov);
    let d = value.rows();
    let m = mean_diag(&value)?;
    let eye = g.constant(Tensor::eye(d));
    if m == 0.0 || epsilon == 0.0 {
        let shifted = g.constant(Tensor::eye(d).scale(epsilon));
        return g.add(cov, shifted);
    }
    let mean = g.scale(diagonal_sum(g, cov, d)?, 1.0 / d as f64);
    let shift = g.mul(g.scale(eye, epsilon), mean)?;
    g.add(cov, shift)
}

fn diagonal_sum(g: &Graph, a: Var, d: usize) -> Result<Var> {
    let index: Rc<[usize]> = (0..d).map(|i| i * d + i).collect();
    let diag = g.gather(a, index, &[d])?;
    Ok(g.sum(diag))
}

/// The pre-scaling divisor `τ` for a symmetric positive definite `cov`.
///
/// `τ = max(tr/B, ub/2.5)`, where `ub = m + s·√(B−1)` with `m = tr/B` and
/// `s² = ‖C‖²_F/B − m²` is an upper bound on the largest eigenvalue. When the
/// spectrum is already tight this reduces to `tr/B`.
pub fn newton_scale<T: Scalar>(cov: &Tensor<T>) -> Result<f64> {
    let (m, ub) = scale_terms(cov)?;
    Ok(m.max(ub / SPECTRUM_CEILING))
}

fn scale_terms<T: Scalar>(cov: &Tensor<T>) -> Result<(f64, f64)> {
    let b = cov.rows() as f64;
    let m = mean_diag(cov)?.to_f64().unwrap_or(f64::NAN);
    let fro2 = cov.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>();
    let s = (fro2 / b - m * m).max(0.0).sqrt();
    Ok((m, m + s * (b - 1.0).sqrt()))
}

/// Result of the coupled Newton iteration on one block.
#[derive(Debug, Clone)]
pub struct InverseSqrtResult<T: Scalar = f64> {
    pub d: Tensor<T>,
    pub iterations_used: usize,
    /// `‖D·Cov·D − I‖_F / √B`.
    pub residual: f64,
    /// `false` when the residual exceeds [`CONVERGENCE_THRESHOLD`].
    pub converged: bool,
    /// Pre-scaling divisor that was applied.
    pub tau: f64,
}

/// `‖D·Cov·D − I‖_F / √B`.
pub fn whitening_residual<T: Scalar>(d: &Tensor<T>, cov: &Tensor<T>) -> Result<f64> {
    let b = cov.rows();
    let r = d.matmul(cov)?.matmul(d)?.sub(&Tensor::eye(b))?;
    Ok(r.frobenius_norm().to_f64().unwrap_or(f64::NAN) / (b as f64).sqrt())
}

fn newton_iterate<T: Scalar>(
    cov: &Tensor<T>,
    iterations: usize,
    mut observe: impl FnMut(&Tensor<T>, f64) -> Result<()>,
) -> Result<(Tensor<T>, f64)> {
    if !cov.is_finite() {
        return Err(Error::Numeric("non-finite entries in covariance".into()));
    }
    let b = cov.rows();
    let tau = newton_scale(cov)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Numeric(format!("covariance has non-positive scale {tau}")));
    }
    let inv_tau = T::from_f64(1.0 / tau);
    let inv_sqrt_tau = T::from_f64(1.0 / tau.sqrt());
    let three = Tensor::<T>::eye(b).scale(T::from_f64(3.0));
    let half = T::from_f64(0.5);
    let mut x = Tensor::<T>::eye(b);
    let mut m = cov.scale(inv_tau);
    observe(&x.scale(inv_sqrt_tau), tau)?;
    for _ in 0..iterations {
        let t = three.sub(&m)?.scale(half);
        x = x.matmul(&t)?;
        m = t.matmul(&t)?.matmul(&m)?;
        observe(&x.scale(inv_sqrt_tau), tau)?;
    }
    Ok((x.scale(inv_sqrt_tau), tau))
}

/// Coupled inverse Newton iteration for `Cov^{-1/2}`.
///
/// A residual above 0.5 is reported through `converged = false` rather than an
/// error; non-finite input is a [`Error::Numeric`].
pub fn inverse_sqrt_newton<T: Scalar>(cov: &Tensor<T>, iterations: usize) -> Result<InverseSqrtResult<T>> {
    let (d, tau) = newton_iterate(cov, iterations, |_, _| Ok(()))?;
    let residual = whitening_residual(&d, cov)?;
    Ok(InverseSqrtResult {
        d,
        iterations_used: iterations,
        residual,
        converged: residual.is_finite() && residual <= CONVERGENCE_THRESHOLD,
        tau,
    })
}

/// Residual after 0, 1, …, `iterations` Newton steps.
pub fn newton_residual_history<T: Scalar>(cov: &Tensor<T>, iterations: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(iterations + 1);
    newton_iterate(cov, iterations, |d, _| {
        out.push(whitening_residual(d, cov)?);
        Ok(())
    })?;
    Ok(out)
}

/// The Newton iteration recorded on a graph, so gradients flow through `Cov`,
/// including the data-dependent pre-scaling.
pub fn inverse_sqrt_newton_graph(g: &Graph, cov: Var, iterations: usize) -> Result<Var> {
    let value = g.value(cov);
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite entries in covariance".into()));
    }
    let b = value.rows();
    let (m, ub) = scale_terms(&value)?;
    if !(m > 0.0) {
        return Err(Error::Numeric(format!("covariance has non-positive scale {m}")));
    }
    let bf = b as f64;
    let mean = g.scale(diagonal_sum(g, cov, b)?, 1.0 / bf);
    let tau = if m >= ub / SPECTRUM_CEILING {
        mean
    } else {
        let fro2 = g.sum(g.mul(cov, cov)?);
        let var = g.sub(g.scale(fro2, 1.0 / bf), g.mul(mean, mean)?)?;
        let s = g.pow(g.clamp_min(var, 0.0), 0.5);
        g.scale(g.add(mean, g.scale(s, (bf - 1.0).sqrt()))?, 1.0 / SPECTRUM_CEILING)
    };
    let three = g.constant(Tensor::eye(b).scale(3.0));
    let mut m = g.mul(cov, g.pow(tau, -1.0))?;
    let mut x: Option<Var> = None;
    for _ in 0..iterations {
        let t = g.scale(g.sub(three, m)?, 0.5);
        x = Some(match x {
            None => t,
            Some(x) => g.matmul(x, t)?,
        });
        m = g.matmul(g.matmul(t, t)?, m)?;
    }
    let x = match x {
        Some(x) => x,
        None => g.constant(Tensor::eye(b)),
    };
    g.mul(x, g.pow(tau, -0.5))
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues and a matrix whose columns are the eigenvectors. Stops
/// when the off-diagonal norm is at most `1e-12·‖A‖_F` or after 100 sweeps.
pub fn jacobi_eigh(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.rows();
    if a.rank() != 2 || a.cols() != n {
        return Err(Error::dim(format!("eigendecomposition needs a square matrix, got {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::Numeric("non-finite entries in eigendecomposition input".into()));
    }
    let mut m = a.symmetrize()?;
    let mut v = Tensor::eye(n);
    let tol = 1e-12 * m.frobenius_norm();
    let off = |m: &Tensor| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.at(i, j) * m.at(i, j);
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&m) > tol {
        if sweeps == 100 {
            return Err(Error::Numeric("Jacobi eigendecomposition did not converge in 100 sweeps".into()));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Ok(((0..n).map(|i| m.at(i, i)).collect(), v))
}

/// `V·Λ^p·Vᵗ` for a symmetric positive definite matrix.
pub fn spd_power(a: &Tensor, p: f64) -> Result<Tensor> {
    let (lambda, v) = jacobi_eigh(a)?;
    if let Some(bad) = lambda.iter().find(|&&l| !(l > 0.0)) {
        return Err(Error::contract(format!("matrix is not positive definite (eigenvalue {bad})")));
    }
    let n = lambda.len();
    let scaled = Tensor::from_fn(&[n, n], |k| v.data()[k] * lambda[k % n].powf(p));
    scaled.matmul(&v.transpose()?)?.symmetrize()
}

/// `Cov^{-1/2}` through the eigendecomposition.
pub fn inverse_sqrt_eigen(cov: &Tensor) -> Result<Tensor> {
    spd_power(cov, -0.5)
}

/// How columns are grouped into independently whitened blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockPolicy {
    /// 256 columns for fully-connected layers, `64·k²` for convolution and correlation.
    #[default]
    Default,
    /// At most this many columns per block.
    Fixed(usize),
    /// One block spanning every column.
    Full,
}

impl BlockPolicy {
    pub fn block_size(self, d: usize, kind: LayerKind, k: usize) -> usize {
        match self {
            BlockPolicy::Default => match kind {
                LayerKind::FullyConnected => 256,
                LayerKind::Convolution | LayerKind::Correlation => 64 * k * k,
            },
            BlockPolicy::Fixed(b) => b.max(1),
            BlockPolicy::Full => d.max(1),
        }
    }
}

/// Contiguous column ranges of at most `B` columns covering `0..d`; the last
/// range holds the remainder.
pub fn partition_columns(d: usize, kind: LayerKind, k: usize, policy: BlockPolicy) -> Vec<Range<usize>> {
    let b = policy.block_size(d, kind, k);
    (0..d).step_by(b).map(|start| start..(start + b).min(d)).collect()
}

/// The `range × range` sub-block of a square matrix.
pub fn diagonal_block<T: Scalar>(a: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
    a.slice_rows(range.clone())?.slice_cols(range)
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("NDPP_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

/// Newton inverse square roots of independent blocks, computed in parallel.
/// Results come back in block order, and each block is computed
/// deterministically, so the output does not depend on the thread count.
pub fn inverse_sqrt_blocks<T: Scalar>(blocks: &[Tensor<T>], iterations: usize) -> Result<Vec<InverseSqrtResult<T>>> {
    pool().install(|| blocks.par_iter().map(|b| inverse_sqrt_newton(b, iterations)).collect())
}
