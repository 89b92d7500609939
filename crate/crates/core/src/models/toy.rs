//! The linear least-squares problem `½‖Xw − ŷ‖²/N` and its closed forms.

use crate::error::{Error, Result};
use crate::matfun::{covariance, inverse_sqrt_eigen, spd_power, BlockPolicy};
use crate::ndpp::{InverseSqrtMethod, NdppLayer, NdppLayerConfig, ScaleMode};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    /// `N×d` features.
    pub x: Tensor,
    /// `N×1` targets.
    pub y: Tensor,
    pub with_bias: bool,
}

impl ToyProblem {
    pub fn new(x: Tensor, y: Tensor, with_bias: bool) -> Result<Self> {
        if x.rank() != 2 || x.rows() == 0 {
            return Err(Error::dim(format!("features must be a non-empty matrix, got {:?}", x.shape())));
        }
        let y = y.reshape(&[y.len(), 1])?;
        if y.rows() != x.rows() {
            return Err(Error::dim(format!("{} targets for {} rows", y.rows(), x.rows())));
        }
        Ok(ToyProblem { x, y, with_bias })
    }

    /// `X` or `(X|1)`.
    pub fn design(&self) -> Result<Tensor> {
        if self.with_bias {
            Tensor::hcat(&[&self.x, &Tensor::ones(&[self.x.rows(), 1])])
        } else {
            Ok(self.x.clone())
        }
    }

    fn n(&self) -> f64 {
        self.x.rows() as f64
    }

    pub fn loss(&self, w: &Tensor) -> Result<f64> {
        let r = self.design()?.matmul(w)?.sub(&self.y)?;
        Ok(0.5 * r.map(|v| v * v).sum() / self.n())
    }

    /// `Xᵗ(Xw − ŷ)/N`.
    pub fn gradient(&self, w: &Tensor) -> Result<Tensor> {
        let x = self.design()?;
        Ok(x.transpose()?.matmul(&x.matmul(w)?.sub(&self.y)?)?.scale(1.0 / self.n()))
    }
}

/// `(A)⁻¹` for SPD `A` via the eigendecomposition; rejects numerically singular input.
fn spd_inverse(a: &Tensor) -> Result<Tensor> {
    let (lambda, _) = crate::matfun::jacobi_eigh(a)?;
    let max = lambda.iter().copied().fold(0.0, f64::max);
    if lambda.iter().any(|&l| l <= 1e-12 * max) || max <= 0.0 {
        return Err(Error::contract("XᵗX is singular"));
    }
    spd_power(a, -1.0)
}

/// `(XᵗX)⁻¹Xᵗŷ`.
pub fn closed_form_solution(p: &ToyProblem) -> Result<Tensor> {
    let x = p.design()?;
    let xt = x.transpose()?;
    spd_inverse(&xt.matmul(&x)?)?.matmul(&xt.matmul(&p.y)?)
}

/// One Newton step `w = −H⁻¹·∇Loss(0)` with `H = XᵗX/N`.
pub fn newton_step_solution(p: &ToyProblem) -> Result<Tensor> {
    let x = p.design()?;
    let h = x.transpose()?.matmul(&x)?.scale(1.0 / p.n());
    let g0 = p.gradient(&Tensor::zeros(&[x.cols(), 1]))?;
    Ok(spd_inverse(&h)?.matmul(&g0)?.scale(-1.0))
}

/// `Cov^{-1/2}` of the design matrix by the eigendecomposition, unregularized.
pub fn whitening(p: &ToyProblem) -> Result<Tensor> {
    inverse_sqrt_eigen(&covariance(&p.design()?)?)
}

/// Whiten the features with `D`, take one `η = 1` gradient step from zero, and
/// map the weights back through `D`.
pub fn whitened_one_step(p: &ToyProblem) -> Result<Tensor> {
    let d = whitening(p)?;
    let xw = p.design()?.matmul(&d)?;
    let whitened = ToyProblem { x: xw, y: p.y.clone(), with_bias: false };
    let v = whitened.gradient(&Tensor::zeros(&[d.rows(), 1]))?.scale(-1.0);
    d.matmul(&v)
}

/// Columns shifted to zero mean and scaled to unit variance (constant columns left centered).
pub fn standardize_columns(x: &Tensor) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| x.at(i, j)).collect();
        let mu = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for (i, v) in col.iter().enumerate() {
            out.set(i, j, (v - mu) / sd);
        }
    }
    Ok(out)
}

/// Predictions after one `η = 1` step from zero on column-standardized features.
pub fn standardized_one_step_predictions(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let xs = standardize_columns(x)?;
    let p = ToyProblem::new(xs.clone(), y.clone(), false)?;
    let w = p.gradient(&Tensor::zeros(&[xs.cols(), 1]))?.scale(-1.0);
    xs.matmul(&w)
}

/// Predictions after one full-batch `η = 1` step from zero through a
/// fully-connected deconvolution layer (eigen correction, one block, `ε = 0`,
/// no scaling, no bias).
pub fn ndpp_one_step_predictions(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut config = NdppLayerConfig::fully_connected(x.cols(), 1);
    config.with_bias = false;
    config.epsilon = 0.0;
    config.block_size = BlockPolicy::Full;
    config.scale_mode = ScaleMode::None;
    config.isqrt_method = InverseSqrtMethod::Eigen;
    let mut layer = NdppLayer::with_weights(config, Tensor::zeros(&[x.cols(), 1]), None)?;
    let y = y.reshape(&[y.len(), 1])?;

    let g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.leaf(layer.weight.clone());
    let pred = layer.forward_graph(&g, xv, w, None)?;
    let r = g.sub(pred, g.constant(y.clone()))?;
    let loss = g.scale(g.sum(g.mul(r, r)?), 0.5 / x.rows() as f64);
    let grad = g.backprop(loss)?.get(w);
    layer.weight = layer.weight.sub(&grad)?;
    layer.forward(x)
}

/// Witness instance where plain standardization is not basis-invariant.
///
/// `A = I + U`, with `U` uniform on `[−1, 1]` rounded to one decimal, was drawn
/// repeatedly until the one-step prediction gap on `X` vs `X·A`
/// exceeded 1e-3, then frozen.
pub mod witness {
    use crate::tensor::Tensor;

    pub fn features() -> Tensor {
        Tensor::from_rows(&[
            vec![0.9, 1.2, -0.3],
            vec![-1.1, -0.8, 0.5],
            vec![0.4, 0.7, 1.1],
            vec![1.6, 1.9, -0.2],
            vec![-0.7, -1.3, -0.9],
            vec![0.2, 0.1, 0.6],
        ])
    }

    pub fn targets() -> Tensor {
        Tensor::from_rows(&[vec![1.0], vec![-1.0], vec![0.5], vec![2.0], vec![-1.5], vec![0.3]])
    }

    pub fn basis_change() -> Tensor {
        Tensor::from_rows(&[vec![1.3, 0.8, 0.6], vec![-0.5, 0.6, 0.7], vec![-1.0, 0.6, 1.6]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn closed_form_examples() {
        let p = ToyProblem::new(Tensor::eye(3), Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]), false).unwrap();
        assert!(closed_form_solution(&p).unwrap().max_abs_diff(&p.y).unwrap() < 1e-14);
        let p = ToyProblem::new(Tensor::from_rows(&[vec![1.0], vec![2.0]]), Tensor::from_rows(&[vec![2.0], vec![4.0]]), false)
            .unwrap();
        assert!((closed_form_solution(&p).unwrap().item().unwrap() - 2.0).abs() < 1e-14);
        let p = ToyProblem::new(random(&[32, 4], 1), random(&[32, 1], 2), false).unwrap();
        let w = closed_form_solution(&p).unwrap();
        assert!(p.gradient(&w).unwrap().frobenius_norm() <= 1e-8);
        let singular = ToyProblem::new(Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]), Tensor::ones(&[2, 1]), false).unwrap();
        assert!(matches!(closed_form_solution(&singular), Err(Error::Contract(_))));
        assert!(matches!(newton_step_solution(&singular), Err(Error::Contract(_))));
    }

    #[test]
    fn newton_step_examples() {
        let p = ToyProblem::new(Tensor::eye(2), Tensor::from_rows(&[vec![5.0], vec![7.0]]), false).unwrap();
        // X = I₂ has XᵗX = I, not N·I, so the Newton step still solves the problem exactly.
        assert!(newton_step_solution(&p).unwrap().max_abs_diff(&p.y).unwrap() < 1e-14);
        let h = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]]);
        let p = ToyProblem::new(h.clone(), random(&[4, 1], 3), false).unwrap();
        let expected = h.transpose().unwrap().matmul(&p.y).unwrap().scale(0.25);
        assert!(newton_step_solution(&p).unwrap().max_abs_diff(&expected).unwrap() < 1e-14);
        let p = ToyProblem::new(random(&[64, 8], 4), random(&[64, 1], 5), true).unwrap();
        let a = newton_step_solution(&p).unwrap();
        let b = closed_form_solution(&p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-8);
    }

    #[test]
    fn forward_and_backward_corrections_agree() {
        let mix = random(&[6, 6], 6);
        let p = ToyProblem::new(random(&[80, 6], 7).matmul(&mix).unwrap(), random(&[80, 1], 8), false).unwrap();
        let a = newton_step_solution(&p).unwrap();
        let b = whitened_one_step(&p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-8);
    }

    #[test]
    fn witness_breaks_plain_standardization() {
        let x = witness::features();
        let y = witness::targets();
        let xa = x.matmul(&witness::basis_change()).unwrap();
        let p = standardized_one_step_predictions(&x, &y).unwrap();
        let q = standardized_one_step_predictions(&xa, &y).unwrap();
        assert!(p.max_abs_diff(&q).unwrap() > 1e-3);
        let p = ndpp_one_step_predictions(&x, &y).unwrap();
        let q = ndpp_one_step_predictions(&xa, &y).unwrap();
        assert!(p.rel_frobenius_diff(&q).unwrap() <= 1e-6);
    }
}
