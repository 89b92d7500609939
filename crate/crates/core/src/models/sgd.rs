use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over `total_steps`
    /// (0 lets the training loop fill in the length of the run).
    Cosine { total_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    /// Heavy-ball coefficient; 0 disables momentum.
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0, schedule: Schedule::Constant }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine { total_steps } => {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// One update of a single parameter: weight decay is added to the gradient,
/// then the momentum buffer is updated, then `w' = w − η·buffer`.
pub fn gd_step(w: &Tensor, grad: &Tensor, lr: f64, cfg: &SgdConfig, buffer: &mut Option<Tensor>) -> Result<Tensor> {
    let mut g = grad.clone();
    if cfg.weight_decay != 0.0 {
        g = g.add(&w.scale(cfg.weight_decay))?;
    }
    let step = if cfg.momentum != 0.0 {
        let b = match buffer.take() {
            Some(b) => b.scale(cfg.momentum).add(&g)?,
            None => g,
        };
        *buffer = Some(b.clone());
        b
    } else {
        g
    };
    w.sub(&step.scale(lr))
}

/// Stochastic gradient descent over a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    buffers: Vec<Option<Tensor>>,
    step: usize,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd { config, buffers: Vec::new(), step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        self.buffers.resize(params.len(), None);
        let lr = self.config.lr_at(self.step);
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            **p = gd_step(p, g, lr, &self.config, buf)?;
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::toy::{closed_form_solution, ToyProblem};

    fn whitened_problem() -> ToyProblem {
        let x = Tensor::from_rows(&[
            vec![1.0, 1.0, 1.0],
            vec![1.0, -1.0, 1.0],
            vec![-1.0, 1.0, 1.0],
            vec![-1.0, -1.0, 1.0],
        ]);
        // Columns are orthogonal with squared norm N, so (1/N)XᵗX = I.
        ToyProblem::new(x, Tensor::from_rows(&[vec![3.0], vec![-1.0], vec![0.5], vec![2.0]]), false).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let w = Tensor::from_rows(&[vec![1.0], vec![2.0]]);
        let cfg = SgdConfig { lr: 1.0, ..Default::default() };
        assert_eq!(gd_step(&w, &Tensor::zeros(&[2, 1]), 1.0, &cfg, &mut None).unwrap(), w);
    }

    #[test]
    fn unit_step_is_optimal_on_whitened_problem() {
        let p = whitened_problem();
        let cfg = SgdConfig { lr: 1.0, ..Default::default() };
        let w0 = Tensor::zeros(&[3, 1]);
        let w1 = gd_step(&w0, &p.gradient(&w0).unwrap(), 1.0, &cfg, &mut None).unwrap();
        let best = p.loss(&closed_form_solution(&p).unwrap()).unwrap();
        assert!((p.loss(&w1).unwrap() - best).abs() <= 1e-10);
        let half = gd_step(&w0, &p.gradient(&w0).unwrap(), 0.5, &cfg, &mut None).unwrap();
        assert!(p.loss(&half).unwrap() > p.loss(&w1).unwrap());
    }

    #[test]
    fn momentum_and_decay() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.5, schedule: Schedule::Constant };
        let w = Tensor::from_rows(&[vec![2.0]]);
        let g = Tensor::from_rows(&[vec![1.0]]);
        let mut buf = None;
        let w1 = gd_step(&w, &g, 0.1, &cfg, &mut buf).unwrap();
        // g + 0.5·w = 2, buffer 2.
        assert!((w1.item().unwrap() - 1.8).abs() < 1e-15);
        let w2 = gd_step(&w1, &g, 0.1, &cfg, &mut buf).unwrap();
        // g + 0.5·1.8 = 1.9, buffer 0.9·2 + 1.9 = 3.7.
        assert!((w2.item().unwrap() - (1.8 - 0.37)).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_ends_at_zero() {
        let cfg = SgdConfig { lr: 1.0, schedule: Schedule::Cosine { total_steps: 10 }, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert!((cfg.lr_at(5) - 0.5).abs() < 1e-15);
        assert!(cfg.lr_at(10).abs() < 1e-15);
        assert!(SgdConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
