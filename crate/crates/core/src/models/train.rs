//! Mini-batch training with softmax cross-entropy.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DivergenceReport, Error, Result};
use crate::models::data::{take_rows, Dataset};
use crate::models::net::Model;
use crate::models::sgd::{Sgd, SgdConfig};
use crate::ndpp::Mode;
use crate::tensor::{Graph, Tensor, Var};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

pub const CSV_HEADER: &str = "step,epoch,train_loss,train_acc,eval_acc,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Simulated workers sharing covariance statistics.
    pub workers: usize,
    /// A CSV row (with an evaluation pass) every this many steps, plus the last step.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 64, sgd: SgdConfig::default(), seed: 0, workers: 1, log_every: 10 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 || self.log_every == 0 || self.workers == 0 {
            return Err(Error::Config("batch size, logging interval and workers must be at least 1".into()));
        }
        if self.workers > self.batch_size {
            return Err(Error::Config(format!("{} workers for batches of {}", self.workers, self.batch_size)));
        }
        Ok(())
    }

    /// Steps per epoch; a final partial batch is dropped.
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples / self.batch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    /// Mean batch loss since the previous row.
    pub train_loss: f64,
    /// Mean batch accuracy since the previous row.
    pub train_acc: f64,
    pub eval_acc: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Loss of every step's batch, before the update.
    pub batch_losses: Vec<f64>,
    /// Accuracy of every step's batch, before the update.
    pub batch_accuracies: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{:.3}", r.step, r.epoch, r.train_loss, r.train_acc, r.eval_acc, r.wall_ms)?;
        }
        Ok(())
    }

    /// First 1-based step at which the mean accuracy of the last `window`
    /// batches reaches `threshold`.
    pub fn steps_to_accuracy(&self, threshold: f64, window: usize) -> Option<usize> {
        let w = window.max(1);
        (w..=self.batch_accuracies.len())
            .find(|&end| self.batch_accuracies[end - w..end].iter().sum::<f64>() / w as f64 >= threshold)
    }

    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.eval_acc)
    }
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = logits.cols();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Evaluation-mode accuracy of `model` on `x`, in chunks.
pub fn evaluate(model: &mut Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    const CHUNK: usize = 256;
    let mut hits = 0.0;
    for start in (0..labels.len()).step_by(CHUNK) {
        let rows: Vec<usize> = (start..(start + CHUNK).min(labels.len())).collect();
        let logits = model.predict(&take_rows(x, &rows)?)?;
        hits += accuracy(&logits, &labels[start..start + rows.len()]) * rows.len() as f64;
    }
    Ok(hits / labels.len() as f64)
}

struct StepOutcome {
    loss: f64,
    accuracy: f64,
    /// `None` when the loss diverged.
    grads: Option<Vec<Tensor>>,
}

fn step(model: &mut Model, x: &Tensor, labels: &[usize]) -> Result<StepOutcome> {
    let g = Graph::new();
    let params: Vec<Var> = model.params().into_iter().map(|p| g.leaf(p.clone())).collect();
    let xv = g.constant(x.clone());
    let logits = model.forward_graph(&g, xv, &params)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let value = g.value(loss).item()?;
    let accuracy = accuracy(&g.value(logits), labels);
    if !value.is_finite() || value > DIVERGENCE_THRESHOLD {
        return Ok(StepOutcome { loss: value, accuracy, grads: None });
    }
    let mut grads = g.backprop(loss)?;
    let grads = params.iter().map(|&p| grads.take(p)).collect();
    Ok(StepOutcome { loss: value, accuracy, grads: Some(grads) })
}

/// Trains in place. The deconvolution statistics are refit on every batch
/// inside the forward pass, with second moments pooled over `cfg.workers`
/// shards. Aborts with [`Error::Diverged`] once a batch loss is non-finite or
/// above [`DIVERGENCE_THRESHOLD`].
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let per_epoch = cfg.steps_per_epoch(data.train_len());
    if per_epoch == 0 {
        return Err(Error::Config(format!("batch size {} exceeds {} training samples", cfg.batch_size, data.train_len())));
    }
    for layer in model.ndpp_layers_mut() {
        layer.config.workers = cfg.workers;
    }
    let mut sgd_cfg = cfg.sgd;
    if let crate::models::sgd::Schedule::Cosine { total_steps } = &mut sgd_cfg.schedule {
        if *total_steps == 0 {
            *total_steps = per_epoch * cfg.epochs;
        }
    }
    let mut opt = Sgd::new(sgd_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let total = per_epoch * cfg.epochs;
    let mut last_finite = None;
    let (mut loss_acc, mut acc_acc, mut since) = (0.0, 0.0, 0usize);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train_len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(cfg.batch_size) {
            let step_no = log.batch_losses.len() + 1;
            model.set_mode(Mode::Training);
            let x = take_rows(&data.x_train, batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.y_train[i]).collect();
            let outcome = match step(model, &x, &labels) {
                Ok(o) => o,
                // Statistics of blown-up activations surface as numeric errors.
                Err(Error::Numeric(_)) => StepOutcome { loss: f64::NAN, accuracy: 0.0, grads: None },
                Err(e) => return Err(e),
            };
            let Some(grads) = outcome.grads else {
                return Err(Error::Diverged(DivergenceReport {
                    step: step_no,
                    loss: outcome.loss,
                    last_finite_loss: last_finite,
                }));
            };
            last_finite = Some(outcome.loss);
            log.batch_losses.push(outcome.loss);
            log.batch_accuracies.push(outcome.accuracy);
            let mut params = model.params_mut();
            opt.step(&mut params, &grads)?;

            loss_acc += outcome.loss;
            acc_acc += outcome.accuracy;
            since += 1;
            if step_no % cfg.log_every == 0 || step_no == total {
                let eval_acc = evaluate(model, &data.x_eval, &data.y_eval)?;
                log.rows.push(LogRow {
                    step: step_no,
                    epoch,
                    train_loss: loss_acc / since as f64,
                    train_acc: acc_acc / since as f64,
                    eval_acc,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                });
                (loss_acc, acc_acc, since) = (0.0, 0.0, 0);
            }
        }
    }
    model.set_mode(Mode::Training);
    Ok(log)
}
