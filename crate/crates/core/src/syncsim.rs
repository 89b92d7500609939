//! In-process simulation of covariance synchronization across workers.
//!
//! Each worker reduces its shard to second moments `XᵗX` per block plus a row
//! count; the moments are summed in ascending worker order and only then
//! normalized and regularized.

use std::ops::Range;
use std::sync::mpsc;

use crate::error::{Error, Result};
use crate::matfun::{gram, regularize};
use crate::ndpp::{covariance_data_matrix, NdppLayerConfig};
use crate::tensor::Tensor;

/// Contiguous near-equal ranges of `0..n`; the first `n mod k` ranges get one extra row.
pub fn shard_ranges(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 {
        return Err(Error::contract("at least one worker is required"));
    }
    if k > n {
        return Err(Error::contract(format!("{k} workers for a batch of {n}")));
    }
    let (base, extra) = (n / k, n % k);
    let mut at = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            at += len;
            at - len..at
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerShard {
    pub worker_id: usize,
    pub batch: Tensor,
}

/// Splits the leading axis of `x` across `k` workers.
pub fn shard_batch(x: &Tensor, k: usize) -> Result<Vec<WorkerShard>> {
    if x.rank() == 0 {
        return Err(Error::dim("cannot shard a scalar"));
    }
    shard_ranges(x.rows(), k)?
        .into_iter()
        .enumerate()
        .map(|(worker_id, r)| Ok(WorkerShard { worker_id, batch: x.slice_leading(r)? }))
        .collect()
}

/// One worker's contribution: per-block `XᵗX` and the number of data-matrix rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMoments {
    pub worker_id: usize,
    pub grams: Vec<Tensor>,
    pub rows: usize,
}

/// Second moments of a shard, computed on the same data-matrix path as a
/// single-worker fit (standardization, subsampling, bias column).
pub fn local_moments(shard: &WorkerShard, config: &NdppLayerConfig) -> Result<LocalMoments> {
    if shard.batch.is_empty() {
        return Err(Error::contract("empty shard"));
    }
    let x = covariance_data_matrix(config, &shard.batch)?;
    let grams = config
        .blocks()
        .into_iter()
        .map(|r| gram(&x.slice_cols(r)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalMoments { worker_id: shard.worker_id, grams, rows: x.rows() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedMoments {
    pub grams: Vec<Tensor>,
    pub total_rows: usize,
}

impl AggregatedMoments {
    /// `ΣXᵗX / ΣN` per block, symmetrized, then regularized.
    pub fn covariance_blocks(&self, epsilon: f64) -> Result<Vec<Tensor>> {
        let n = self.total_rows as f64;
        self.grams
            .iter()
            .map(|g| regularize(&g.scale(1.0 / n).symmetrize()?, epsilon))
            .collect()
    }
}

/// Sums moments in ascending `worker_id` order, whatever order they arrive in.
pub fn allreduce_moments(mut parts: Vec<LocalMoments>) -> Result<AggregatedMoments> {
    parts.sort_by_key(|p| p.worker_id);
    let first = parts.first().ok_or_else(|| Error::contract("no worker moments to aggregate"))?;
    let shapes: Vec<&[usize]> = first.grams.iter().map(|g| g.shape()).collect();
    for p in &parts {
        let ok = p.grams.len() == shapes.len() && p.grams.iter().zip(&shapes).all(|(g, s)| g.shape() == *s);
        if !ok {
            return Err(Error::contract(format!("worker {} reports mismatched block shapes", p.worker_id)));
        }
    }
    let mut grams = first.grams.clone();
    for p in &parts[1..] {
        for (acc, g) in grams.iter_mut().zip(&p.grams) {
            *acc = acc.add(g)?;
        }
    }
    let total_rows = parts.iter().map(|p| p.rows).sum();
    if total_rows == 0 {
        return Err(Error::contract("aggregated row count is zero"));
    }
    Ok(AggregatedMoments { grams, total_rows })
}

/// Runs one thread per shard, collects moments over a channel in completion
/// order and aggregates them.
pub fn synchronized_moments(x: &Tensor, config: &NdppLayerConfig, k: usize) -> Result<AggregatedMoments> {
    let shards = shard_batch(x, k)?;
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for shard in &shards {
            let tx = tx.clone();
            scope.spawn(move || {
                let _ = tx.send(local_moments(shard, config));
            });
        }
    });
    drop(tx);
    let parts = rx.into_iter().collect::<Result<Vec<_>>>()?;
    allreduce_moments(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matfun::{covariance, BlockPolicy};
    use crate::ndpp::ScaleMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn plain_fc(d: usize) -> NdppLayerConfig {
        let mut c = NdppLayerConfig::fully_connected(d, 1);
        c.with_bias = false;
        c.block_size = BlockPolicy::Full;
        c
    }

    #[test]
    fn shard_sizes() {
        let sizes = |n, k| shard_ranges(n, k).unwrap().iter().map(|r| r.len()).collect::<Vec<_>>();
        assert_eq!(sizes(8, 2), vec![4, 4]);
        assert_eq!(sizes(7, 2), vec![4, 3]);
        assert_eq!(sizes(10, 4), vec![3, 3, 2, 2]);
        let x = random(&[5, 2], 1);
        assert_eq!(shard_batch(&x, 1).unwrap()[0].batch, x);
        assert!(matches!(shard_batch(&x, 6), Err(Error::Contract(_))));
    }

    #[test]
    fn single_shard_moments_are_scaled_covariance() {
        let x = random(&[12, 4], 2);
        let m = local_moments(&shard_batch(&x, 1).unwrap()[0], &plain_fc(4)).unwrap();
        assert_eq!(m.rows, 12);
        let expected = covariance(&x).unwrap().scale(12.0);
        assert!(m.grams[0].max_abs_diff(&expected).unwrap() < 1e-14);
        let zero = WorkerShard { worker_id: 0, batch: Tensor::zeros(&[3, 4]) };
        let m = local_moments(&zero, &plain_fc(4)).unwrap();
        assert!(m.grams[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn moments_match_two_loop_oracle() {
        let x = random(&[9, 3], 3);
        let m = local_moments(&WorkerShard { worker_id: 0, batch: x.clone() }, &plain_fc(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..9).map(|r| x.at(r, i) * x.at(r, j)).sum();
                assert!((m.grams[0].at(i, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_shards_give_the_shard_covariance() {
        let x = random(&[6, 3], 4);
        let c = plain_fc(3);
        let a = local_moments(&WorkerShard { worker_id: 0, batch: x.clone() }, &c).unwrap();
        let b = local_moments(&WorkerShard { worker_id: 1, batch: x.clone() }, &c).unwrap();
        let agg = allreduce_moments(vec![a.clone(), b]).unwrap();
        let single = allreduce_moments(vec![a]).unwrap();
        assert_eq!(agg.covariance_blocks(0.0).unwrap(), single.covariance_blocks(0.0).unwrap());
    }

    #[test]
    fn aggregation_matches_concatenated_batch() {
        let mut c = NdppLayerConfig::convolution(2, 1, 3);
        c.padding = 1;
        c.scale_mode = ScaleMode::MuSigma;
        c.block_size = BlockPolicy::Fixed(5);
        let x = random(&[16, 2, 5, 5], 5);
        let reference = synchronized_moments(&x, &c, 1).unwrap().covariance_blocks(1e-5).unwrap();
        for k in [2, 4, 8] {
            let agg = synchronized_moments(&x, &c, k).unwrap().covariance_blocks(1e-5).unwrap();
            for (a, b) in agg.iter().zip(&reference) {
                assert!(a.max_abs_diff(b).unwrap() <= 1e-12, "k={k}");
            }
        }
    }

    #[test]
    fn aggregation_ignores_arrival_order() {
        let x = random(&[10, 3], 6);
        let c = plain_fc(3);
        let parts: Vec<_> = shard_batch(&x, 5).unwrap().iter().map(|s| local_moments(s, &c).unwrap()).collect();
        let mut reversed = parts.clone();
        reversed.reverse();
        assert_eq!(allreduce_moments(parts).unwrap(), allreduce_moments(reversed).unwrap());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = LocalMoments { worker_id: 0, grams: vec![Tensor::eye(2)], rows: 2 };
        let b = LocalMoments { worker_id: 1, grams: vec![Tensor::eye(3)], rows: 2 };
        assert!(matches!(allreduce_moments(vec![a, b]), Err(Error::Contract(_))));
    }

    #[test]
    fn two_sample_workers_give_spd_covariance() {
        let mut c = plain_fc(6);
        c.epsilon = 1e-5;
        let x = random(&[8, 6], 7);
        let covs = synchronized_moments(&x, &c, 4).unwrap().covariance_blocks(c.epsilon).unwrap();
        let (lambda, _) = crate::matfun::jacobi_eigh(&covs[0]).unwrap();
        assert!(lambda.iter().all(|&l| l > 0.0));
    }
}
