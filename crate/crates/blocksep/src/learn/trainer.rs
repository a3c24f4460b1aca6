//! The optimisation loop: deterministic minibatching, Adam updates,
//! structured logging and periodic checkpoints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::masknet::{save_params, ModelParams};

use super::optim::Adam;
use super::{batch_grads, TrainConfig, TrainSample};

/// Source of training samples. Implementations must be cheap to call
/// repeatedly; samples are fetched per batch.
pub trait TrainDataset: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sample(&self, idx: usize) -> Result<TrainSample>;
}

/// Dataset held fully in memory (tests and small corpora).
pub struct InMemoryDataset {
    pub samples: Vec<TrainSample>,
}

impl TrainDataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn sample(&self, idx: usize) -> Result<TrainSample> {
        Ok(self.samples[idx].clone())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub resmask: f64,
    pub ce: f64,
    pub triplet: f64,
    pub grad_norm: f64,
}

/// Runs minibatch gradient descent for `cfg.steps` steps. Deterministic for
/// a fixed config and seed. Writes a checkpoint every `checkpoint_every`
/// steps when `checkpoint_dir` is given, plus a final one.
pub fn train(
    mut params: ModelParams,
    dataset: &dyn TrainDataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParams, Vec<TrainLogRecord>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut adam = Adam::new(cfg.learning_rate, params.n_params());
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut indices = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let samples: Vec<TrainSample> = indices
            .par_iter()
            .map(|&i| dataset.sample(i))
            .collect::<Result<_>>()?;
        for s in &samples {
            if s.n_blocks() != cfg.n_unroll_blocks {
                return Err(Error::InvalidConfig(format!(
                    "sample has {} blocks, config unrolls {}",
                    s.n_blocks(),
                    cfg.n_unroll_blocks
                )));
            }
        }

        let (eval, grads) = batch_grads(&params, &samples, cfg, None)?;
        if !eval.loss.total.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at step {step}: {:?}",
                eval.loss
            )));
        }
        let grad_norm = adam.step(&mut params, &grads, cfg.grad_clip);

        log.push(TrainLogRecord {
            step,
            total: eval.loss.total,
            mse: eval.loss.mse,
            resmask: eval.loss.resmask,
            ce: eval.loss.ce,
            triplet: eval.loss.triplet,
            grad_norm,
        });

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_params(&params, &dir.join(format!("step{:06}.ckpt", step + 1)))?;
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        save_params(&params, &dir.join("final.ckpt"))?;
    }
    Ok((params, log))
}

/// Writes the training log as one JSON record per line.
pub fn write_log(path: &Path, log: &[TrainLogRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut f, rec)?;
        writeln!(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::Variant;
    use crate::masknet::{init_params, NetConfig};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(variant: Variant, n_speakers: usize) -> NetConfig {
        let mut cfg = NetConfig {
            n_bins: 7,
            hidden: 4,
            trunk_dim: 6,
            emb_hidden1: 4,
            emb_hidden2: 4,
            emb_dim: 5,
            use_gate: true,
            normalize_embedding: false,
            n_speakers: None,
        };
        variant.configure(&mut cfg, n_speakers);
        cfg
    }

    fn toy_dataset(n: usize, t: usize, f: usize, blocks: usize) -> InMemoryDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let samples = (0..n)
            .map(|_| {
                let mags: Vec<Array2<f64>> = (0..blocks)
                    .map(|_| Array2::from_shape_fn((t, f), |_| rng.gen_range(0.2..1.0)))
                    .collect();
                // Two sources split the spectrum, active everywhere.
                let targets = mags
                    .iter()
                    .map(|m| {
                        let low = Array2::from_shape_fn((t, f), |(i, j)| {
                            if j < f / 2 {
                                m[[i, j]]
                            } else {
                                0.0
                            }
                        });
                        let high = m - &low;
                        vec![low, high]
                    })
                    .collect();
                TrainSample {
                    mags,
                    targets,
                    active: vec![vec![true, true]; blocks],
                    speaker_ids: vec![0, 1],
                }
            })
            .collect();
        InMemoryDataset { samples }
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            n_unroll_blocks: 2,
            variant: Variant::Gate,
            ..TrainConfig::default()
        };
        let ds = toy_dataset(4, 5, 7, 2);
        let p0 = init_params(&tiny_cfg(Variant::Gate, 2), 9).unwrap();
        let (p1, log1) = train(p0.clone(), &ds, &cfg, None).unwrap();
        let (p2, log2) = train(p0, &ds, &cfg, None).unwrap();
        assert_eq!(p1, p2);
        let t1: Vec<f64> = log1.iter().map(|r| r.total).collect();
        let t2: Vec<f64> = log2.iter().map(|r| r.total).collect();
        assert_eq!(t1, t2);
    }

    #[test]
    fn overfits_a_single_sample() {
        // MSE on one sample must drop by at least 10x within a few hundred
        // steps of full-batch descent.
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 1,
            n_unroll_blocks: 2,
            learning_rate: 3e-3,
            alpha: 1e-4,
            variant: Variant::Gate,
            ..TrainConfig::default()
        };
        let ds = toy_dataset(1, 6, 7, 2);
        let p0 = init_params(&tiny_cfg(Variant::Gate, 2), 4).unwrap();
        let (_, log) = train(p0, &ds, &cfg, None).unwrap();
        let first = log.first().unwrap().mse;
        let last = log.last().unwrap().mse;
        assert!(
            last * 10.0 <= first,
            "mse did not drop 10x: {first} -> {last}"
        );
    }
}
