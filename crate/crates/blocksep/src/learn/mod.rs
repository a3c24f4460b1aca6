//! Multi-task training: unrolled forward over blocks × iterations, the four
//! losses, block-wise permutation alignment, analytic gradients and the
//! optimisation loop.

mod data;
mod losses;
mod optim;
mod trainer;
mod unroll;

pub use data::{build_train_sample, TargetMode};
pub use losses::{
    ce_loss, mse_loss, mse_loss_grad, resmask_loss, resmask_loss_grad, select_permutation,
    triplet_loss, Permutation,
};
pub use optim::{Adam, AdamState};
pub use trainer::{train, write_log, InMemoryDataset, TrainDataset, TrainLogRecord};
pub use unroll::{unroll_backward, unroll_forward, Unrolled, UnrolledBlock, UnrolledIter};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masknet::{ModelParams, NetConfig};

/// The four model variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Model 1: no gate, reconstruction + residual-mask losses only.
    NoGate,
    /// Model 2: gate, no speaker loss.
    Gate,
    /// Model 3: gate + softmax cross-entropy speaker loss.
    GateCe,
    /// Model 4: gate + cosine triplet speaker loss.
    GateTriplet,
}

impl Variant {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Variant::NoGate),
            2 => Ok(Variant::Gate),
            3 => Ok(Variant::GateCe),
            4 => Ok(Variant::GateTriplet),
            _ => Err(Error::InvalidConfig(format!("unknown variant {n}"))),
        }
    }

    pub fn number(&self) -> u8 {
        match self {
            Variant::NoGate => 1,
            Variant::Gate => 2,
            Variant::GateCe => 3,
            Variant::GateTriplet => 4,
        }
    }

    pub fn use_gate(&self) -> bool {
        !matches!(self, Variant::NoGate)
    }

    /// Length normalisation applies to the cosine-loss variant only.
    pub fn normalize_embedding(&self) -> bool {
        matches!(self, Variant::GateTriplet)
    }

    pub fn needs_classifier(&self) -> bool {
        matches!(self, Variant::GateCe)
    }

    /// Applies the variant's switches to a network config.
    pub fn configure(&self, cfg: &mut NetConfig, n_train_speakers: usize) {
        cfg.use_gate = self.use_gate();
        cfg.normalize_embedding = self.normalize_embedding();
        cfg.n_speakers = if self.needs_classifier() {
            Some(n_train_speakers)
        } else {
            None
        };
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Residual-mask loss weight.
    pub alpha: f64,
    /// Cross-entropy loss weight (active for the CE variant).
    pub beta: f64,
    /// Triplet loss weight (active for the triplet variant).
    pub gamma: f64,
    /// Triplet margin.
    pub delta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Expected number of blocks per training sample.
    pub n_unroll_blocks: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Total optimisation steps.
    pub steps: usize,
    pub grad_clip: f64,
    pub max_triplets: usize,
    pub checkpoint_every: usize,
    pub target_mode: TargetMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta: 0.01,
            gamma: 0.1,
            delta: 0.2,
            learning_rate: 1e-3,
            batch_size: 8,
            n_unroll_blocks: 4,
            seed: 0,
            variant: Variant::Gate,
            steps: 1000,
            grad_clip: 5.0,
            max_triplets: 64,
            checkpoint_every: 500,
            target_mode: TargetMode::MaskedMixture,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.delta <= 0.0 {
            return Err(Error::InvalidConfig("triplet margin must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// β as actually applied: only the CE variant trains the classifier.
    pub fn effective_beta(&self) -> f64 {
        if self.variant == Variant::GateCe {
            self.beta
        } else {
            0.0
        }
    }

    /// γ as actually applied: only the triplet variant uses it.
    pub fn effective_gamma(&self) -> f64 {
        if self.variant == Variant::GateTriplet {
            self.gamma
        } else {
            0.0
        }
    }
}

/// One training sample: per-block mixture magnitudes, per-source target
/// magnitudes (zero matrices where a source is silent) and per-block
/// activity flags.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub mags: Vec<Array2<f64>>,
    /// `targets[b][s]`: target magnitude spectrogram for source `s`.
    pub targets: Vec<Vec<Array2<f64>>>,
    /// `active[b][s]`.
    pub active: Vec<Vec<bool>>,
    /// Training-vocabulary speaker index per source.
    pub speaker_ids: Vec<usize>,
}

impl TrainSample {
    pub fn n_blocks(&self) -> usize {
        self.mags.len()
    }

    pub fn n_sources(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n_sources = self.n_sources();
        if self.targets.len() != self.mags.len() || self.active.len() != self.mags.len() {
            return Err(Error::ShapeMismatch(
                "targets/active must have one entry per block".into(),
            ));
        }
        for (b, mag) in self.mags.iter().enumerate() {
            if self.targets[b].len() != n_sources || self.active[b].len() != n_sources {
                return Err(Error::ShapeMismatch(format!(
                    "block {b}: expected {n_sources} sources"
                )));
            }
            for t in &self.targets[b] {
                if t.dim() != mag.dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "block {b}: target {:?} vs mag {:?}",
                        t.dim(),
                        mag.dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// First block in which each source is active (None if never).
    pub fn first_appearance(&self) -> Vec<Option<usize>> {
        (0..self.n_sources())
            .map(|s| (0..self.n_blocks()).find(|&b| self.active[b][s]))
            .collect()
    }
}

/// Component losses of one evaluation; `total` is the weighted sum actually
/// optimised.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub resmask: f64,
    pub ce: f64,
    pub triplet: f64,
    pub n_triplets: usize,
}

/// Evaluation of one minibatch.
pub struct BatchEval {
    pub loss: LossBreakdown,
    /// Chosen permutations, per sample per block.
    pub perms: Vec<Vec<Permutation>>,
}

fn batch_core(
    p: &ModelParams,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    fixed_perms: Option<&[Vec<Permutation>]>,
    want_grads: bool,
) -> Result<(BatchEval, Option<ModelParams>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let beta = cfg.effective_beta();
    let gamma = cfg.effective_gamma();
    if beta > 0.0 && p.classifier.is_none() {
        return Err(Error::InvalidConfig(
            "CE variant requires a classifier head".into(),
        ));
    }

    // Phase A: unroll every sample (parallel, deterministic order).
    let unrolls: Vec<Unrolled> = samples
        .par_iter()
        .enumerate()
        .map(|(si, s)| unroll_forward(p, s, fixed_perms.map(|fp| fp[si].as_slice())))
        .collect::<Result<_>>()?;

    // Phase B: losses over the whole batch.
    let n_samples = samples.len() as f64;
    let mut mse_total = 0.0;
    let mut res_total = 0.0;
    let mut all_masks = Vec::with_capacity(samples.len());
    for (si, un) in unrolls.iter().enumerate() {
        let masks = un.masks();
        mse_total += mse_loss(&masks, &samples[si].targets, &samples[si].mags, &un.perms)?;
        res_total += resmask_loss(&masks);
        all_masks.push(masks);
    }
    mse_total /= n_samples;
    res_total /= n_samples;

    // Speaker-loss embeddings: fresh (pre-gate) estimates of iterations whose
    // bound source is active in the block.
    let mut emb_refs: Vec<(usize, usize, usize)> = Vec::new();
    let mut embeddings: Vec<Array1<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    if beta > 0.0 || gamma > 0.0 {
        for (si, un) in unrolls.iter().enumerate() {
            for (b, block) in un.blocks.iter().enumerate() {
                for (i, it) in block.iters.iter().enumerate() {
                    if it.active {
                        emb_refs.push((si, b, i));
                        embeddings.push(it.cache.fresh.clone());
                        labels.push(samples[si].speaker_ids[it.source]);
                    }
                }
            }
        }
    }

    let mut ce_value = 0.0;
    let mut d_ce: Vec<Array1<f64>> = Vec::new();
    let mut ce_classifier_grads = None;
    if beta > 0.0 && !embeddings.is_empty() {
        let classifier = p.classifier.as_ref().expect("checked above");
        let (v, d, g) = ce_loss(&embeddings, &labels, classifier)?;
        ce_value = v;
        d_ce = d;
        ce_classifier_grads = Some(g);
    }

    let mut tri_value = 0.0;
    let mut d_tri: Vec<Array1<f64>> = Vec::new();
    let mut n_triplets = 0;
    if gamma > 0.0 && !embeddings.is_empty() {
        let (v, d, n) = triplet_loss(&embeddings, &labels, cfg.delta, cfg.max_triplets);
        tri_value = v;
        d_tri = d;
        n_triplets = n;
    }

    let total = mse_total + cfg.alpha * res_total + beta * ce_value + gamma * tri_value;
    let eval = BatchEval {
        loss: LossBreakdown {
            total,
            mse: mse_total,
            resmask: res_total,
            ce: ce_value,
            triplet: tri_value,
            n_triplets,
        },
        perms: unrolls.iter().map(|u| u.perms.clone()).collect(),
    };
    if !want_grads {
        return Ok((eval, None));
    }

    // Phase C: backward per sample.
    let e_dim = p.cfg.emb_dim;
    let sample_grads: Vec<ModelParams> = (0..samples.len())
        .into_par_iter()
        .map(|si| {
            let un = &unrolls[si];
            let masks = &all_masks[si];
            let mut d_masks =
                mse_loss_grad(masks, &samples[si].targets, &samples[si].mags, &un.perms);
            let d_res = resmask_loss_grad(masks);
            for (b, block) in d_masks.iter_mut().enumerate() {
                for (i, dm) in block.iter_mut().enumerate() {
                    dm.zip_mut_with(&d_res[b][i], |x, &r| {
                        *x = (*x + cfg.alpha * r) / n_samples;
                    });
                }
            }
            let mut d_fresh: Vec<Vec<Array1<f64>>> = un
                .blocks
                .iter()
                .map(|b| b.iters.iter().map(|_| Array1::zeros(e_dim)).collect())
                .collect();
            for (j, &(s2, b, i)) in emb_refs.iter().enumerate() {
                if s2 != si {
                    continue;
                }
                if beta > 0.0 && !d_ce.is_empty() {
                    d_fresh[b][i].scaled_add(beta, &d_ce[j]);
                }
                if gamma > 0.0 && !d_tri.is_empty() {
                    d_fresh[b][i].scaled_add(gamma, &d_tri[j]);
                }
            }
            let mut g = p.zeros_like();
            unroll_backward(p, un, &d_masks, &d_fresh, &mut g);
            g
        })
        .collect();

    let mut grads = p.zeros_like();
    for g in &sample_grads {
        grads.add_scaled(g, 1.0);
    }
    if let (Some(cg), Some(g_cls)) = (ce_classifier_grads, grads.classifier.as_mut()) {
        g_cls.w.scaled_add(beta, &cg.w);
        g_cls.b.scaled_add(beta, &cg.b);
    }
    Ok((eval, Some(grads)))
}

/// Loss of a minibatch without gradients (used by evaluation and the
/// finite-difference harness).
pub fn batch_loss(
    p: &ModelParams,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    fixed_perms: Option<&[Vec<Permutation>]>,
) -> Result<BatchEval> {
    batch_core(p, samples, cfg, fixed_perms, false).map(|(e, _)| e)
}

/// Loss and analytic parameter gradients of a minibatch.
pub fn batch_grads(
    p: &ModelParams,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    fixed_perms: Option<&[Vec<Permutation>]>,
) -> Result<(BatchEval, ModelParams)> {
    batch_core(p, samples, cfg, fixed_perms, true).map(|(e, g)| (e, g.expect("grads requested")))
}
