//! Teacher-forced unrolling of the network over blocks and iterations.
//!
//! During training the number of extraction iterations per block is dictated
//! by the ground truth: one iteration per source discovered so far plus one
//! per source first appearing in the block. Silent known sources keep their
//! iteration with an all-zero target. Embeddings thread across blocks the
//! same way the inference engine passes them, so gradients flow through the
//! whole block-online process.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::masknet::{
    backward, forward_cached, zero_embedding, ModelParams, NetCache, NetInput, NetUpstream,
};
use crate::signal::Mask;

use super::losses::{assign_new_sources, Permutation};
use super::TrainSample;

pub struct UnrolledIter {
    pub cache: NetCache,
    /// Source index bound to this iteration by the block permutation.
    pub source: usize,
    /// Whether the bound source is active in this block.
    pub active: bool,
    /// True when this iteration started the slot (blind extraction).
    pub is_new: bool,
}

pub struct UnrolledBlock {
    pub iters: Vec<UnrolledIter>,
    /// Residual inputs R_0..R_K (K+1 entries, R_0 all ones).
    pub residuals: Vec<Array2<f64>>,
}

pub struct Unrolled {
    pub blocks: Vec<UnrolledBlock>,
    /// Cumulative permutation φ_b per block.
    pub perms: Vec<Permutation>,
}

impl Unrolled {
    /// Masks per block per iteration (borrowed from the caches).
    pub fn masks(&self) -> Vec<Vec<Array2<f64>>> {
        self.blocks
            .iter()
            .map(|b| b.iters.iter().map(|it| it.cache.mask_y.clone()).collect())
            .collect()
    }

    pub fn n_iterations(&self) -> usize {
        self.blocks.iter().map(|b| b.iters.len()).sum()
    }
}

/// Runs the teacher-forced unroll. When `fixed_perms` is given the
/// permutations are taken as-is instead of re-selected; the gradient checks
/// use this to keep the discrete assignment constant under parameter
/// perturbations.
pub fn unroll_forward(
    p: &ModelParams,
    sample: &TrainSample,
    fixed_perms: Option<&[Permutation]>,
) -> Result<Unrolled> {
    sample.validate()?;
    let n_blocks = sample.mags.len();
    let first_app = sample.first_appearance();
    let use_gate = p.cfg.use_gate;

    let mut carried: Vec<Array1<f64>> = Vec::new(); // per slot, post-gate embedding
    let mut perm: Permutation = Vec::new();
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut perms = Vec::with_capacity(n_blocks);

    for b in 0..n_blocks {
        let mag = &sample.mags[b];
        let (t_len, f) = mag.dim();
        let n_known = carried.len();
        let n_new = first_app.iter().filter(|&&fb| fb == Some(b)).count();
        let k = n_known + n_new;

        let mut residuals = Vec::with_capacity(k + 1);
        residuals.push(Array2::ones((t_len, f)));
        let mut iters: Vec<UnrolledIter> = Vec::with_capacity(k);
        let mut new_carried = Vec::with_capacity(k);

        for i in 0..k {
            let residual = Mask::from_unchecked(residuals[i].clone());
            let is_new = i >= n_known;
            let (z, prev) = if is_new {
                (zero_embedding(p.cfg.emb_dim), zero_embedding(p.cfg.emb_dim))
            } else {
                (carried[i].clone(), carried[i].clone())
            };
            let (out, cache) = forward_cached(
                p,
                &NetInput {
                    mag,
                    residual: &residual,
                    adaptation: &z,
                },
                &prev,
                use_gate && !is_new,
                None,
            )?;
            let mut next = residuals[i].clone();
            next.zip_mut_with(&cache.mask_y, |r, &m| *r = (*r - m).max(0.0));
            residuals.push(next);
            new_carried.push(out.embedding);
            iters.push(UnrolledIter {
                cache,
                source: usize::MAX,
                active: false,
                is_new,
            });
        }

        // Bind the new iterations to the sources first appearing in this
        // block (later sources still have all-zero targets here and must not
        // capture an iteration).
        let block_perm = match fixed_perms {
            Some(perms) => {
                let given = &perms[b];
                if given.len() != k {
                    return Err(Error::InvalidArgument(format!(
                        "fixed permutation for block {b} has {} entries, expected {k}",
                        given.len()
                    )));
                }
                given.clone()
            }
            None => {
                let new_masks: Vec<Array2<f64>> = iters[n_known..]
                    .iter()
                    .map(|it| it.cache.mask_y.clone())
                    .collect();
                let candidates: Vec<usize> = (0..sample.n_sources())
                    .filter(|&s| first_app[s] == Some(b))
                    .collect();
                let picked =
                    assign_new_sources(&new_masks, &candidates, &sample.targets[b], mag)?;
                let mut extended = perm.clone();
                extended.extend(picked);
                extended
            }
        };
        for (i, it) in iters.iter_mut().enumerate() {
            it.source = block_perm[i];
            it.active = sample.active[b][block_perm[i]];
        }
        perm = block_perm.clone();
        perms.push(block_perm);
        carried = new_carried;
        blocks.push(UnrolledBlock { iters, residuals });
    }

    Ok(Unrolled { blocks, perms })
}

/// Backpropagates through the unrolled graph.
///
/// `d_masks[b][i]` is the upstream gradient on each iteration's mask (from
/// the reconstruction and residual-mask losses) and `d_fresh[b][i]` the
/// gradient on each pre-gate embedding (from the speaker losses; zero
/// otherwise). Parameter gradients accumulate into `grads`.
pub fn unroll_backward(
    p: &ModelParams,
    un: &Unrolled,
    d_masks: &[Vec<Array2<f64>>],
    d_fresh: &[Vec<Array1<f64>>],
    grads: &mut ModelParams,
) {
    let e_dim = p.cfg.emb_dim;
    // Gradient on the embeddings emitted by the block currently being
    // processed, coming from their use in the following block.
    let mut d_carry: Vec<Array1<f64>> = Vec::new();

    for b in (0..un.blocks.len()).rev() {
        let block = &un.blocks[b];
        let k = block.iters.len();
        let n_known = block.iters.iter().filter(|it| !it.is_new).count();
        let mut d_carry_prev: Vec<Array1<f64>> =
            (0..n_known).map(|_| Array1::zeros(e_dim)).collect();

        let (t_len, f) = if k > 0 {
            block.residuals[0].dim()
        } else {
            (0, 0)
        };
        let mut d_r = Array2::<f64>::zeros((t_len, f));

        for i in (0..k).rev() {
            let it = &block.iters[i];
            let r_in = &block.residuals[i];
            let mask = &it.cache.mask_y;

            // R_i = max(R_{i-1} − M_i, 0): route the gradient on R_i through
            // the clip into the mask and the previous residual.
            let mut d_mask = d_masks[b][i].clone();
            let mut d_r_prev = Array2::<f64>::zeros((t_len, f));
            ndarray::Zip::from(&mut d_mask)
                .and(&mut d_r_prev)
                .and(r_in)
                .and(mask)
                .and(&d_r)
                .for_each(|dm, drp, &r, &m, &dr| {
                    if r - m > 0.0 {
                        *dm -= dr;
                        *drp = dr;
                    }
                });

            let upstream = NetUpstream {
                d_mask,
                d_fresh: d_fresh[b][i].clone(),
                d_embedding: d_carry
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| Array1::zeros(e_dim)),
            };
            let ig = backward(p, &it.cache, &upstream, grads);
            d_r = d_r_prev + &ig.d_residual;

            if !it.is_new {
                // The same carried embedding fed both the adaptation input
                // and the gate's previous-embedding input.
                d_carry_prev[i] += &ig.d_adaptation;
                d_carry_prev[i] += &ig.d_prev_embedding;
            }
        }
        // d_r is now the gradient on R_0 = const ones; nothing consumes it.
        d_carry = d_carry_prev;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masknet::{init_params, NetConfig};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(use_gate: bool) -> NetConfig {
        NetConfig {
            n_bins: 7,
            hidden: 3,
            trunk_dim: 5,
            emb_hidden1: 4,
            emb_hidden2: 3,
            emb_dim: 4,
            use_gate,
            normalize_embedding: false,
            n_speakers: None,
        }
    }

    fn sample_with_activity(active: Vec<Vec<bool>>, t: usize, f: usize, seed: u64) -> TrainSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_blocks = active.len();
        let n_sources = active[0].len();
        let mags: Vec<Array2<f64>> = (0..n_blocks)
            .map(|_| Array2::from_shape_fn((t, f), |_| rng.gen_range(0.1..1.0)))
            .collect();
        let targets = active
            .iter()
            .enumerate()
            .map(|(b, acts)| {
                (0..n_sources)
                    .map(|s| {
                        if acts[s] {
                            Array2::from_shape_fn((t, f), |_| rng.gen_range(0.0..1.0))
                                * &mags[b]
                        } else {
                            Array2::zeros((t, f))
                        }
                    })
                    .collect()
            })
            .collect();
        TrainSample {
            mags,
            targets,
            active,
            speaker_ids: (0..n_sources).collect(),
        }
    }

    #[test]
    fn iteration_counts_follow_teacher_forcing() {
        // Two sources from block 0; source 1 silent in block 2.
        let active = vec![
            vec![true, true],
            vec![true, true],
            vec![true, false],
            vec![true, true],
        ];
        let sample = sample_with_activity(active, 4, 7, 1);
        let p = init_params(&tiny_cfg(true), 3).unwrap();
        let un = unroll_forward(&p, &sample, None).unwrap();
        let counts: Vec<usize> = un.blocks.iter().map(|b| b.iters.len()).collect();
        assert_eq!(counts, vec![2, 2, 2, 2]);
        // The silent iteration carries the silent source with active = false.
        let silent = un.blocks[2]
            .iters
            .iter()
            .find(|it| it.source == 1)
            .unwrap();
        assert!(!silent.active);
    }

    #[test]
    fn late_speaker_adds_an_iteration() {
        let active = vec![
            vec![true, false],
            vec![true, false],
            vec![true, true],
            vec![true, true],
        ];
        let sample = sample_with_activity(active, 4, 7, 2);
        let p = init_params(&tiny_cfg(true), 5).unwrap();
        let un = unroll_forward(&p, &sample, None).unwrap();
        let counts: Vec<usize> = un.blocks.iter().map(|b| b.iters.len()).collect();
        assert_eq!(counts, vec![1, 1, 2, 2]);
        assert!(un.blocks[2].iters[1].is_new);
        assert_eq!(un.perms[3].len(), 2);
    }

    #[test]
    fn single_source_unrolls_one_iteration_per_block() {
        let active = vec![vec![true], vec![true], vec![true]];
        let sample = sample_with_activity(active, 4, 7, 3);
        let p = init_params(&tiny_cfg(false), 7).unwrap();
        let un = unroll_forward(&p, &sample, None).unwrap();
        assert!(un.blocks.iter().all(|b| b.iters.len() == 1));
        assert_eq!(un.perms.last().unwrap(), &vec![0]);
    }
}
