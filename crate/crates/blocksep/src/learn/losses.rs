//! The four training losses and block-wise permutation alignment.
//!
//! All losses come with analytic gradients; the test suite checks every one
//! of them against central finite differences.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::masknet::Dense;

/// Ordered mapping iteration index → target source index. Grows by
/// concatenation: once a source is bound to an iteration, the binding is
/// fixed for all later blocks.
pub type Permutation = Vec<usize>;

/// Squared separation error of one (mask, target) pair, summed over T·F.
fn pair_error(mask: &Array2<f64>, mag: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let mut err = 0.0;
    for ((m, y), a) in mask.iter().zip(mag.iter()).zip(target.iter()) {
        let d = m * y - a;
        err += d * d;
    }
    err
}

/// Permutation-invariant utterance-level MSE.
///
/// `masks[b][i]` are the estimated masks, `targets[b][s]` the target
/// magnitude spectrograms, `mags[b]` the mixture magnitudes and `perms[b]`
/// the iteration→source binding for block `b`. The loss averages the squared
/// error over all (block, iteration) pairs and over the T·F bins of each
/// block.
pub fn mse_loss(
    masks: &[Vec<Array2<f64>>],
    targets: &[Vec<Array2<f64>>],
    mags: &[Array2<f64>],
    perms: &[Permutation],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n_pairs = 0usize;
    for (b, block_masks) in masks.iter().enumerate() {
        for (i, mask) in block_masks.iter().enumerate() {
            let source = perms[b][i];
            let target = &targets[b][source];
            if mask.dim() != mags[b].dim() || target.dim() != mags[b].dim() {
                return Err(Error::ShapeMismatch(format!(
                    "block {b} iteration {i}: mask {:?} target {:?} mag {:?}",
                    mask.dim(),
                    target.dim(),
                    mags[b].dim()
                )));
            }
            total += pair_error(mask, &mags[b], target) / mask.len() as f64;
            n_pairs += 1;
        }
    }
    if n_pairs == 0 {
        return Ok(0.0);
    }
    Ok(total / n_pairs as f64)
}

/// Gradient of [`mse_loss`] w.r.t. every mask.
pub fn mse_loss_grad(
    masks: &[Vec<Array2<f64>>],
    targets: &[Vec<Array2<f64>>],
    mags: &[Array2<f64>],
    perms: &[Permutation],
) -> Vec<Vec<Array2<f64>>> {
    let n_pairs: usize = masks.iter().map(|b| b.len()).sum();
    let scale = if n_pairs == 0 { 0.0 } else { 1.0 / n_pairs as f64 };
    masks
        .iter()
        .enumerate()
        .map(|(b, block_masks)| {
            block_masks
                .iter()
                .enumerate()
                .map(|(i, mask)| {
                    let target = &targets[b][perms[b][i]];
                    let bin_scale = 2.0 * scale / mask.len() as f64;
                    let mut d = Array2::zeros(mask.dim());
                    ndarray::Zip::from(&mut d)
                        .and(mask)
                        .and(&mags[b])
                        .and(target)
                        .for_each(|d, &m, &y, &a| {
                            *d = bin_scale * (m * y - a) * y;
                        });
                    d
                })
                .collect()
        })
        .collect()
}

/// Error-minimising injective assignment of new iterations to candidate
/// sources. Ties break towards the lexicographically smallest assignment,
/// i.e. the lowest target index wins.
pub(crate) fn assign_new_sources(
    new_masks: &[Array2<f64>],
    candidates: &[usize],
    targets_b: &[Array2<f64>],
    mag_b: &Array2<f64>,
) -> Result<Vec<usize>> {
    if new_masks.len() > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} new iterations but only {} unbound sources",
            new_masks.len(),
            candidates.len()
        )));
    }
    if new_masks.is_empty() {
        return Ok(Vec::new());
    }
    let errors: Vec<Vec<f64>> = new_masks
        .iter()
        .map(|m| {
            candidates
                .iter()
                .map(|&s| pair_error(m, mag_b, &targets_b[s]))
                .collect()
        })
        .collect();

    // Exhaustive search over injective assignments (≤ a handful of new
    // sources per block, so the factorial blowup is irrelevant).
    fn search(
        depth: usize,
        acc: f64,
        errors: &[Vec<f64>],
        used: &mut [bool],
        choice: &mut [usize],
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if depth == errors.len() {
            let better = match best {
                None => true,
                Some((cost, _)) => acc < *cost,
            };
            if better {
                *best = Some((acc, choice.to_vec()));
            }
            return;
        }
        for j in 0..errors[depth].len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            choice[depth] = j;
            search(depth + 1, acc + errors[depth][j], errors, used, choice, best);
            used[j] = false;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut choice = vec![usize::MAX; new_masks.len()];
    let mut used = vec![false; candidates.len()];
    search(0, 0.0, &errors, &mut used, &mut choice, &mut best);
    let (_, picked) = best.expect("at least one assignment exists");
    Ok(picked.iter().map(|&j| candidates[j]).collect())
}

/// Extends the previous block's permutation with the error-minimising
/// assignment of the newly started iterations to the not-yet-bound sources.
pub fn select_permutation(
    masks_b: &[Array2<f64>],
    targets_b: &[Array2<f64>],
    mag_b: &Array2<f64>,
    prev: &Permutation,
) -> Result<Permutation> {
    let free_sources: Vec<usize> = (0..targets_b.len())
        .filter(|s| !prev.contains(s))
        .collect();
    let new_masks = &masks_b[prev.len().min(masks_b.len())..];
    let picked = assign_new_sources(new_masks, &free_sources, targets_b, mag_b)?;
    let mut perm = prev.clone();
    perm.extend(picked);
    Ok(perm)
}

/// Residual-mask loss: pushes the per-bin sum of all iteration masks of a
/// block to at least one, summed over blocks and bins.
pub fn resmask_loss(masks: &[Vec<Array2<f64>>]) -> f64 {
    let mut total = 0.0;
    for block_masks in masks {
        let Some(first) = block_masks.first() else {
            continue;
        };
        let mut sum = Array2::<f64>::zeros(first.dim());
        for m in block_masks {
            sum += m;
        }
        total += sum.mapv(|s| (1.0 - s).max(0.0)).sum();
    }
    total
}

/// Gradient of [`resmask_loss`] w.r.t. every mask: −1 wherever the block's
/// mask sum is still below one.
pub fn resmask_loss_grad(masks: &[Vec<Array2<f64>>]) -> Vec<Vec<Array2<f64>>> {
    masks
        .iter()
        .map(|block_masks| {
            let Some(first) = block_masks.first() else {
                return Vec::new();
            };
            let mut sum = Array2::<f64>::zeros(first.dim());
            for m in block_masks {
                sum += m;
            }
            let d = sum.mapv(|s| if s < 1.0 { -1.0 } else { 0.0 });
            block_masks.iter().map(|_| d.clone()).collect()
        })
        .collect()
}

/// Softmax cross-entropy over the training-speaker vocabulary.
///
/// Returns the mean negative log-likelihood plus the gradients w.r.t. the
/// embeddings and the classifier parameters.
pub fn ce_loss(
    embeddings: &[Array1<f64>],
    speaker_ids: &[usize],
    classifier: &Dense,
) -> Result<(f64, Vec<Array1<f64>>, Dense)> {
    assert_eq!(embeddings.len(), speaker_ids.len());
    let n_classes = classifier.out_dim();
    let mut grads = Dense::zeros(classifier.out_dim(), classifier.in_dim(), classifier.act);
    let mut d_embs = Vec::with_capacity(embeddings.len());
    if embeddings.is_empty() {
        return Ok((0.0, d_embs, grads));
    }
    let n = embeddings.len() as f64;
    let mut loss = 0.0;
    for (e, &id) in embeddings.iter().zip(speaker_ids) {
        if id >= n_classes {
            return Err(Error::UnknownSpeaker(format!(
                "speaker index {id} outside vocabulary of {n_classes}"
            )));
        }
        let mut logits = classifier.w.dot(e);
        logits += &classifier.b;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = logits.mapv(|l| (l - max).exp());
        let z = exp.sum();
        let log_p = logits[id] - max - z.ln();
        loss -= log_p / n;

        let mut d_logits = exp.mapv(|v| v / z);
        d_logits[id] -= 1.0;
        d_logits.mapv_inplace(|v| v / n);
        for (mut row, &dl) in grads.w.rows_mut().into_iter().zip(d_logits.iter()) {
            row.scaled_add(dl, e);
        }
        grads.b += &d_logits;
        d_embs.push(classifier.w.t().dot(&d_logits));
    }
    Ok((loss, d_embs, grads))
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt().max(1e-12);
    let nb = b.dot(b).sqrt().max(1e-12);
    a.dot(b) / (na * nb)
}

/// d cos(a, b) / d a.
fn d_cosine_da(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let na = a.dot(a).sqrt().max(1e-12);
    let nb = b.dot(b).sqrt().max(1e-12);
    let s = a.dot(b) / (na * nb);
    b.mapv(|x| x / (na * nb)) - a.mapv(|x| x * s / (na * na))
}

/// Hinged cosine triplet loss.
///
/// Triplets are formed from all (anchor, positive) pairs of same-speaker
/// embeddings; each anchor uses its hardest negative (the different-speaker
/// embedding with the highest cosine similarity). The number of triplets is
/// capped at `max_triplets`, enumerated in index order. Returns the loss and
/// the gradients w.r.t. the embeddings; if no valid triplet exists the loss
/// contributes zero.
pub fn triplet_loss(
    embeddings: &[Array1<f64>],
    speaker_ids: &[usize],
    delta: f64,
    max_triplets: usize,
) -> (f64, Vec<Array1<f64>>, usize) {
    assert_eq!(embeddings.len(), speaker_ids.len());
    let n = embeddings.len();
    let mut d_embs: Vec<Array1<f64>> = embeddings
        .iter()
        .map(|e| Array1::zeros(e.len()))
        .collect();
    let mut loss = 0.0;
    let mut n_triplets = 0usize;

    'outer: for a in 0..n {
        // Hardest negative for this anchor.
        let mut hardest: Option<(usize, f64)> = None;
        for neg in 0..n {
            if speaker_ids[neg] == speaker_ids[a] {
                continue;
            }
            let s = cosine(&embeddings[a], &embeddings[neg]);
            if hardest.map_or(true, |(_, best)| s > best) {
                hardest = Some((neg, s));
            }
        }
        let Some((neg, s_an)) = hardest else {
            continue;
        };
        for p in 0..n {
            if p == a || speaker_ids[p] != speaker_ids[a] {
                continue;
            }
            if n_triplets >= max_triplets {
                break 'outer;
            }
            n_triplets += 1;
            let s_ap = cosine(&embeddings[a], &embeddings[p]);
            let term = s_an - s_ap + delta;
            if term <= 0.0 {
                continue;
            }
            loss += term;
            d_embs[a] += &d_cosine_da(&embeddings[a], &embeddings[neg]);
            d_embs[neg] += &d_cosine_da(&embeddings[neg], &embeddings[a]);
            d_embs[a] -= &d_cosine_da(&embeddings[a], &embeddings[p]);
            d_embs[p] -= &d_cosine_da(&embeddings[p], &embeddings[a]);
        }
    }
    (loss, d_embs, n_triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masknet::Activation;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(t: usize, f: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((t, f), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn mse_zero_for_exact_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mag = rand_mat(4, 5, &mut rng);
        let mask = rand_mat(4, 5, &mut rng);
        let target = &mask * &mag;
        let loss = mse_loss(
            &[vec![mask]],
            &[vec![target]],
            &[mag],
            &[vec![0]],
        )
        .unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn mse_zero_mask_gives_mean_square_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mag = rand_mat(3, 4, &mut rng);
        let mask = Array2::zeros((3, 4));
        let target = mag.clone();
        let loss = mse_loss(&[vec![mask]], &[vec![target]], &[mag.clone()], &[vec![0]]).unwrap();
        let expect = mag.mapv(|y| y * y).sum() / 12.0;
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
    }

    #[test]
    fn mse_relabeling_symmetry() {
        // Loss of swapped outputs under the swapped permutation equals the
        // loss of unswapped outputs under identity.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mag = rand_mat(4, 6, &mut rng);
        let m0 = rand_mat(4, 6, &mut rng);
        let m1 = rand_mat(4, 6, &mut rng);
        let t0 = rand_mat(4, 6, &mut rng);
        let t1 = rand_mat(4, 6, &mut rng);
        let a = mse_loss(
            &[vec![m0.clone(), m1.clone()]],
            &[vec![t0.clone(), t1.clone()]],
            &[mag.clone()],
            &[vec![0, 1]],
        )
        .unwrap();
        let b = mse_loss(
            &[vec![m1, m0]],
            &[vec![t0, t1]],
            &[mag],
            &[vec![1, 0]],
        )
        .unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn permutation_concatenates_previous_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mag = rand_mat(3, 4, &mut rng);
        let masks = vec![
            rand_mat(3, 4, &mut rng),
            rand_mat(3, 4, &mut rng),
            rand_mat(3, 4, &mut rng),
        ];
        // Sources 2 and 1 already bound; only source 0 and 3 are free, and we
        // make source 3 the obvious match for the new iteration.
        let mut targets = vec![
            Array2::from_elem((3, 4), 5.0),
            rand_mat(3, 4, &mut rng),
            rand_mat(3, 4, &mut rng),
            &masks[2] * &mag,
        ];
        targets[0].fill(5.0);
        let perm = select_permutation(&masks, &targets, &mag, &vec![2, 1]).unwrap();
        assert_eq!(perm, vec![2, 1, 3]);
    }

    #[test]
    fn permutation_first_block_picks_minimum_of_both_orderings() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mag = rand_mat(3, 4, &mut rng);
        let m0 = rand_mat(3, 4, &mut rng);
        let m1 = rand_mat(3, 4, &mut rng);
        let t0 = &m1 * &mag;
        let t1 = &m0 * &mag;
        // m0 matches target 1 and m1 matches target 0: expect the swap.
        let perm =
            select_permutation(&[m0, m1], &[t0, t1], &mag, &Permutation::new()).unwrap();
        assert_eq!(perm, vec![1, 0]);
    }

    #[test]
    fn permutation_tie_breaks_to_lower_target_index() {
        let mag = Array2::from_elem((2, 3), 1.0);
        let mask = Array2::from_elem((2, 3), 0.5);
        // Two identical targets: either assignment has the same error.
        let t = Array2::from_elem((2, 3), 0.25);
        let perm =
            select_permutation(&[mask], &[t.clone(), t], &mag, &Permutation::new()).unwrap();
        assert_eq!(perm, vec![0]);
    }

    #[test]
    fn permutation_rejects_more_iterations_than_targets() {
        let mag = Array2::from_elem((2, 2), 1.0);
        let m = Array2::from_elem((2, 2), 0.5);
        let t = Array2::from_elem((2, 2), 0.5);
        assert!(
            select_permutation(&[m.clone(), m], &[t], &mag, &Permutation::new()).is_err()
        );
    }

    #[test]
    fn resmask_zero_when_masks_cover_everything() {
        let m0 = Array2::from_elem((3, 4), 0.5);
        let m1 = Array2::from_elem((3, 4), 0.5);
        assert_abs_diff_eq!(resmask_loss(&[vec![m0, m1]]), 0.0);
        let big = Array2::from_elem((3, 4), 1.5);
        assert_abs_diff_eq!(resmask_loss(&[vec![big]]), 0.0);
    }

    #[test]
    fn resmask_all_zero_mask_counts_every_bin() {
        let m = Array2::zeros((5, 7));
        assert_abs_diff_eq!(resmask_loss(&[vec![m]]), 35.0);
    }

    #[test]
    fn ce_uniform_logits_is_log_k() {
        let classifier = Dense::zeros(4, 3, Activation::Linear);
        let e = arr1(&[0.3, -0.2, 0.5]);
        let (loss, _, _) = ce_loss(&[e], &[2], &classifier).unwrap();
        assert_abs_diff_eq!(loss, 4.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_two_speakers_closed_form() {
        // Classifier built so the logits are exactly (1, 0).
        let mut classifier = Dense::zeros(2, 2, Activation::Linear);
        classifier.w[[0, 0]] = 1.0;
        let e = arr1(&[1.0, 0.0]);
        let (loss, _, _) = ce_loss(&[e], &[0], &classifier).unwrap();
        let expect = (1.0 + (-1.0_f64).exp()).ln();
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
    }

    #[test]
    fn ce_strong_correct_logit_drives_loss_to_zero() {
        let mut classifier = Dense::zeros(2, 2, Activation::Linear);
        classifier.w[[0, 0]] = 30.0;
        let e = arr1(&[1.0, 0.0]);
        let (loss, _, _) = ce_loss(&[e], &[0], &classifier).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn ce_unknown_speaker_errors() {
        let classifier = Dense::zeros(2, 2, Activation::Linear);
        let e = arr1(&[1.0, 0.0]);
        assert!(ce_loss(&[e], &[7], &classifier).is_err());
    }

    #[test]
    fn triplet_single_term_arithmetic() {
        // cos(a,n) = 0.9, cos(a,p) = 0.5; the reverse-anchor triplet clips.
        let a = arr1(&[1.0, 0.0]);
        let p = arr1(&[0.5, 3.0_f64.sqrt() / 2.0]);
        let n = arr1(&[0.9, -(1.0 - 0.81_f64).sqrt()]);
        let (loss, _, n_triplets) = triplet_loss(&[a, p, n], &[0, 0, 1], 0.2, 64);
        assert_eq!(n_triplets, 2);
        assert_abs_diff_eq!(loss, 0.9 - 0.5 + 0.2, epsilon = 1e-12);
    }

    #[test]
    fn triplet_clips_when_positive_dominates() {
        let a = arr1(&[1.0, 0.0]);
        let p = arr1(&[2.0, 0.0]);
        let n = arr1(&[-1.0, 0.0]);
        let (loss, grads, _) = triplet_loss(&[a, p, n], &[0, 0, 1], 0.2, 64);
        assert_abs_diff_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn triplet_identical_directions_costs_delta_each() {
        let v = arr1(&[0.6, 0.8]);
        let (loss, _, n_triplets) =
            triplet_loss(&[v.clone(), v.clone(), v], &[0, 0, 1], 0.2, 64);
        // Anchors 0 and 1 each contribute one triplet with s_an = s_ap = 1.
        assert_eq!(n_triplets, 2);
        assert_abs_diff_eq!(loss, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn triplet_without_valid_pairs_is_zero() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        let (loss, _, n_triplets) = triplet_loss(&[a, b], &[0, 1], 0.2, 64);
        assert_eq!(n_triplets, 0);
        assert_abs_diff_eq!(loss, 0.0);
    }

    /// Central finite differences for the embedding gradients of both
    /// speaker losses.
    #[test]
    fn speaker_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5;
        let dim = 4;
        let embeddings: Vec<Array1<f64>> = (0..n)
            .map(|_| Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let ids = vec![0, 0, 1, 1, 2];
        let mut classifier = Dense::zeros(3, dim, Activation::Linear);
        classifier.w.mapv_inplace(|_| rng.gen_range(-0.5..0.5));

        let (_, d_ce, _) = ce_loss(&embeddings, &ids, &classifier).unwrap();
        let (_, d_tri, _) = triplet_loss(&embeddings, &ids, 0.2, 64);

        let eps = 1e-6;
        for which in 0..n {
            for k in 0..dim {
                let mut plus = embeddings.clone();
                let mut minus = embeddings.clone();
                plus[which][k] += eps;
                minus[which][k] -= eps;
                let fd_ce = (ce_loss(&plus, &ids, &classifier).unwrap().0
                    - ce_loss(&minus, &ids, &classifier).unwrap().0)
                    / (2.0 * eps);
                assert_abs_diff_eq!(d_ce[which][k], fd_ce, epsilon = 1e-7);
                let fd_tri = (triplet_loss(&plus, &ids, 0.2, 64).0
                    - triplet_loss(&minus, &ids, 0.2, 64).0)
                    / (2.0 * eps);
                assert_abs_diff_eq!(d_tri[which][k], fd_tri, epsilon = 1e-6);
            }
        }
    }
}
