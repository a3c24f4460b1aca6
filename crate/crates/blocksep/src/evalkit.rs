//! Scoring: scale-invariant SDR, frame-level diarization error rate with its
//! missed/false/confusion decomposition, speaker confusion error rate, and
//! per-block source-counting accuracy.
//!
//! Frame-level DER counts a frame as wrong when the number of active
//! speakers is misestimated; confusing the output order while getting the
//! activity right is not a DER error and is measured separately by SCER,
//! which compares the whole-session optimal speaker assignment against the
//! frame-local one.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Hypothesis activity, slots × frames.
#[derive(Debug, Clone)]
pub struct DiarizationHyp {
    pub activity: Array2<bool>,
}

/// Reference activity, speakers × frames.
#[derive(Debug, Clone)]
pub struct DiarizationRef {
    pub activity: Array2<bool>,
}

/// DER with its additive decomposition, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DerBreakdown {
    pub der: f64,
    pub mst: f64,
    pub fat: f64,
    pub set: f64,
}

/// Aggregated test-set scores.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScoreReport {
    pub sdr_improvement_db: Option<f64>,
    pub der: DerBreakdown,
    pub scer_percent: f64,
    pub counting_accuracy_percent: f64,
    pub n_samples: usize,
    pub n_frames: usize,
    pub n_blocks: usize,
    /// Number of (sample, speaker) pairs entering the SDR average.
    pub n_sdr_pairs: usize,
}

const SDR_CAP_DB: f64 = 60.0;

/// Scale-invariant SDR: the estimate is projected onto the reference; the
/// ratio of projected power to residual power is reported in dB, capped to
/// ±60 dB.
pub fn sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.samples.iter().map(|v| v * v).sum();
    if ref_energy <= 0.0 {
        return Err(Error::InvalidArgument("reference has zero energy".into()));
    }
    let dot: f64 = estimate
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| e * r)
        .sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let err_energy: f64 = estimate
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    if err_energy <= target_energy * 10f64.powf(-SDR_CAP_DB / 10.0) {
        return Ok(SDR_CAP_DB);
    }
    if target_energy <= 0.0 {
        return Ok(-SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / err_energy).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

/// Whole-session slot → speaker assignment maximising frame-activity
/// overlap. Injective; slots whose best pairing has zero overlap stay
/// unassigned. Exhaustive search (intended for ≤ 8 slots/speakers).
pub fn optimal_assignment(hyp: &DiarizationHyp, rf: &DiarizationRef) -> Vec<Option<usize>> {
    let n_slots = hyp.activity.nrows();
    let n_spk = rf.activity.nrows();
    let overlap: Vec<Vec<usize>> = (0..n_slots)
        .map(|s| {
            (0..n_spk)
                .map(|k| {
                    hyp.activity
                        .row(s)
                        .iter()
                        .zip(rf.activity.row(k).iter())
                        .filter(|(h, r)| **h && **r)
                        .count()
                })
                .collect()
        })
        .collect();

    fn search(
        slot: usize,
        acc: usize,
        overlap: &[Vec<usize>],
        used: &mut [bool],
        choice: &mut [Option<usize>],
        best: &mut Option<(usize, Vec<Option<usize>>)>,
    ) {
        if slot == overlap.len() {
            let better = match best {
                None => true,
                Some((score, _)) => acc > *score,
            };
            if better {
                *best = Some((acc, choice.to_vec()));
            }
            return;
        }
        for k in 0..used.len() {
            if used[k] {
                continue;
            }
            used[k] = true;
            choice[slot] = Some(k);
            search(slot + 1, acc + overlap[slot][k], overlap, used, choice, best);
            used[k] = false;
        }
        choice[slot] = None;
        search(slot + 1, acc, overlap, used, choice, best);
    }

    let mut best = None;
    let mut choice = vec![None; n_slots];
    let mut used = vec![false; n_spk];
    search(0, 0, &overlap, &mut used, &mut choice, &mut best);

    // Drop zero-overlap pairings: a silent slot stays unassigned.
    let mut assignment = best.map(|(_, a)| a).unwrap_or_default();
    for (s, a) in assignment.iter_mut().enumerate() {
        if let Some(k) = *a {
            if overlap[s][k] == 0 {
                *a = None;
            }
        }
    }
    assignment
}

/// Frame-level diarization error rate.
///
/// Per frame: missed-speaker time when speech is active but the system
/// reports nothing, false-active time when the system reports speech during
/// reference silence, speaker-error time when both sides are active but the
/// speaker count is wrong. A frame with the correct count is correct
/// regardless of output order.
pub fn der(hyp: &DiarizationHyp, rf: &DiarizationRef) -> Result<DerBreakdown> {
    let t = hyp.activity.ncols();
    if rf.activity.ncols() != t {
        return Err(Error::ShapeMismatch(format!(
            "hyp has {} frames, ref {}",
            t,
            rf.activity.ncols()
        )));
    }
    if t == 0 {
        return Ok(DerBreakdown {
            der: 0.0,
            mst: 0.0,
            fat: 0.0,
            set: 0.0,
        });
    }
    let mut mst = 0usize;
    let mut fat = 0usize;
    let mut set = 0usize;
    for frame in 0..t {
        let nr = rf.activity.column(frame).iter().filter(|&&a| a).count();
        let nh = hyp.activity.column(frame).iter().filter(|&&a| a).count();
        match (nr, nh) {
            (0, 0) => {}
            (_, 0) => mst += 1,
            (0, _) => fat += 1,
            (r, h) if r != h => set += 1,
            _ => {}
        }
    }
    let scale = 100.0 / t as f64;
    Ok(DerBreakdown {
        der: (mst + fat + set) as f64 * scale,
        mst: mst as f64 * scale,
        fat: fat as f64 * scale,
        set: set as f64 * scale,
    })
}

/// Speaker confusion error rate.
///
/// Only frames where the active-speaker count is correct can be confused;
/// such a frame counts when the whole-session assignment is not a valid
/// frame-local assignment, i.e. some active slot is bound to a speaker that
/// is inactive in this frame (or to no speaker at all).
pub fn scer(hyp: &DiarizationHyp, rf: &DiarizationRef) -> Result<f64> {
    let t = hyp.activity.ncols();
    if rf.activity.ncols() != t {
        return Err(Error::ShapeMismatch(format!(
            "hyp has {} frames, ref {}",
            t,
            rf.activity.ncols()
        )));
    }
    if t == 0 {
        return Ok(0.0);
    }
    let global = optimal_assignment(hyp, rf);
    let mut confused = 0usize;
    for frame in 0..t {
        let active_slots: Vec<usize> = (0..hyp.activity.nrows())
            .filter(|&s| hyp.activity[[s, frame]])
            .collect();
        let nr = rf.activity.column(frame).iter().filter(|&&a| a).count();
        if active_slots.is_empty() || active_slots.len() != nr {
            continue; // count errors are DER territory
        }
        let consistent = active_slots
            .iter()
            .all(|&s| global[s].is_some_and(|k| rf.activity[[k, frame]]));
        if !consistent {
            confused += 1;
        }
    }
    Ok(100.0 * confused as f64 / t as f64)
}

/// Fraction of blocks whose active-slot count equals the true speaker count.
pub fn counting_accuracy(hyp_counts: &[usize], ref_counts: &[usize]) -> f64 {
    if hyp_counts.is_empty() || hyp_counts.len() != ref_counts.len() {
        return 0.0;
    }
    let correct = hyp_counts
        .iter()
        .zip(ref_counts)
        .filter(|(h, r)| h == r)
        .count();
    100.0 * correct as f64 / hyp_counts.len() as f64
}

/// Everything a system produced for one sample.
#[derive(Debug, Clone)]
pub struct SystemOutput {
    pub sample_id: String,
    /// Slots × frames.
    pub frame_activity: Array2<bool>,
    pub block_counts: Vec<usize>,
    /// Separated session-length waveform per slot (may be empty when only
    /// diarization is scored).
    pub separated: Vec<Waveform>,
}

/// Ground truth for one sample.
#[derive(Debug, Clone)]
pub struct SampleTruth {
    pub sample_id: String,
    /// Speakers × frames.
    pub frame_activity: Array2<bool>,
    pub block_counts: Vec<usize>,
    pub references: Vec<Waveform>,
    pub mixture: Waveform,
}

/// Verifies that results cover the manifest; reports missing ids.
pub fn check_coverage(manifest_ids: &[String], result_ids: &[String]) -> Result<()> {
    let have: std::collections::HashSet<&String> = result_ids.iter().collect();
    let missing: Vec<String> = manifest_ids
        .iter()
        .filter(|id| !have.contains(id))
        .cloned()
        .collect();
    if !missing.is_empty() || manifest_ids.is_empty() {
        return Err(Error::MissingResults(if manifest_ids.is_empty() {
            vec!["<empty manifest>".into()]
        } else {
            missing
        }));
    }
    Ok(())
}

/// Scores a whole test set: micro-averaged DER/SCER over all frames,
/// counting accuracy over all blocks, and the mean SDR improvement over the
/// unprocessed mixture for every (sample, speaker) pair with an assigned
/// slot.
pub fn score_testset(pairs: &[(SampleTruth, SystemOutput)]) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(Error::MissingResults(vec!["<empty test set>".into()]));
    }
    let mut frames = 0usize;
    let mut mst = 0usize;
    let mut fat = 0usize;
    let mut set = 0usize;
    let mut confused_frames = 0usize;
    let mut blocks = 0usize;
    let mut blocks_correct = 0usize;
    let mut sdri_sum = 0.0;
    let mut sdri_n = 0usize;

    for (truth, out) in pairs {
        let t = truth.frame_activity.ncols();
        if out.frame_activity.ncols() != t {
            return Err(Error::ShapeMismatch(format!(
                "{}: hyp frames {} vs ref {}",
                out.sample_id,
                out.frame_activity.ncols(),
                t
            )));
        }
        let hyp = DiarizationHyp {
            activity: out.frame_activity.clone(),
        };
        let rf = DiarizationRef {
            activity: truth.frame_activity.clone(),
        };
        let d = der(&hyp, &rf)?;
        let s = scer(&hyp, &rf)?;
        frames += t;
        mst += (d.mst * t as f64 / 100.0).round() as usize;
        fat += (d.fat * t as f64 / 100.0).round() as usize;
        set += (d.set * t as f64 / 100.0).round() as usize;
        confused_frames += (s * t as f64 / 100.0).round() as usize;

        blocks += truth.block_counts.len();
        blocks_correct += out
            .block_counts
            .iter()
            .zip(&truth.block_counts)
            .filter(|(h, r)| h == r)
            .count();

        if !out.separated.is_empty() {
            let assignment = optimal_assignment(&hyp, &rf);
            for (slot, assigned) in assignment.iter().enumerate() {
                let Some(k) = assigned else { continue };
                let reference = &truth.references[*k];
                if reference.samples.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let est_sdr = sdr(&out.separated[slot], reference)?;
                let mix_sdr = sdr(&truth.mixture, reference)?;
                sdri_sum += est_sdr - mix_sdr;
                sdri_n += 1;
            }
        }
    }

    let scale = 100.0 / frames.max(1) as f64;
    Ok(ScoreReport {
        sdr_improvement_db: if sdri_n > 0 {
            Some(sdri_sum / sdri_n as f64)
        } else {
            None
        },
        der: DerBreakdown {
            der: (mst + fat + set) as f64 * scale,
            mst: mst as f64 * scale,
            fat: fat as f64 * scale,
            set: set as f64 * scale,
        },
        scer_percent: confused_frames as f64 * scale,
        counting_accuracy_percent: 100.0 * blocks_correct as f64 / blocks.max(1) as f64,
        n_samples: pairs.len(),
        n_frames: frames,
        n_blocks: blocks,
        n_sdr_pairs: sdri_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wav(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 8000)
    }

    #[test]
    fn sdr_perfect_estimate_caps_at_60() {
        let r = wav(vec![0.1, -0.2, 0.3, 0.05]);
        assert_abs_diff_eq!(sdr(&r, &r).unwrap(), 60.0);
        let scaled = wav(r.samples.iter().map(|v| v * 3.7).collect());
        assert_abs_diff_eq!(sdr(&scaled, &r).unwrap(), 60.0);
    }

    #[test]
    fn sdr_orthogonal_estimate_caps_at_minus_60() {
        let r = wav(vec![1.0, 0.0, 1.0, 0.0]);
        let e = wav(vec![0.0, 1.0, 0.0, -1.0]);
        assert_abs_diff_eq!(sdr(&e, &r).unwrap(), -60.0);
    }

    #[test]
    fn sdr_equal_power_orthogonal_noise_is_zero_db() {
        let r = wav(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let n = wav(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = wav(r.samples.iter().zip(&n.samples).map(|(a, b)| a + b).collect());
        assert_abs_diff_eq!(sdr(&e, &r).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn sdr_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = wav((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let e = wav(
            r.samples
                .iter()
                .map(|v| v + 0.3 * rng.gen_range(-1.0..1.0))
                .collect(),
        );
        let base = sdr(&e, &r).unwrap();
        for c in [0.01, 0.5, 7.0] {
            let scaled = wav(e.samples.iter().map(|v| v * c).collect());
            assert_abs_diff_eq!(sdr(&scaled, &r).unwrap(), base, epsilon = 1e-9);
        }
    }

    #[test]
    fn sdr_zero_reference_errors() {
        let r = wav(vec![0.0; 8]);
        let e = wav(vec![1.0; 8]);
        assert!(sdr(&e, &r).is_err());
    }

    #[test]
    fn assignment_identity_and_swap() {
        let act = array![[true, true, false, false], [false, false, true, true]];
        let hyp = DiarizationHyp {
            activity: act.clone(),
        };
        let rf = DiarizationRef {
            activity: act.clone(),
        };
        assert_eq!(optimal_assignment(&hyp, &rf), vec![Some(0), Some(1)]);

        let mut rows: Vec<_> = act.rows().into_iter().map(|r| r.to_owned()).collect();
        rows.rotate_left(1);
        let mut swapped = act.clone();
        for (i, r) in rows.iter().enumerate() {
            swapped.row_mut(i).assign(r);
        }
        let hyp2 = DiarizationHyp { activity: swapped };
        assert_eq!(optimal_assignment(&hyp2, &rf), vec![Some(1), Some(0)]);
    }

    #[test]
    fn assignment_leaves_silent_slot_unassigned() {
        let hyp = DiarizationHyp {
            activity: array![
                [true, true, false, false],
                [false, false, true, true],
                [false, false, false, false]
            ],
        };
        let rf = DiarizationRef {
            activity: array![[true, true, false, false], [false, false, true, true]],
        };
        assert_eq!(optimal_assignment(&hyp, &rf), vec![Some(0), Some(1), None]);
    }

    #[test]
    fn der_perfect_hypothesis_is_zero() {
        let act = array![[true, false, true], [false, true, false]];
        let hyp = DiarizationHyp {
            activity: act.clone(),
        };
        let rf = DiarizationRef { activity: act };
        let d = der(&hyp, &rf).unwrap();
        assert_abs_diff_eq!(d.der, 0.0);
    }

    #[test]
    fn der_ten_missed_frames_of_hundred() {
        let ref_act = Array2::from_elem((1, 100), true);
        let mut hyp_act = Array2::from_elem((1, 100), true);
        for i in 0..10 {
            hyp_act[[0, i]] = false;
        }
        let d = der(
            &DiarizationHyp { activity: hyp_act },
            &DiarizationRef { activity: ref_act },
        )
        .unwrap();
        assert_abs_diff_eq!(d.der, 10.0);
        assert_abs_diff_eq!(d.mst, 10.0);
        assert_abs_diff_eq!(d.fat + d.set, 0.0);
    }

    #[test]
    fn der_length_mismatch_errors() {
        let hyp = DiarizationHyp {
            activity: Array2::from_elem((1, 5), true),
        };
        let rf = DiarizationRef {
            activity: Array2::from_elem((1, 6), true),
        };
        assert!(der(&hyp, &rf).is_err());
        assert!(scer(&hyp, &rf).is_err());
    }

    #[test]
    fn der_decomposition_sums_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let hyp = DiarizationHyp {
                activity: Array2::from_shape_fn((3, 40), |_| rng.gen_bool(0.4)),
            };
            let rf = DiarizationRef {
                activity: Array2::from_shape_fn((2, 40), |_| rng.gen_bool(0.4)),
            };
            let d = der(&hyp, &rf).unwrap();
            assert_abs_diff_eq!(d.der, d.mst + d.fat + d.set, epsilon = 1e-12);
        }
    }

    /// All score-maximal assignments after zero-overlap pruning.
    fn all_optima(hyp: &DiarizationHyp, rf: &DiarizationRef) -> Vec<Vec<Option<usize>>> {
        let n_slots = hyp.activity.nrows();
        let n_spk = rf.activity.nrows();
        let overlap = |s: usize, k: usize| {
            hyp.activity
                .row(s)
                .iter()
                .zip(rf.activity.row(k).iter())
                .filter(|(h, r)| **h && **r)
                .count()
        };
        let mut best = 0usize;
        let mut optima: Vec<Vec<Option<usize>>> = Vec::new();
        let mut choice = vec![None; n_slots];
        fn rec(
            slot: usize,
            acc: usize,
            n_slots: usize,
            n_spk: usize,
            overlap: &dyn Fn(usize, usize) -> usize,
            choice: &mut Vec<Option<usize>>,
            best: &mut usize,
            optima: &mut Vec<Vec<Option<usize>>>,
        ) {
            if slot == n_slots {
                let canon: Vec<Option<usize>> = choice
                    .iter()
                    .enumerate()
                    .map(|(s, a)| a.filter(|&k| overlap(s, k) > 0))
                    .collect();
                match acc.cmp(best) {
                    std::cmp::Ordering::Greater => {
                        *best = acc;
                        *optima = vec![canon];
                    }
                    std::cmp::Ordering::Equal => {
                        if !optima.contains(&canon) {
                            optima.push(canon);
                        }
                    }
                    std::cmp::Ordering::Less => {}
                }
                return;
            }
            for k in 0..n_spk {
                if choice[..slot].contains(&Some(k)) {
                    continue;
                }
                choice[slot] = Some(k);
                rec(slot + 1, acc + overlap(slot, k), n_slots, n_spk, overlap, choice, best, optima);
                choice[slot] = None;
            }
            rec(slot + 1, acc, n_slots, n_spk, overlap, choice, best, optima);
        }
        rec(0, 0, n_slots, n_spk, &overlap, &mut choice, &mut best, &mut optima);
        optima
    }

    #[test]
    fn der_and_scer_invariant_to_slot_order() {
        // DER is count-based and always invariant; SCER is invariant
        // whenever the optimal assignment is unique, so tied instances are
        // skipped.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tested = 0;
        for _ in 0..60 {
            let act = Array2::from_shape_fn((3, 30), |_| rng.gen_bool(0.5));
            let rf = DiarizationRef {
                activity: Array2::from_shape_fn((3, 30), |_| rng.gen_bool(0.5)),
            };
            let hyp = DiarizationHyp {
                activity: act.clone(),
            };
            let mut rows: Vec<_> = act.rows().into_iter().map(|r| r.to_owned()).collect();
            rows.rotate_left(1);
            let mut permuted = act.clone();
            for (i, r) in rows.iter().enumerate() {
                permuted.row_mut(i).assign(r);
            }
            let hyp2 = DiarizationHyp { activity: permuted };
            let d1 = der(&hyp, &rf).unwrap();
            let d2 = der(&hyp2, &rf).unwrap();
            assert_abs_diff_eq!(d1.der, d2.der, epsilon = 1e-12);
            if all_optima(&hyp, &rf).len() == 1 {
                tested += 1;
                let s1 = scer(&hyp, &rf).unwrap();
                let s2 = scer(&hyp2, &rf).unwrap();
                assert_abs_diff_eq!(s1, s2, epsilon = 1e-12);
            }
        }
        assert!(tested >= 20, "only {tested} unique-optimum instances");
    }

    #[test]
    fn scer_zero_for_consistent_order_and_single_speaker() {
        let act = array![[true, true, false], [false, true, true]];
        let hyp = DiarizationHyp {
            activity: act.clone(),
        };
        let rf = DiarizationRef { activity: act };
        assert_abs_diff_eq!(scer(&hyp, &rf).unwrap(), 0.0);

        let single = array![[true, true, true, false]];
        assert_abs_diff_eq!(
            scer(
                &DiarizationHyp {
                    activity: single.clone()
                },
                &DiarizationRef { activity: single }
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn scer_midpoint_identity_swap_is_fifty_percent() {
        // Speakers alternate frames; the slots track the true speakers in
        // the first half and swap identities at the midpoint.
        let t = 100;
        let mut ref_act = Array2::from_elem((2, t), false);
        for frame in 0..t {
            ref_act[[frame % 2, frame]] = true;
        }
        let mut hyp_act = Array2::from_elem((2, t), false);
        for frame in 0..t {
            let true_speaker = frame % 2;
            let slot = if frame < t / 2 {
                true_speaker
            } else {
                1 - true_speaker
            };
            hyp_act[[slot, frame]] = true;
        }
        let s = scer(
            &DiarizationHyp { activity: hyp_act },
            &DiarizationRef { activity: ref_act },
        )
        .unwrap();
        assert_abs_diff_eq!(s, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn counting_accuracy_cases() {
        assert_abs_diff_eq!(counting_accuracy(&[1, 2, 0], &[1, 2, 0]), 100.0);
        assert_abs_diff_eq!(counting_accuracy(&[1, 1, 1, 1], &[1, 2, 1, 2]), 50.0);
        assert_abs_diff_eq!(counting_accuracy(&[], &[]), 0.0);
    }

    #[test]
    fn coverage_check_reports_missing_ids() {
        let manifest = vec!["a".to_string(), "b".to_string()];
        let results = vec!["a".to_string()];
        let err = check_coverage(&manifest, &results).unwrap_err();
        assert!(err.to_string().contains('b'));
        assert!(check_coverage(&manifest, &["a".into(), "b".into()]).is_ok());
        assert!(check_coverage(&[], &[]).is_err());
    }

    #[test]
    fn single_perfect_sample_scores_clean() {
        let act = array![[true, true, false, false], [false, true, true, false]];
        let r0 = wav(vec![0.5, -0.5, 0.5, -0.5, 0.0, 0.5, -0.5, 0.5]);
        let r1 = wav(vec![0.2, 0.2, -0.2, -0.2, 0.2, 0.2, -0.2, -0.2]);
        let mix = wav(r0.samples.iter().zip(&r1.samples).map(|(a, b)| a + b).collect());
        let truth = SampleTruth {
            sample_id: "x".into(),
            frame_activity: act.clone(),
            block_counts: vec![2, 1],
            references: vec![r0.clone(), r1.clone()],
            mixture: mix,
        };
        let out = SystemOutput {
            sample_id: "x".into(),
            frame_activity: act,
            block_counts: vec![2, 1],
            separated: vec![r0, r1],
        };
        let report = score_testset(&[(truth, out)]).unwrap();
        assert_abs_diff_eq!(report.der.der, 0.0);
        assert_abs_diff_eq!(report.scer_percent, 0.0);
        assert_abs_diff_eq!(report.counting_accuracy_percent, 100.0);
        assert!(report.sdr_improvement_db.unwrap() > 0.0);
        assert_eq!(report.n_sdr_pairs, 2);
    }
}
