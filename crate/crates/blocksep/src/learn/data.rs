//! Construction of training samples from waveforms.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{split_blocks, stft, StftConfig, Waveform};

use super::TrainSample;

const IRM_EPS: f64 = 1e-8;

/// How target spectrograms are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Ideal-ratio-mask times mixture magnitude (mixture-consistent; a
    /// perfect mask reaches loss zero).
    MaskedMixture,
    /// Raw source magnitude spectrograms.
    SourceMagnitude,
}

/// Builds a teacher-forcing sample from a mixture and its references.
///
/// `references` pairs each source with its training-vocabulary speaker index.
/// `active[b][s]` marks ground-truth block activity (from the meeting
/// script). The reference order defines the source indexing of the sample.
pub fn build_train_sample(
    mixture: &Waveform,
    references: &[(usize, &Waveform)],
    active: &[Vec<bool>],
    stft_cfg: &StftConfig,
    frames_per_block: usize,
    target_mode: TargetMode,
) -> Result<TrainSample> {
    let mix_spec = stft(mixture, stft_cfg)?;
    let mix_blocks = split_blocks(&mix_spec, frames_per_block);
    if active.len() != mix_blocks.len() {
        return Err(Error::ShapeMismatch(format!(
            "activity covers {} blocks, mixture has {}",
            active.len(),
            mix_blocks.len()
        )));
    }
    let mags: Vec<Array2<f64>> = mix_blocks.iter().map(|b| b.magnitude()).collect();

    let mut ref_mags: Vec<Vec<Array2<f64>>> = Vec::with_capacity(references.len());
    for (_, wav) in references {
        if wav.len() != mixture.len() {
            return Err(Error::ShapeMismatch(
                "reference length differs from mixture".into(),
            ));
        }
        let spec = stft(wav, stft_cfg)?;
        ref_mags.push(
            split_blocks(&spec, frames_per_block)
                .iter()
                .map(|b| b.magnitude())
                .collect(),
        );
    }

    let mut targets = Vec::with_capacity(mags.len());
    for (b, mag) in mags.iter().enumerate() {
        let mut block_targets = Vec::with_capacity(references.len());
        for s in 0..references.len() {
            let t = match target_mode {
                TargetMode::SourceMagnitude => ref_mags[s][b].clone(),
                TargetMode::MaskedMixture => {
                    // IRM_s · |Y|: never exceeds the actual source magnitude.
                    let mut denom = Array2::from_elem(mag.dim(), IRM_EPS);
                    for r in &ref_mags {
                        denom += &r[b];
                    }
                    let mut t = ref_mags[s][b].clone();
                    ndarray::Zip::from(&mut t).and(&denom).and(mag).for_each(
                        |t, &d, &y| {
                            *t = *t / d * y;
                        },
                    );
                    t
                }
            };
            block_targets.push(t);
        }
        targets.push(block_targets);
    }

    let sample = TrainSample {
        mags,
        targets,
        active: active.to_vec(),
        speaker_ids: references.iter().map(|(id, _)| *id).collect(),
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_mixture_targets_stay_below_mixture_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sr = 8000;
        let len = 4000;
        let a = Waveform::new((0..len).map(|_| rng.gen_range(-0.3..0.3)).collect(), sr);
        let b = Waveform::new((0..len).map(|_| rng.gen_range(-0.3..0.3)).collect(), sr);
        let mix = Waveform::new(
            a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(),
            sr,
        );
        let cfg = StftConfig::default();
        let n_blocks = cfg.n_frames(len).div_ceil(10);
        let active = vec![vec![true, true]; n_blocks];
        let sample = build_train_sample(
            &mix,
            &[(0, &a), (1, &b)],
            &active,
            &cfg,
            10,
            TargetMode::MaskedMixture,
        )
        .unwrap();
        for (b, mag) in sample.mags.iter().enumerate() {
            for s in 0..2 {
                for (t, y) in sample.targets[b][s].iter().zip(mag.iter()) {
                    assert!(*t <= *y + 1e-9);
                }
            }
        }
    }
}
