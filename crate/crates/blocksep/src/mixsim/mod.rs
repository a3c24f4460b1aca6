//! Meeting-like mixture simulation with per-block ground truth.
//!
//! Scripts follow the experimental protocol: first-half blocks hold one or
//! two speakers (50% each), second-half blocks hold zero, one or two
//! speakers with probabilities 15% / 55% / 30%, an overall power ratio drawn
//! uniformly from [0, 5] dB, and a homogeneous style where one speaker talks
//! throughout while the other joins during the first half and stays.

mod synth;

pub use synth::{synth_utterance, SpeakerProfile};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::signal::{read_wav, stft, write_wav, StftConfig, Waveform};

/// Library of per-speaker source material.
#[derive(Debug, Clone)]
pub struct SourceLibrary {
    pub speakers: BTreeMap<String, Vec<Waveform>>,
    pub sample_rate: u32,
}

impl SourceLibrary {
    /// Generates a library of synthetic speakers. Fundamentals are spread
    /// log-uniformly over the pitch range with per-speaker jitter so any two
    /// speakers remain spectrally distinct.
    pub fn synthetic(
        n_speakers: usize,
        utterances_per_speaker: usize,
        seed: u64,
        sample_rate: u32,
        id_prefix: &str,
    ) -> Self {
        let mut speakers = BTreeMap::new();
        let lo: f64 = 95.0;
        let hi: f64 = 260.0;
        for k in 0..n_speakers {
            let id = format!("{id_prefix}{k:03}");
            let spk_seed = mix_seed(seed, k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(spk_seed);
            let pos = if n_speakers > 1 {
                k as f64 / (n_speakers - 1) as f64
            } else {
                0.5
            };
            let f0 = lo * (hi / lo).powf(pos) * rng.gen_range(0.97..1.03);
            let profile = SpeakerProfile::from_seed(spk_seed, Some(f0));
            let utterances = (0..utterances_per_speaker)
                .map(|_| {
                    let secs = rng.gen_range(1.2..3.0);
                    let len = (secs * sample_rate as f64) as usize;
                    Waveform::new(
                        synth_utterance(&profile, len, sample_rate, &mut rng),
                        sample_rate,
                    )
                })
                .collect();
            speakers.insert(id, utterances);
        }
        SourceLibrary {
            speakers,
            sample_rate,
        }
    }

    /// Disjoint train/test libraries (non-overlapping speaker identities).
    pub fn synthetic_split(
        n_train: usize,
        n_test: usize,
        seed: u64,
        sample_rate: u32,
    ) -> (Self, Self) {
        let train = Self::synthetic(n_train, 10, seed, sample_rate, "trn");
        let test = Self::synthetic(n_test, 10, mix_seed(seed, 0xBEEF), sample_rate, "tst");
        (train, test)
    }

    /// Loads a library from a directory with one subdirectory of WAV files
    /// per speaker.
    pub fn from_dir(root: &Path) -> Result<Self> {
        let mut speakers = BTreeMap::new();
        let mut sample_rate = 0u32;
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let id = dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("wav"))
                .collect();
            files.sort();
            let mut utterances = Vec::new();
            for f in files {
                let w = read_wav(&f)?;
                if sample_rate == 0 {
                    sample_rate = w.sample_rate;
                } else if w.sample_rate != sample_rate {
                    return Err(Error::Audio(format!(
                        "{}: sample rate {} differs from {}",
                        f.display(),
                        w.sample_rate,
                        sample_rate
                    )));
                }
                utterances.push(w);
            }
            if !utterances.is_empty() {
                speakers.insert(id, utterances);
            }
        }
        if speakers.is_empty() {
            return Err(Error::InsufficientMaterial(format!(
                "no speaker subdirectories with WAV files under {}",
                root.display()
            )));
        }
        Ok(SourceLibrary {
            speakers,
            sample_rate,
        })
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        self.speakers.keys().cloned().collect()
    }
}

/// Occupancy distributions for script sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityProbs {
    /// P(1 speaker), P(2 speakers) for first-half blocks.
    pub first_half: [f64; 2],
    /// P(0), P(1), P(2 speakers) for second-half blocks.
    pub second_half: [f64; 3],
}

impl Default for ActivityProbs {
    fn default() -> Self {
        ActivityProbs {
            first_half: [0.5, 0.5],
            second_half: [0.15, 0.55, 0.30],
        }
    }
}

impl ActivityProbs {
    pub fn validate(&self) -> Result<()> {
        let s1: f64 = self.first_half.iter().sum();
        let s2: f64 = self.second_half.iter().sum();
        if (s1 - 1.0).abs() > 1e-9 || (s2 - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "activity distributions must sum to 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    /// Training-matched statistics (4-block mixtures).
    Matched,
    /// One speaker throughout, the second joins in the first half and stays.
    Homogeneous,
    /// Matched statistics over longer sessions.
    Conversation,
}

impl std::fmt::Display for Style {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Style::Matched => write!(f, "matched"),
            Style::Homogeneous => write!(f, "homogeneous"),
            Style::Conversation => write!(f, "conversation"),
        }
    }
}

/// One speaker's contiguous activity span with its mixing gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptSpan {
    pub speaker: String,
    pub start_block: usize,
    /// Exclusive.
    pub end_block: usize,
    pub gain_db: f64,
}

/// Per-block ground-truth speaker activity plus mixing gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeetingScript {
    pub n_blocks: usize,
    pub style: Style,
    /// The two cast speakers, in source order.
    pub speakers: Vec<String>,
    pub spans: Vec<ScriptSpan>,
}

impl MeetingScript {
    /// Activity matrix: `[speaker][block]` in cast order.
    pub fn block_activity(&self) -> Vec<Vec<bool>> {
        self.speakers
            .iter()
            .map(|id| {
                let mut row = vec![false; self.n_blocks];
                for span in self.spans.iter().filter(|s| &s.speaker == id) {
                    for b in span.start_block..span.end_block.min(self.n_blocks) {
                        row[b] = true;
                    }
                }
                row
            })
            .collect()
    }

    /// `[block][speaker]` activity in cast order.
    pub fn activity_per_block(&self) -> Vec<Vec<bool>> {
        let rows = self.block_activity();
        (0..self.n_blocks)
            .map(|b| rows.iter().map(|r| r[b]).collect())
            .collect()
    }

    pub fn occupancy(&self, block: usize) -> usize {
        self.activity_per_block()[block].iter().filter(|&&a| a).count()
    }

    pub fn gain_db(&self, speaker: &str) -> f64 {
        self.spans
            .iter()
            .find(|s| s.speaker == speaker)
            .map(|s| s.gain_db)
            .unwrap_or(0.0)
    }

    pub fn max_simultaneous(&self) -> usize {
        (0..self.n_blocks).map(|b| self.occupancy(b)).max().unwrap_or(0)
    }
}

fn draw_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let x: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples a meeting script for a two-speaker cast.
///
/// Matched/conversation styles draw the per-block occupancy from the
/// configured distributions (first-half blocks never silent); the
/// homogeneous style keeps speaker A active throughout while speaker B
/// starts at a random block in the first half and continues till the end.
pub fn sample_script(
    rng_seed: u64,
    n_blocks: usize,
    probs: &ActivityProbs,
    style: Style,
    cast: [&str; 2],
) -> Result<MeetingScript> {
    if n_blocks < 2 {
        return Err(Error::InvalidArgument(
            "scripts need at least 2 blocks".into(),
        ));
    }
    probs.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let half = n_blocks / 2;

    // Power ratio in [0, 5] dB; which speaker is louder is random.
    let ratio = rng.gen_range(0.0..5.0);
    let first_louder = rng.gen_bool(0.5);
    let gains = if first_louder { [ratio, 0.0] } else { [0.0, ratio] };

    let mut active = vec![[false; 2]; n_blocks];
    match style {
        Style::Homogeneous => {
            let join = rng.gen_range(0..half.max(1));
            for (b, slot) in active.iter_mut().enumerate() {
                slot[0] = true;
                slot[1] = b >= join;
            }
        }
        Style::Matched | Style::Conversation => {
            for (b, slot) in active.iter_mut().enumerate() {
                let occupancy = if b < half {
                    1 + draw_index(&mut rng, &probs.first_half)
                } else {
                    draw_index(&mut rng, &probs.second_half)
                };
                match occupancy {
                    0 => {}
                    1 => slot[rng.gen_range(0..2usize)] = true,
                    _ => {
                        slot[0] = true;
                        slot[1] = true;
                    }
                }
            }
        }
    }

    // Contiguous runs become spans.
    let mut spans = Vec::new();
    for (s, id) in cast.iter().enumerate() {
        let mut b = 0;
        while b < n_blocks {
            if active[b][s] {
                let start = b;
                while b < n_blocks && active[b][s] {
                    b += 1;
                }
                spans.push(ScriptSpan {
                    speaker: id.to_string(),
                    start_block: start,
                    end_block: b,
                    gain_db: gains[s],
                });
            } else {
                b += 1;
            }
        }
    }

    Ok(MeetingScript {
        n_blocks,
        style,
        speakers: cast.iter().map(|s| s.to_string()).collect(),
        spans,
    })
}

/// A rendered mixture with references and frame-level ground truth.
#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub mixture: Waveform,
    /// References in cast order (zero where the speaker is inactive).
    pub references: Vec<(String, Waveform)>,
    /// `[speaker][frame]` activity from reference energy.
    pub frame_activity: Array2<bool>,
    pub script: MeetingScript,
}

/// Reference RMS level of the louder speaker, keeping the 16-bit mixture
/// comfortably below full scale.
const BASE_RMS: f64 = 0.04;
/// Frame activity threshold below the per-speaker peak frame energy.
const ACTIVITY_FLOOR_DB: f64 = 40.0;

/// Renders a script against a source library.
///
/// Each speaker's active spans are filled with utterances separated by gaps
/// of at most 100 ms, scaled so the two speakers' active-region powers match
/// the drawn ratio. The mixture is the exact sample-wise sum of the
/// references (plus an optional noise floor).
pub fn render_mixture(
    script: &MeetingScript,
    lib: &SourceLibrary,
    rng_seed: u64,
    stft_cfg: &StftConfig,
    frames_per_block: usize,
    noise_floor_db: Option<f64>,
) -> Result<MixtureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n_frames = script.n_blocks * frames_per_block;
    let total = stft_cfg.span_samples(n_frames);
    let sr = lib.sample_rate;
    let block_hop = frames_per_block * stft_cfg.hop;

    let mut references = Vec::with_capacity(script.speakers.len());
    for id in &script.speakers {
        let utterances = lib
            .speakers
            .get(id)
            .filter(|u| !u.is_empty())
            .ok_or_else(|| {
                Error::InsufficientMaterial(format!("no utterances for speaker {id}"))
            })?;
        let mut samples = vec![0.0; total];
        let mut any_active = false;
        for span in script.spans.iter().filter(|s| &s.speaker == id) {
            any_active = true;
            let start = span.start_block * block_hop;
            let end = if span.end_block >= script.n_blocks {
                total
            } else {
                span.end_block * block_hop
            };
            fill_span(&mut samples[start..end], utterances, &mut rng);
        }
        if any_active {
            // Normalise active power to 1, then apply the span gain.
            let power: f64 =
                samples.iter().map(|v| v * v).sum::<f64>() / active_len(&samples).max(1) as f64;
            let gain = script.gain_db(id);
            let scale = BASE_RMS * 10f64.powf(gain / 20.0) / power.sqrt().max(1e-12);
            for v in &mut samples {
                *v *= scale;
            }
        }
        references.push((id.clone(), Waveform::new(samples, sr)));
    }

    let mut mixture = vec![0.0; total];
    for (_, r) in &references {
        for (m, v) in mixture.iter_mut().zip(&r.samples) {
            *m += v;
        }
    }
    if let Some(snr_db) = noise_floor_db {
        let sig_power: f64 =
            mixture.iter().map(|v| v * v).sum::<f64>() / mixture.len().max(1) as f64;
        let noise_rms = (sig_power.max(1e-12)).sqrt() * 10f64.powf(-snr_db / 20.0);
        for m in &mut mixture {
            *m += noise_rms * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mixture = Waveform::new(mixture, sr);

    // Frame-level activity from reference energy.
    let mut frame_activity = Array2::from_elem((references.len(), n_frames), false);
    for (s, (_, r)) in references.iter().enumerate() {
        let spec = stft(r, stft_cfg)?;
        let powers = spec.frame_power();
        let peak = powers.iter().cloned().fold(0.0f64, f64::max);
        if peak <= 0.0 {
            continue;
        }
        let floor = peak * 10f64.powf(-ACTIVITY_FLOOR_DB / 10.0);
        for (t, &p) in powers.iter().enumerate().take(n_frames) {
            frame_activity[[s, t]] = p > floor;
        }
    }

    Ok(MixtureSample {
        mixture,
        references,
        frame_activity,
        script: script.clone(),
    })
}

fn active_len(samples: &[f64]) -> usize {
    samples.iter().filter(|&&v| v != 0.0).count()
}

/// Fills a span with utterances separated by gaps of up to 100 ms.
fn fill_span(span: &mut [f64], utterances: &[Waveform], rng: &mut impl Rng) {
    let sr = 8000.0;
    let max_gap = (0.1 * sr) as usize;
    let fade = 16;
    let mut pos = rng.gen_range(0..=max_gap.min(span.len().saturating_sub(1)));
    while pos < span.len() {
        let utt = &utterances[rng.gen_range(0..utterances.len())];
        let avail = span.len() - pos;
        let take = utt.len().min(avail);
        span[pos..pos + take].copy_from_slice(&utt.samples[..take]);
        // Short linear fade at a truncation point to avoid a click.
        if take < utt.len() && take > fade {
            for i in 0..fade {
                span[pos + take - fade + i] *= 1.0 - i as f64 / fade as f64;
            }
        }
        pos += take + rng.gen_range(0..=max_gap);
    }
}

/// Dataset generation request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub style: Style,
    pub n_blocks: usize,
    pub seed: u64,
    pub frames_per_block: usize,
    pub noise_floor_db: Option<f64>,
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub mixture_path: String,
    /// Speaker id → reference path, in cast order.
    pub references: Vec<(String, String)>,
    pub script: MeetingScript,
    pub style: Style,
    pub seed: u64,
    pub sample_rate: u32,
}

/// Generates a dataset on disk: WAV files plus a JSON-lines manifest.
/// Deterministic for a given spec; errors if the manifest already exists.
pub fn generate_dataset(
    spec: &DatasetSpec,
    lib: &SourceLibrary,
    stft_cfg: &StftConfig,
    out_dir: &Path,
) -> Result<Vec<ManifestRecord>> {
    let manifest_path = out_dir.join("manifest.jsonl");
    if manifest_path.exists() {
        return Err(Error::PathCollision(manifest_path.display().to_string()));
    }
    std::fs::create_dir_all(out_dir.join("audio"))?;

    let ids = lib.speaker_ids();
    if ids.len() < 2 {
        return Err(Error::InsufficientMaterial(
            "need at least two speakers".into(),
        ));
    }

    let records: Vec<(ManifestRecord, MixtureSample)> = (0..spec.n_samples)
        .into_par_iter()
        .map(|idx| -> Result<(ManifestRecord, MixtureSample)> {
            let sample_seed = mix_seed(spec.seed, idx as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let mut cast = ids.clone();
            cast.shuffle(&mut rng);
            let cast = [cast[0].as_str(), cast[1].as_str()];
            let script = sample_script(
                mix_seed(sample_seed, 1),
                spec.n_blocks,
                &ActivityProbs::default(),
                spec.style,
                cast,
            )?;
            let sample = render_mixture(
                &script,
                lib,
                mix_seed(sample_seed, 2),
                stft_cfg,
                spec.frames_per_block,
                spec.noise_floor_db,
            )?;
            let sample_id = format!("{}_{idx:05}", spec.style);
            let record = ManifestRecord {
                sample_id: sample_id.clone(),
                mixture_path: format!("audio/{sample_id}_mix.wav"),
                references: sample
                    .references
                    .iter()
                    .enumerate()
                    .map(|(s, (id, _))| (id.clone(), format!("audio/{sample_id}_src{s}.wav")))
                    .collect(),
                script: script.clone(),
                style: spec.style,
                seed: sample_seed,
                sample_rate: lib.sample_rate,
            };
            Ok((record, sample))
        })
        .collect::<Result<_>>()?;

    // Quantise references to the 16-bit grid first and write the mixture as
    // their exact sum, so the on-disk invariant mixture == Σ references
    // holds bit-exactly.
    for (record, sample) in &records {
        let mut sum = vec![0.0f64; sample.mixture.len()];
        for (s, (_, r)) in sample.references.iter().enumerate() {
            let q: Vec<f64> = r
                .samples
                .iter()
                .map(|&v| {
                    (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) / 32768.0
                })
                .collect();
            for (acc, v) in sum.iter_mut().zip(&q) {
                *acc += v;
            }
            write_wav(
                &out_dir.join(&record.references[s].1),
                &Waveform::new(q, sample.mixture.sample_rate),
            )?;
        }
        let mix = if sample.script.max_simultaneous() > 0 && spec.noise_floor_db.is_none() {
            Waveform::new(sum, sample.mixture.sample_rate)
        } else {
            sample.mixture.clone()
        };
        write_wav(&out_dir.join(&record.mixture_path), &mix)?;
    }

    let mut f = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    let records: Vec<ManifestRecord> = records.into_iter().map(|(r, _)| r).collect();
    for r in &records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(records)
}

/// Reads a JSON-lines manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// SplitMix64-style seed derivation for per-sample determinism.
pub(crate) fn mix_seed(seed: u64, idx: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15)
        .wrapping_add(idx.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
