//! Synthetic speaker voices.
//!
//! Each speaker identity maps to a fixed vocal profile: a fundamental
//! frequency, a formant-like spectral envelope with a broadband floor, a
//! spectral tilt and a harmonic/noise balance. Utterances are harmonic combs
//! plus envelope-filtered noise with a slow syllabic amplitude modulation.
//! The broadband floor keeps every frequency bin alive while a source is
//! active, which matters for mask-based activity decisions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Fixed vocal characteristics of one synthetic speaker.
#[derive(Debug, Clone)]
pub struct SpeakerProfile {
    pub f0: f64,
    /// (center Hz, width Hz, amplitude) formant bumps.
    pub bumps: Vec<(f64, f64, f64)>,
    pub tilt_db_per_oct: f64,
    /// Harmonic vs noise excitation balance in [0, 1].
    pub harmonic_frac: f64,
    /// Syllabic modulation rate in Hz.
    pub am_rate: f64,
}

/// Relative level of the broadband envelope floor (−20 dB).
const ENV_FLOOR: f64 = 0.1;

impl SpeakerProfile {
    /// Derives a profile from a seed. `f0_hint` pins the fundamental (used
    /// to spread a library across the pitch range); other traits are drawn
    /// from the seed.
    pub fn from_seed(seed: u64, f0_hint: Option<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = f0_hint.unwrap_or_else(|| {
            let lo: f64 = 95.0;
            let hi: f64 = 260.0;
            lo * (hi / lo).powf(rng.gen_range(0.0..1.0))
        });
        let n_bumps = 3;
        let bumps = (0..n_bumps)
            .map(|_| {
                let center = 300.0 * (3400.0_f64 / 300.0).powf(rng.gen_range(0.0..1.0));
                let width = rng.gen_range(120.0..420.0);
                let amp = rng.gen_range(0.6..1.0);
                (center, width, amp)
            })
            .collect();
        SpeakerProfile {
            f0,
            bumps,
            tilt_db_per_oct: rng.gen_range(-6.0..-1.0),
            harmonic_frac: rng.gen_range(0.4..0.7),
            am_rate: rng.gen_range(2.5..4.5),
        }
    }

    /// Spectral envelope at `f_hz`, normalised to a unit peak with a
    /// broadband floor.
    pub fn envelope(&self, f_hz: f64) -> f64 {
        let raw = self.raw_envelope(f_hz);
        let peak = self.envelope_peak();
        (raw / peak).max(ENV_FLOOR)
    }

    fn raw_envelope(&self, f_hz: f64) -> f64 {
        let mut v = 0.05;
        for &(c, w, a) in &self.bumps {
            let d = (f_hz - c) / w;
            v += a * (-0.5 * d * d).exp();
        }
        let octaves = (f_hz.max(100.0) / 100.0).log2();
        v * 10f64.powf(self.tilt_db_per_oct * octaves / 20.0)
    }

    fn envelope_peak(&self) -> f64 {
        let mut peak = 0.0f64;
        let mut f = 50.0;
        while f <= 4000.0 {
            peak = peak.max(self.raw_envelope(f));
            f += 25.0;
        }
        peak.max(1e-9)
    }
}

/// Synthesises one utterance at unit RMS.
pub fn synth_utterance(
    profile: &SpeakerProfile,
    len: usize,
    sample_rate: u32,
    rng: &mut impl Rng,
) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;

    // Harmonic comb with vibrato, partial amplitudes from the envelope.
    let f0_utt = profile.f0 * rng.gen_range(0.96..1.04);
    let n_partials = ((nyquist - 200.0) / f0_utt).floor().max(1.0) as usize;
    let vib_rate = rng.gen_range(4.5..6.5);
    let vib_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut phases: Vec<f64> = (0..n_partials)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let amps: Vec<f64> = (1..=n_partials)
        .map(|k| profile.envelope(k as f64 * f0_utt))
        .collect();
    let mut harmonic = vec![0.0; len];
    for (t, h) in harmonic.iter_mut().enumerate() {
        let vib = 1.0 + 0.025 * (std::f64::consts::TAU * vib_rate * t as f64 / sr + vib_phase).sin();
        let f0_t = f0_utt * vib;
        let mut acc = 0.0;
        for k in 0..n_partials {
            acc += amps[k] * phases[k].sin();
            phases[k] += std::f64::consts::TAU * (k + 1) as f64 * f0_t / sr;
        }
        *h = acc;
    }

    // Envelope-filtered noise.
    let mut noise: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut noise);
    for (k, bin) in noise.iter_mut().enumerate() {
        let f = if k <= len / 2 {
            k as f64 * sr / len as f64
        } else {
            (len - k) as f64 * sr / len as f64
        };
        *bin *= profile.envelope(f);
    }
    planner.plan_fft_inverse(len).process(&mut noise);
    let scale = 1.0 / len as f64;
    let noise: Vec<f64> = noise.iter().map(|c| c.re * scale).collect();

    // Mix excitations at unit RMS each, then apply syllabic modulation.
    let rms = |x: &[f64]| {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
            .sqrt()
            .max(1e-12)
    };
    let h_rms = rms(&harmonic);
    let n_rms = rms(&noise);
    let hf = profile.harmonic_frac;
    let mut out: Vec<f64> = harmonic
        .iter()
        .zip(&noise)
        .map(|(h, n)| hf * h / h_rms + (1.0 - hf) * n / n_rms)
        .collect();

    let am = syllabic_envelope(len, sr, profile.am_rate, rng);
    for (o, a) in out.iter_mut().zip(&am) {
        *o *= a;
    }
    let out_rms = rms(&out);
    for o in &mut out {
        *o /= out_rms;
    }
    out
}

/// Slow amplitude contour in [0.35, 1].
fn syllabic_envelope(len: usize, sr: f64, rate_hz: f64, rng: &mut impl Rng) -> Vec<f64> {
    let alpha = (-std::f64::consts::TAU * rate_hz / sr).exp();
    let mut state = 0.5;
    let mut raw = Vec::with_capacity(len);
    for _ in 0..len {
        let x: f64 = rng.sample::<f64, _>(StandardNormal);
        state = alpha * state + (1.0 - alpha) * x.abs() * 3.0;
        raw.push(state);
    }
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-9);
    raw.iter().map(|v| 0.35 + 0.65 * (v - min) / span).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_is_deterministic() {
        let a = SpeakerProfile::from_seed(7, None);
        let b = SpeakerProfile::from_seed(7, None);
        assert_eq!(a.f0, b.f0);
        assert_eq!(a.bumps, b.bumps);
    }

    #[test]
    fn envelope_has_broadband_floor_and_unit_peak() {
        let p = SpeakerProfile::from_seed(3, Some(140.0));
        let mut peak = 0.0f64;
        let mut f = 50.0;
        while f <= 4000.0 {
            let e = p.envelope(f);
            assert!(e >= ENV_FLOOR - 1e-12);
            peak = peak.max(e);
            f += 25.0;
        }
        assert!((peak - 1.0).abs() < 0.05);
    }

    #[test]
    fn utterance_has_unit_rms_and_finite_samples() {
        let p = SpeakerProfile::from_seed(11, Some(120.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = synth_utterance(&p, 8000, 8000, &mut rng);
        assert_eq!(u.len(), 8000);
        let rms = (u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-9);
        assert!(u.iter().all(|v| v.is_finite()));
    }
}
