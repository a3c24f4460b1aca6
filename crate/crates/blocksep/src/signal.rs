//! Waveform ↔ time-frequency conversion, masking and block segmentation.
//!
//! All analysis uses a real-input STFT with a configurable window. Synthesis
//! is weighted overlap-add with window-square normalisation, which gives
//! perfect reconstruction on interior samples for any hop ≤ window length.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let p: f64 = self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64;
        p.sqrt()
    }
}

/// Complex T×F time-frequency representation (T frames, F = fft_size/2 + 1 bins).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<Complex64>,
    pub sample_rate: u32,
    pub hop: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }

    /// Elementwise magnitudes as a real T×F matrix.
    pub fn magnitude(&self) -> Array2<f64> {
        self.values.mapv(|c| c.norm())
    }

    /// Per-frame signal power (sum of squared bin magnitudes).
    pub fn frame_power(&self) -> Vec<f64> {
        self.values
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|c| c.norm_sqr()).sum())
            .collect()
    }
}

/// Real T×F mask with entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub values: Array2<f64>,
}

impl Mask {
    /// Wraps a matrix after validating the [0, 1] range.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "mask entries must lie in [0, 1]".into(),
            ));
        }
        Ok(Mask { values })
    }

    /// Wraps a matrix that is in range by construction (e.g. sigmoid output).
    pub fn from_unchecked(values: Array2<f64>) -> Self {
        debug_assert!(values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        Mask { values }
    }

    pub fn ones(t: usize, f: usize) -> Self {
        Mask {
            values: Array2::ones((t, f)),
        }
    }

    pub fn zeros(t: usize, f: usize) -> Self {
        Mask {
            values: Array2::zeros((t, f)),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.sum() / self.values.len() as f64
    }

    /// Mean over frequency for each frame.
    pub fn frame_means(&self) -> Vec<f64> {
        let f = self.n_bins().max(1) as f64;
        self.values
            .rows()
            .into_iter()
            .map(|r| r.sum() / f)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowType {
    /// Square root of the periodic Hann window.
    SqrtHann,
    /// Periodic Hann window.
    Hann,
    Rectangular,
}

/// STFT analysis/synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window_type: WindowType,
}

impl Default for StftConfig {
    /// 8 kHz / window 256 / hop 133: a 4-block (≈10 s) session splits into
    /// exactly four 150-frame blocks of 2.5 s each.
    fn default() -> Self {
        StftConfig {
            window_length: 256,
            hop: 133,
            fft_size: 256,
            window_type: WindowType::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_length || self.window_length > self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "need 0 < hop ({}) <= window_length ({}) <= fft_size ({})",
                self.hop, self.window_length, self.fft_size
            )));
        }
        Ok(())
    }

    /// Number of frequency bins produced by analysis.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples (no tail padding).
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_length {
            0
        } else {
            (len - self.window_length) / self.hop + 1
        }
    }

    /// Number of samples spanned by exactly `n_frames` frames.
    pub fn span_samples(&self, n_frames: usize) -> usize {
        if n_frames == 0 {
            0
        } else {
            self.window_length + self.hop * (n_frames - 1)
        }
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length;
        match self.window_type {
            WindowType::Rectangular => vec![1.0; n],
            WindowType::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            WindowType::SqrtHann => (0..n)
                .map(|i| {
                    (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).sqrt()
                })
                .collect(),
        }
    }
}

/// Short-time Fourier transform. Frames start at multiples of the hop; the
/// tail that does not fill a whole window is dropped.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.len() < cfg.window_length {
        return Err(Error::SignalTooShort {
            got: w.len(),
            need: cfg.window_length,
        });
    }
    let n_frames = cfg.n_frames(w.len());
    let n_bins = cfg.n_bins();
    let window = cfg.window();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut values = Array2::zeros((n_frames, n_bins));
    let mut buf = vec![Complex64::default(); cfg.fft_size];

    for t in 0..n_frames {
        let start = t * cfg.hop;
        for i in 0..cfg.fft_size {
            let s = if i < cfg.window_length {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex64::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (f, v) in buf.iter().take(n_bins).enumerate() {
            values[[t, f]] = *v;
        }
    }

    Ok(Spectrogram {
        values,
        sample_rate: w.sample_rate,
        hop: cfg.hop,
    })
}

/// Inverse STFT by weighted overlap-add with window-square normalisation.
pub fn istft(s: &Spectrogram, cfg: &StftConfig) -> Result<Waveform> {
    cfg.validate()?;
    if s.n_bins() != cfg.n_bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins, config expects {}",
            s.n_bins(),
            cfg.n_bins()
        )));
    }
    let n_frames = s.n_frames();
    let len = cfg.span_samples(n_frames);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    if n_frames == 0 {
        return Ok(Waveform::new(out, s.sample_rate));
    }

    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(cfg.fft_size);
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    let scale = 1.0 / cfg.fft_size as f64;

    for t in 0..n_frames {
        // Rebuild the full spectrum from the one-sided half.
        for f in 0..cfg.n_bins() {
            buf[f] = s.values[[t, f]];
        }
        for f in cfg.n_bins()..cfg.fft_size {
            buf[f] = s.values[[t, cfg.fft_size - f]].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..cfg.window_length {
            out[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }

    for (o, n) in out.iter_mut().zip(&norm) {
        if *n > 1e-12 {
            *o /= *n;
        }
    }

    Ok(Waveform::new(out, s.sample_rate))
}

/// Elementwise product of a mask with the complex values: magnitudes are
/// scaled, phases are kept.
pub fn apply_mask(m: &Mask, s: &Spectrogram) -> Result<Spectrogram> {
    if m.values.dim() != s.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mask is {:?}, spectrogram is {:?}",
            m.values.dim(),
            s.values.dim()
        )));
    }
    let mut values = s.values.clone();
    values.zip_mut_with(&m.values, |c, &m| *c *= m);
    Ok(Spectrogram {
        values,
        sample_rate: s.sample_rate,
        hop: s.hop,
    })
}

/// Splits a spectrogram into consecutive non-overlapping blocks of
/// `frames_per_block` frames. The last block may be shorter; concatenating
/// the output reproduces the input exactly.
pub fn split_blocks(s: &Spectrogram, frames_per_block: usize) -> Vec<Spectrogram> {
    assert!(frames_per_block >= 1, "frames_per_block must be >= 1");
    let t = s.n_frames();
    let mut blocks = Vec::with_capacity(t.div_ceil(frames_per_block.max(1)));
    let mut start = 0;
    while start < t {
        let end = (start + frames_per_block).min(t);
        blocks.push(Spectrogram {
            values: s
                .values
                .slice(ndarray::s![start..end, ..])
                .to_owned(),
            sample_rate: s.sample_rate,
            hop: s.hop,
        });
        start = end;
    }
    blocks
}

/// Reads a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Audio(format!(
            "{}: expected 16-bit PCM",
            path.display()
        )));
    }
    let samples: Vec<f64> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes a mono 16-bit PCM WAV file; samples are clamped to [-1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
