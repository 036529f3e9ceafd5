//! Log-mel audio frontend.
//!
//! Waveforms are framed without padding, windowed with a periodic Hann
//! window, transformed with a real FFT and projected onto a triangular
//! mel filterbank. Features are `ln(mel_magnitude + log_floor)`, with no
//! pre-emphasis and no per-utterance normalization.
//!
//! [`invert_features`] goes the other way for listening purposes: a
//! pseudo-inverse of the filterbank recovers a linear magnitude spectrogram
//! and Griffin-Lim iterations estimate a phase for it.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"TFF1";

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    /// A sinusoid of the given frequency and amplitude.
    pub fn sine(freq_hz: f64, amplitude: f64, seconds: f64, sample_rate: u32) -> Self {
        let len = (seconds * sample_rate as f64).round() as usize;
        let samples = (0..len)
            .map(|n| (amplitude * (2.0 * PI * freq_hz * n as f64 / sample_rate as f64).sin()) as f32)
            .collect();
        Self { samples, sample_rate }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Reads a single-channel WAV file (16-bit integer or 32-bit float).
    pub fn read_wav<P: AsRef<Path>>(path: P) -> Result<Self> {
        let reader = hound::WavReader::open(path)?;
        Self::from_wav_reader(reader)
    }

    pub fn from_wav_bytes(bytes: &[u8]) -> Result<Self> {
        let reader = hound::WavReader::new(std::io::Cursor::new(bytes))?;
        Self::from_wav_reader(reader)
    }

    fn from_wav_reader<R: Read>(reader: hound::WavReader<R>) -> Result<Self> {
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Format(format!(
                "expected mono audio, found {} channels",
                spec.channels
            )));
        }
        let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .into_samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<Result<_, _>>()?,
            (hound::SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<Result<_, _>>()?,
            (fmt, bits) => {
                return Err(Error::Format(format!(
                    "unsupported sample format {fmt:?} with {bits} bits"
                )))
            }
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM, clamping to [-1, 1].
    pub fn write_wav<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop_length: usize,
    pub mel_bins: usize,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_length: 1024,
            hop_length: 640,
            mel_bins: 80,
            fft_size: 1024,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop_length == 0 || self.mel_bins == 0 {
            return Err(Error::Config(
                "sample_rate, hop_length and mel_bins must be positive".into(),
            ));
        }
        if !(self.hop_length <= self.window_length && self.window_length <= self.fft_size) {
            return Err(Error::Config(format!(
                "need hop_length <= window_length <= fft_size, got {} / {} / {}",
                self.hop_length, self.window_length, self.fft_size
            )));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_length as f64
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames for `num_samples` samples; zero if shorter than a window.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.window_length {
            0
        } else {
            (num_samples - self.window_length) / self.hop_length + 1
        }
    }

    pub fn config_hash(&self) -> String {
        let canonical = format!(
            "sr={};win={};hop={};mel={};fft={};floor={:e}",
            self.sample_rate, self.window_length, self.hop_length, self.mel_bins, self.fft_size, self.log_floor
        );
        binio::short_hash(canonical.as_bytes())
    }
}

/// Row-major F x D matrix of log-mel frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub dim: usize,
    pub frame_rate: f64,
    /// Hash of the producing [`FrontendConfig`]; not stored in the container.
    pub config_hash: Option<String>,
}

impl FrameFeatureSequence {
    pub fn new(frames: Vec<f32>, dim: usize, frame_rate: f64) -> Result<Self> {
        if dim == 0 || frames.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: frames.len(),
            });
        }
        if let Some(index) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            num_frames: frames.len() / dim,
            frames,
            dim,
            frame_rate,
            config_hash: None,
        })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_frames(&self) -> impl Iterator<Item = &[f32]> {
        self.frames.chunks_exact(self.dim)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        binio::write_u32(w, self.num_frames as u32)?;
        binio::write_u32(w, self.dim as u32)?;
        binio::write_f64(w, self.frame_rate)?;
        binio::write_f32_slice(w, &self.frames)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, FEATURE_MAGIC)?;
        let num_frames = binio::read_u32(r)? as usize;
        let dim = binio::read_u32(r)? as usize;
        let frame_rate = binio::read_f64(r)?;
        let frames = binio::read_f32_vec(r, num_frames * dim)?;
        binio::expect_eof(r)?;
        let seq = Self::new(frames, dim, frame_rate)?;
        if seq.num_frames != num_frames {
            return Err(Error::Format("frame count does not match payload".into()));
        }
        Ok(seq)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank on the HTK mel scale between 0 Hz and Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// mel_bins x num_bins, row-major.
    pub weights: Vec<f64>,
    pub mel_bins: usize,
    pub num_bins: usize,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let num_bins = cfg.num_bins();
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.mel_bins + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.mel_bins + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; cfg.mel_bins * num_bins];
        for m in 0..cfg.mel_bins {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..num_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                weights[m * num_bins + k] = w;
            }
        }
        Self {
            weights,
            mel_bins: cfg.mel_bins,
            num_bins,
            centers_hz: edges[1..=cfg.mel_bins].to_vec(),
        }
    }

    fn apply(&self, magnitude: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.num_bins..(m + 1) * self.num_bins];
            *o = row.iter().zip(magnitude).map(|(w, x)| w * x).sum();
        }
    }

    /// Moore-Penrose pseudo-inverse, num_bins x mel_bins row-major.
    pub fn pseudo_inverse(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.mel_bins, self.num_bins, &self.weights);
        let pinv = m.pseudo_inverse(1e-10).expect("pseudo-inverse with positive epsilon");
        let mut out = vec![0.0; self.num_bins * self.mel_bins];
        for r in 0..self.num_bins {
            for c in 0..self.mel_bins {
                out[r * self.mel_bins + c] = pinv[(r, c)];
            }
        }
        out
    }
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Short-time Fourier transform bound to one frontend configuration.
struct Stft {
    cfg: FrontendConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(cfg: &FrontendConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg: cfg.clone(),
            window: hann(cfg.window_length),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        }
    }

    /// Half spectrum (num_bins values) of each frame.
    fn analyze(&self, samples: &[f64], num_frames: usize) -> Vec<Vec<Complex<f64>>> {
        let cfg = &self.cfg;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        (0..num_frames)
            .map(|f| {
                let start = f * cfg.hop_length;
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                for (n, w) in self.window.iter().enumerate() {
                    buf[n] = Complex::new(samples[start + n] * w, 0.0);
                }
                self.forward.process(&mut buf);
                buf[..cfg.num_bins()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of half spectra.
    fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let cfg = &self.cfg;
        let n_fft = cfg.fft_size;
        let len = (spectra.len().saturating_sub(1)) * cfg.hop_length + cfg.window_length;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for (f, half) in spectra.iter().enumerate() {
            for k in 0..n_fft {
                buf[k] = if k < half.len() {
                    half[k]
                } else {
                    half[n_fft - k].conj()
                };
            }
            // DC and Nyquist of a real signal are real.
            buf[0].im = 0.0;
            if n_fft % 2 == 0 {
                buf[n_fft / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = f * cfg.hop_length;
            for (n, w) in self.window.iter().enumerate() {
                out[start + n] += buf[n].re / n_fft as f64 * w;
                norm[start + n] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o = if *n > 1e-8 { *o / n } else { 0.0 };
        }
        out
    }
}

/// Computes log-mel features for a waveform.
pub fn extract_features(wave: &Waveform, cfg: &FrontendConfig) -> Result<FrameFeatureSequence> {
    cfg.validate()?;
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch {
            wave: wave.sample_rate,
            expected: cfg.sample_rate,
        });
    }
    if let Some(index) = wave.samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if wave.samples.len() < cfg.window_length {
        return Err(Error::TooShort {
            len: wave.samples.len(),
            window: cfg.window_length,
        });
    }
    let num_frames = cfg.num_frames(wave.samples.len());
    let samples: Vec<f64> = wave.samples.iter().map(|&s| s as f64).collect();
    let stft = Stft::new(cfg);
    let bank = MelFilterbank::new(cfg);
    let spectra = stft.analyze(&samples, num_frames);

    let mut frames = Vec::with_capacity(num_frames * cfg.mel_bins);
    let mut magnitude = vec![0.0; cfg.num_bins()];
    let mut mel = vec![0.0; cfg.mel_bins];
    for spectrum in &spectra {
        for (m, c) in magnitude.iter_mut().zip(spectrum) {
            *m = c.norm();
        }
        bank.apply(&magnitude, &mut mel);
        frames.extend(mel.iter().map(|&v| (v + cfg.log_floor).ln() as f32));
    }
    Ok(FrameFeatureSequence {
        frames,
        num_frames,
        dim: cfg.mel_bins,
        frame_rate: cfg.frame_rate(),
        config_hash: Some(cfg.config_hash()),
    })
}

/// Result of [`invert_features_traced`].
#[derive(Debug, Clone)]
pub struct Inversion {
    pub wave: Waveform,
    /// Spectral convergence after each iteration; entry 0 is the zero-phase start.
    pub errors: Vec<f64>,
}

/// Linear magnitude spectrogram implied by log-mel features (frames x num_bins).
pub fn features_to_magnitude(features: &FrameFeatureSequence, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if features.dim != cfg.mel_bins {
        return Err(Error::DimensionMismatch {
            expected: cfg.mel_bins,
            got: features.dim,
        });
    }
    let bank = MelFilterbank::new(cfg);
    let pinv = bank.pseudo_inverse();
    let num_bins = cfg.num_bins();
    Ok(features
        .iter_frames()
        .map(|frame| {
            let mel: Vec<f64> = frame
                .iter()
                .map(|&v| ((v as f64).exp() - cfg.log_floor).max(0.0))
                .collect();
            (0..num_bins)
                .map(|k| {
                    let row = &pinv[k * cfg.mel_bins..(k + 1) * cfg.mel_bins];
                    row.iter().zip(&mel).map(|(p, m)| p * m).sum::<f64>().max(0.0)
                })
                .collect()
        })
        .collect())
}

/// `||  |STFT(x)| - target || / || target ||`, zero when the target is silent.
pub fn spectral_convergence(samples: &[f64], target: &[Vec<f64>], cfg: &FrontendConfig) -> f64 {
    let stft = Stft::new(cfg);
    let spectra = stft.analyze(samples, target.len());
    let (mut num, mut den) = (0.0, 0.0);
    for (spec, tgt) in spectra.iter().zip(target) {
        for (c, t) in spec.iter().zip(tgt) {
            num += (c.norm() - t).powi(2);
            den += t * t;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// Reconstructs audio from features: filterbank pseudo-inverse, then
/// `iterations` rounds of Griffin-Lim phase estimation starting from zero phase.
pub fn invert_features(features: &FrameFeatureSequence, cfg: &FrontendConfig, iterations: usize) -> Result<Waveform> {
    Ok(invert_features_traced(features, cfg, iterations)?.wave)
}

pub fn invert_features_traced(
    features: &FrameFeatureSequence,
    cfg: &FrontendConfig,
    iterations: usize,
) -> Result<Inversion> {
    let target = features_to_magnitude(features, cfg)?;
    let stft = Stft::new(cfg);
    let zero_phase: Vec<Vec<Complex<f64>>> = target
        .iter()
        .map(|m| m.iter().map(|&v| Complex::new(v, 0.0)).collect())
        .collect();
    let mut samples = stft.synthesize(&zero_phase);
    let mut errors = vec![spectral_convergence(&samples, &target, cfg)];
    for _ in 0..iterations {
        let spectra = stft.analyze(&samples, target.len());
        let rephased: Vec<Vec<Complex<f64>>> = spectra
            .iter()
            .zip(&target)
            .map(|(spec, mag)| {
                spec.iter()
                    .zip(mag)
                    .map(|(c, &m)| {
                        let n = c.norm();
                        if n > 0.0 {
                            c * (m / n)
                        } else {
                            Complex::new(m, 0.0)
                        }
                    })
                    .collect()
            })
            .collect();
        samples = stft.synthesize(&rephased);
        errors.push(spectral_convergence(&samples, &target, cfg));
    }
    let wave = Waveform {
        samples: samples.iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect(),
        sample_rate: cfg.sample_rate,
    };
    Ok(Inversion { wave, errors })
}

/// Linear STFT magnitudes of a waveform, frames x num_bins.
pub fn stft_magnitude(wave: &Waveform, cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let samples: Vec<f64> = wave.samples.iter().map(|&s| s as f64).collect();
    let stft = Stft::new(cfg);
    stft.analyze(&samples, cfg.num_frames(samples.len()))
        .into_iter()
        .map(|s| s.iter().map(|c| c.norm()).collect())
        .collect()
}
