//! Waveforms, the STFT/mel frontend and 16-bit WAV I/O.
//!
//! The STFT uses no centre padding: frame `i` covers samples
//! `[i * hop, i * hop + window_len)`, so a clip of `len >= window_len`
//! samples yields `1 + (len - window_len) / hop` frames.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, FlabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    /// Scales the clip so that its peak is exactly `target` (silent clips are left alone).
    pub fn normalize_peak(&mut self, target: f32) {
        let peak = self.peak();
        if peak > 0.0 {
            let g = target / peak;
            self.samples.iter_mut().for_each(|s| *s *= g);
        }
    }

    /// Attenuates the clip only if its peak exceeds `limit`.
    pub fn limit_peak(&mut self, limit: f32) {
        if self.peak() > limit {
            self.normalize_peak(limit);
        }
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| FlabError::io(parent, e))?;
        }
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            let q = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
            writer.write_sample(q)?;
        }
        writer.finalize()?;
        Ok(())
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return input_err(format!(
                "{}: expected mono 16-bit PCM, got {} ch / {} bit",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            ));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self::new(samples, spec.sample_rate))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl StftConfig {
    /// 16 kHz frontend: 1024-sample window, hop 160, 64 mel bands.
    pub fn desk() -> Self {
        Self {
            window_len: 1024,
            hop: 160,
            n_mels: 64,
            sample_rate: 16_000,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-5,
        }
    }

    /// 22.05 kHz frontend: 1024-sample window, hop 256, 80 mel bands.
    pub fn full() -> Self {
        Self {
            window_len: 1024,
            hop: 256,
            n_mels: 80,
            sample_rate: 22_050,
            fmin: 0.0,
            fmax: 11_025.0,
            log_floor: 1e-5,
        }
    }

    /// 8 kHz frontend used by the fast test and acceptance presets.
    pub fn tiny() -> Self {
        Self {
            window_len: 256,
            hop: 128,
            n_mels: 24,
            sample_rate: 8_000,
            fmin: 0.0,
            fmax: 4_000.0,
            log_floor: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_len {
            return config_err(format!(
                "hop {} must be in (0, window_len={}]",
                self.hop, self.window_len
            ));
        }
        if self.n_mels == 0 {
            return config_err("n_mels must be >= 1");
        }
        if !(self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return config_err(format!(
                "need fmin < fmax <= sample_rate/2, got {} / {} / {}",
                self.fmin, self.fmax, self.sample_rate
            ));
        }
        if !(self.log_floor > 0.0) {
            return config_err("log_floor must be positive");
        }
        Ok(())
    }

    pub fn n_freq(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.window_len).then(|| 1 + (n_samples - self.window_len) / self.hop)
    }

    /// Length of a waveform synthesized from `frames` STFT frames.
    pub fn n_samples(&self, frames: usize) -> usize {
        frames * self.hop + self.window_len - self.hop
    }

    pub fn floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

/// Log-magnitude mel spectrogram, row-major `n_mels x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub frames: usize,
    pub config: StftConfig,
}

impl MelSpectrogram {
    pub fn new(values: Vec<f32>, n_mels: usize, frames: usize, config: StftConfig) -> Result<Self> {
        if values.len() != n_mels * frames {
            return input_err(format!(
                "mel buffer of {} values does not match {n_mels} x {frames}",
                values.len()
            ));
        }
        Ok(Self {
            values,
            n_mels,
            frames,
            config,
        })
    }

    pub fn silent(config: &StftConfig, frames: usize) -> Self {
        Self {
            values: vec![config.floor_value(); config.n_mels * frames],
            n_mels: config.n_mels,
            frames,
            config: config.clone(),
        }
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.frames + frame]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Pads on the right with the floor value up to `frames` columns.
    pub fn pad_frames(&self, frames: usize) -> Self {
        if frames <= self.frames {
            return self.clone();
        }
        let floor = self.config.floor_value();
        let mut values = Vec::with_capacity(self.n_mels * frames);
        for row in self.values.chunks(self.frames) {
            values.extend_from_slice(row);
            values.extend(std::iter::repeat_n(floor, frames - self.frames));
        }
        Self {
            values,
            n_mels: self.n_mels,
            frames,
            config: self.config.clone(),
        }
    }

    pub fn crop_frames(&self, frames: usize) -> Self {
        if frames >= self.frames {
            return self.clone();
        }
        let values = self
            .values
            .chunks(self.frames)
            .flat_map(|row| row[..frames].iter().copied())
            .collect();
        Self {
            values,
            n_mels: self.n_mels,
            frames,
            config: self.config.clone(),
        }
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.n_mels != other.n_mels || self.frames != other.frames {
            return input_err(format!(
                "mel shapes differ: {}x{} vs {}x{}",
                self.n_mels, self.frames, other.n_mels, other.frames
            ));
        }
        let total: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(total / self.values.len() as f64)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank, `n_mels x n_freq`, row-major.
///
/// A filter narrower than one FFT bin collapses onto its nearest bin so every
/// row keeps positive mass.
pub fn mel_filterbank(cfg: &StftConfig) -> Vec<f64> {
    let n_freq = cfg.n_freq();
    let bin_hz = cfg.sample_rate as f64 / cfg.window_len as f64;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; cfg.n_mels * n_freq];
    for m in 0..cfg.n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * n_freq..(m + 1) * n_freq];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > left && f <= centre {
                (f - left) / (centre - left)
            } else if f > centre && f < right {
                (right - f) / (right - centre)
            } else {
                0.0
            };
        }
        if row.iter().sum::<f64>() <= 0.0 {
            let k = ((centre / bin_hz).round() as usize).min(n_freq - 1);
            row[k] = 1.0;
        }
    }
    fb
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable STFT engine (forward and inverse) for one configuration.
#[derive(Clone)]
pub struct Stft {
    pub config: StftConfig,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: &StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config: config.clone(),
            window: hann(config.window_len),
            forward: planner.plan_fft_forward(config.window_len),
            inverse: planner.plan_fft_inverse(config.window_len),
        })
    }

    /// Complex spectrum per frame, each of `n_freq` bins.
    pub fn analyze(&self, samples: &[f32]) -> Result<Vec<Vec<Complex<f64>>>> {
        let cfg = &self.config;
        let Some(frames) = cfg.n_frames(samples.len()) else {
            return input_err(format!(
                "clip of {} samples is shorter than one {}-sample window",
                samples.len(),
                cfg.window_len
            ));
        };
        let n_freq = cfg.n_freq();
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.window_len];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(samples[start + i] as f64 * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            out.push(buf[..n_freq].to_vec());
        }
        Ok(out)
    }

    /// Least-squares overlap-add inverse of a one-sided spectrogram.
    pub fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let cfg = &self.config;
        let n = cfg.window_len;
        let len = cfg.n_samples(spectra.len());
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (t, spec) in spectra.iter().enumerate() {
            buf[..spec.len()].copy_from_slice(spec);
            for k in spec.len()..n {
                buf[k] = spec[n - k].conj();
            }
            buf[0].im = 0.0;
            if n % 2 == 0 {
                buf[n / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = t * cfg.hop;
            for i in 0..n {
                let w = self.window[i];
                out[start + i] += buf[i].re / n as f64 * w;
                norm[start + i] += w * w;
            }
        }
        // The first and last hop are covered by a single window edge; flooring the
        // normalizer there fades the borders instead of amplifying inconsistent
        // spectra into spikes.
        let floor = 0.1 * norm.iter().cloned().fold(0.0, f64::max);
        for (o, w) in out.iter_mut().zip(&norm) {
            if *w > 0.0 {
                *o /= w.max(floor);
            }
        }
        out
    }
}

/// Mel frontend: STFT magnitude projected onto the triangular filterbank.
#[derive(Debug, Clone)]
pub struct MelFrontend {
    pub stft: Stft,
    pub filterbank: Vec<f64>,
}

impl MelFrontend {
    pub fn new(config: &StftConfig) -> Result<Self> {
        Ok(Self {
            stft: Stft::new(config)?,
            filterbank: mel_filterbank(config),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.stft.config
    }

    /// Linear mel magnitudes (before the log), `n_mels x frames`.
    pub fn mel_magnitudes(&self, magnitudes: &[Vec<f64>]) -> Vec<f64> {
        let cfg = self.config();
        let n_freq = cfg.n_freq();
        let frames = magnitudes.len();
        let mut out = vec![0.0; cfg.n_mels * frames];
        for m in 0..cfg.n_mels {
            let row = &self.filterbank[m * n_freq..(m + 1) * n_freq];
            for (t, mag) in magnitudes.iter().enumerate() {
                out[m * frames + t] = row.iter().zip(mag).map(|(w, a)| w * a).sum();
            }
        }
        out
    }

    pub fn mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let cfg = self.config();
        if w.sample_rate != cfg.sample_rate {
            return input_err(format!(
                "waveform at {} Hz does not match frontend at {} Hz",
                w.sample_rate, cfg.sample_rate
            ));
        }
        let spectra = self.stft.analyze(&w.samples)?;
        let mags: Vec<Vec<f64>> = spectra.iter().map(|s| s.iter().map(|c| c.norm()).collect()).collect();
        let frames = mags.len();
        let values = self
            .mel_magnitudes(&mags)
            .into_iter()
            .map(|v| v.max(cfg.log_floor).ln() as f32)
            .collect();
        MelSpectrogram::new(values, cfg.n_mels, frames, cfg.clone())
    }
}

/// One-shot convenience wrapper around [`MelFrontend`].
pub fn wav_to_mel(w: &Waveform, cfg: &StftConfig) -> Result<MelSpectrogram> {
    MelFrontend::new(cfg)?.mel(w)
}
