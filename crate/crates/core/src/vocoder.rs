//! Mel-spectrogram to waveform: mel pseudo-inverse followed by Griffin-Lim.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;

use crate::audio::{MelFrontend, MelSpectrogram, StftConfig, Waveform};
use crate::error::{config_err, input_err, FlabError, Result};

pub const DEFAULT_ITERS: usize = 32;
pub const PEAK_LIMIT: f32 = 0.95;

#[derive(Debug, Clone)]
pub struct VocoderConfig {
    pub n_iters: usize,
    pub frontend: MelFrontend,
    /// `n_freq x n_mels`, row-major.
    pub pinv: Vec<f64>,
}

impl VocoderConfig {
    pub fn new(stft: &StftConfig, n_iters: usize) -> Result<Self> {
        if n_iters == 0 {
            return config_err("Griffin-Lim needs at least one iteration");
        }
        let frontend = MelFrontend::new(stft)?;
        let (m, f) = (stft.n_mels, stft.n_freq());
        let fb = DMatrix::from_row_slice(m, f, &frontend.filterbank);
        let pinv = fb
            .pseudo_inverse(1e-10)
            .map_err(|e| FlabError::Numerical(format!("mel filterbank pseudo-inverse failed: {e}")))?;
        let mut flat = Vec::with_capacity(f * m);
        for r in 0..f {
            for c in 0..m {
                flat.push(pinv[(r, c)]);
            }
        }
        Ok(Self {
            n_iters,
            frontend,
            pinv: flat,
        })
    }

    pub fn stft_config(&self) -> &StftConfig {
        self.frontend.config()
    }

    /// Non-negative linear magnitudes `frames x n_freq`; floor-valued mel bins count as silence.
    pub fn linear_magnitudes(&self, mel: &MelSpectrogram) -> Vec<Vec<f64>> {
        let cfg = self.stft_config();
        let (m, f) = (cfg.n_mels, cfg.n_freq());
        let floor = (cfg.log_floor.ln() as f32) + 1e-4;
        (0..mel.frames)
            .map(|t| {
                let col: Vec<f64> = (0..m)
                    .map(|i| {
                        let v = mel.get(i, t);
                        if v <= floor {
                            0.0
                        } else {
                            (v as f64).exp()
                        }
                    })
                    .collect();
                (0..f)
                    .map(|k| {
                        let row = &self.pinv[k * m..(k + 1) * m];
                        row.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>().max(0.0)
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GriffinLim {
    pub samples: Vec<f64>,
    /// `|| |STFT(x_i)| - S ||_F / ||S||_F` after each iteration.
    pub convergence: Vec<f64>,
}

/// Phase retrieval for target magnitudes `frames x n_freq` from a seeded random phase.
pub fn griffin_lim(target: &[Vec<f64>], cfg: &VocoderConfig, seed: u64) -> Result<GriffinLim> {
    let stft = &cfg.frontend.stft;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<Complex<f64>>> = target
        .iter()
        .map(|row| {
            row.iter()
                .map(|&a| Complex::from_polar(a, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let total: f64 = target.iter().flatten().map(|a| a * a).sum::<f64>().sqrt();
    let mut convergence = Vec::with_capacity(cfg.n_iters);
    for _ in 0..cfg.n_iters {
        let x: Vec<f32> = stft.synthesize(&spec).iter().map(|&v| v as f32).collect();
        let rebuilt = stft.analyze(&x)?;
        let mut err = 0.0;
        for ((s, r), a) in spec.iter_mut().zip(&rebuilt).zip(target) {
            for ((sk, rk), &ak) in s.iter_mut().zip(r).zip(a) {
                let mag = rk.norm();
                err += (mag - ak).powi(2);
                *sk = if mag > 1e-12 {
                    rk * (ak / mag)
                } else {
                    Complex::new(ak, 0.0)
                };
            }
        }
        convergence.push(if total > 0.0 { err.sqrt() / total } else { 0.0 });
    }
    Ok(GriffinLim {
        samples: stft.synthesize(&spec),
        convergence,
    })
}

/// Waveform of `frames * hop + window - hop` samples, peak-limited to 0.95.
pub fn mel_to_wav(mel: &MelSpectrogram, cfg: &VocoderConfig, seed: u64) -> Result<Waveform> {
    let sc = cfg.stft_config();
    let mc = &mel.config;
    if (mc.sample_rate, mc.window_len, mc.hop, mc.n_mels) != (sc.sample_rate, sc.window_len, sc.hop, sc.n_mels)
        || mel.n_mels != sc.n_mels
    {
        return input_err(format!(
            "mel ({} Hz, window {}, hop {}, {} mels) does not match the vocoder ({} Hz, window {}, hop {}, {} mels)",
            mc.sample_rate, mc.window_len, mc.hop, mel.n_mels, sc.sample_rate, sc.window_len, sc.hop, sc.n_mels
        ));
    }
    if !mel.is_finite() {
        return input_err("mel spectrogram contains non-finite values");
    }
    let gl = griffin_lim(&cfg.linear_magnitudes(mel), cfg, seed)?;
    let mut w = Waveform::new(gl.samples.iter().map(|&v| v as f32).collect(), sc.sample_rate);
    w.limit_peak(PEAK_LIMIT);
    Ok(w)
}

/// One waveform per `(mel, seed)`, computed in parallel.
pub fn mel_to_wav_batch(mels: &[&MelSpectrogram], seeds: &[u64], cfg: &VocoderConfig) -> Result<Vec<Waveform>> {
    if mels.len() != seeds.len() {
        return input_err("one vocoder seed per mel required");
    }
    mels.par_iter()
        .zip(seeds)
        .map(|(m, &s)| mel_to_wav(m, cfg, s))
        .collect()
}
