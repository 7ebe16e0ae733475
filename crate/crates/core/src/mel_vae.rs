//! Convolutional VAE compressing log-mel images into the diffusion latent space.
//!
//! `log2(compression_level)` stride-2 convolutions downsample both axes; the
//! decoder mirrors them with stride-2 transposed convolutions.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{MelSpectrogram, StftConfig};
use crate::checkpoint::Array;
use crate::error::{config_err, input_err, FlabError, Result};
use crate::nn::{self, Adam, AdamConfig, Conv, ParamStore, UpConv};

/// Real array of shape `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub values: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentTensor {
    pub fn new(values: Vec<f32>, channels: usize, height: usize, width: usize) -> Result<Self> {
        if values.len() != channels * height * width {
            return input_err(format!(
                "latent of {} values does not match ({channels}, {height}, {width})",
                values.len()
            ));
        }
        Ok(Self {
            values,
            channels,
            height,
            width,
        })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            values: vec![0.0; shape.numel()],
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
        }
    }

    pub fn shape(&self) -> LatentShape {
        LatentShape {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub n_mels: usize,
    pub compression_level: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub kl_weight: f64,
}

impl VaeConfig {
    pub fn new(n_mels: usize) -> Self {
        Self {
            n_mels,
            compression_level: 4,
            latent_channels: 4,
            hidden: 16,
            kl_weight: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.compression_level.is_power_of_two() || self.compression_level < 2 {
            return config_err(format!(
                "compression level {} must be a power of two >= 2",
                self.compression_level
            ));
        }
        if self.n_mels % self.compression_level != 0 {
            return config_err(format!(
                "{} mel bands are not divisible by compression level {}",
                self.n_mels, self.compression_level
            ));
        }
        if !(self.kl_weight >= 0.0) {
            return config_err("kl_weight must be non-negative");
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.compression_level.trailing_zeros() as usize
    }

    pub fn latent_shape(&self, frames: usize) -> LatentShape {
        LatentShape {
            channels: self.latent_channels,
            height: self.n_mels / self.compression_level,
            width: frames.div_ceil(self.compression_level),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Posterior {
    /// `z = mean`.
    Mean,
    /// `z = mean + exp(logvar / 2) * eps` with seeded `eps`.
    Sample(u64),
}

/// `0.5 * sum(mu^2 + exp(logvar) - logvar - 1)`: KL from `N(mu, exp(logvar))` to `N(0, 1)`.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

pub struct MelVae {
    pub config: VaeConfig,
    store: ParamStore,
    down: Vec<Conv>,
    to_moments: Conv,
    from_latent: Conv,
    up: Vec<UpConv>,
    to_mel: Conv,
    input_stats: (f32, f32),
    /// Per-channel latent mean and std over the training set.
    latent_stats: (Vec<f32>, Vec<f32>),
    floor: f32,
}

impl std::fmt::Debug for MelVae {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelVae")
            .field("config", &self.config)
            .field("store", &self.store)
            .finish()
    }
}

impl MelVae {
    pub fn new(config: VaeConfig, stft: &StftConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, DType::F32);
        let h = config.hidden;
        let stages = config.stages();
        let mut down = Vec::new();
        let mut c_in = 1;
        for s in 0..stages {
            let c_out = h << s;
            down.push(store.conv2d(&format!("enc.down{s}"), c_in, c_out, 3, 2)?);
            c_in = c_out;
        }
        let to_moments = store.conv2d("enc.moments", c_in, 2 * config.latent_channels, 3, 1)?;
        let from_latent = store.conv2d("dec.in", config.latent_channels, c_in, 3, 1)?;
        let mut up = Vec::new();
        for s in (0..stages).rev() {
            let c_out = h << s.saturating_sub(1);
            up.push(store.up_conv(&format!("dec.up{s}"), c_in, c_out)?);
            c_in = c_out;
        }
        let to_mel = store.conv2d("dec.out", c_in, 1, 3, 1)?;
        let c = config.latent_channels;
        Ok(Self {
            config,
            store,
            down,
            to_moments,
            from_latent,
            up,
            to_mel,
            input_stats: (0.0, 1.0),
            latent_stats: (vec![0.0; c], vec![1.0; c]),
            floor: stft.floor_value(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn floor(&self) -> f32 {
        self.floor
    }

    fn pad_target(&self, frames: usize) -> usize {
        frames.div_ceil(self.config.compression_level) * self.config.compression_level
    }

    fn mels_to_tensor(&self, mels: &[&MelSpectrogram]) -> Result<(Tensor, usize)> {
        let m = self.config.n_mels;
        let frames = mels.first().map(|x| x.frames).unwrap_or(0);
        let padded = self.pad_target(frames);
        let (mean, std) = self.input_stats;
        let mut data = Vec::with_capacity(mels.len() * m * padded);
        for mel in mels {
            if mel.n_mels != m || mel.frames != frames {
                return input_err(format!(
                    "VAE batch expects {m}x{frames} mels, got {}x{}",
                    mel.n_mels, mel.frames
                ));
            }
            if !mel.is_finite() {
                return input_err("mel spectrogram contains non-finite values");
            }
            data.extend(mel.pad_frames(padded).values.iter().map(|v| (v - mean) / std));
        }
        Ok((
            Tensor::from_vec(data, (mels.len(), 1, m, padded), &Device::Cpu)?,
            padded,
        ))
    }

    /// Posterior moments `(mean, logvar)`, each `(B, C, H, W)`.
    pub fn encode_moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for conv in &self.down {
            h = nn::silu(&nn::apply(conv, &h)?)?;
        }
        let moments = nn::apply(&self.to_moments, &h)?;
        let c = self.config.latent_channels;
        let mean = moments.narrow(1, 0, c)?;
        let logvar = moments.narrow(1, c, c)?.clamp(-30.0, 20.0)?;
        Ok((mean, logvar))
    }

    /// Normalized-domain reconstruction from `(B, C, H, W)` latents.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = nn::silu(&nn::apply(&self.from_latent, z)?)?;
        for conv in &self.up {
            h = nn::silu(&nn::apply(conv, &h)?)?;
        }
        nn::apply(&self.to_mel, &h)
    }

    pub fn encode(&self, mel: &MelSpectrogram, posterior: Posterior) -> Result<LatentTensor> {
        Ok(self.encode_batch(&[mel], posterior)?.remove(0))
    }

    /// Encodes a batch of equally sized mels; frames are floor-padded up to a
    /// multiple of the compression level.
    pub fn encode_batch(&self, mels: &[&MelSpectrogram], posterior: Posterior) -> Result<Vec<LatentTensor>> {
        let mut out = Vec::with_capacity(mels.len());
        for (ci, chunk) in mels.chunks(64).enumerate() {
            let (x, padded) = self.mels_to_tensor(chunk)?;
            let (mean, logvar) = self.encode_moments(&x)?;
            let z = match posterior {
                Posterior::Mean => mean,
                Posterior::Sample(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
                    let eps: Vec<f32> = (0..mean.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
                    let eps = Tensor::from_vec(eps, mean.shape(), &Device::Cpu)?;
                    (mean + (logvar * 0.5)?.exp()?.mul(&eps)?)?
                }
            };
            let shape = self.config.latent_shape(padded);
            for row in z.flatten_from(1)?.to_vec2::<f32>()? {
                out.push(LatentTensor::new(row, shape.channels, shape.height, shape.width)?);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentTensor, stft: &StftConfig) -> Result<MelSpectrogram> {
        Ok(self.decode_batch(&[z], stft)?.remove(0))
    }

    pub fn decode_batch(&self, zs: &[&LatentTensor], stft: &StftConfig) -> Result<Vec<MelSpectrogram>> {
        let Some(first) = zs.first() else {
            return Ok(Vec::new());
        };
        let shape = first.shape();
        let c = self.config.latent_channels;
        let level = self.config.compression_level;
        if shape.channels != c || shape.height * level != self.config.n_mels {
            return input_err(format!(
                "latent ({}, {}, {}) does not match VAE with {c} channels and {} mels",
                shape.channels, shape.height, shape.width, self.config.n_mels
            ));
        }
        let (mean, std) = self.input_stats;
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(64) {
            let mut data = Vec::with_capacity(chunk.len() * shape.numel());
            for z in chunk {
                if z.shape() != shape {
                    return input_err("latent batch has mixed shapes");
                }
                data.extend_from_slice(&z.values);
            }
            let z = Tensor::from_vec(
                data,
                (chunk.len(), shape.channels, shape.height, shape.width),
                &Device::Cpu,
            )?;
            let x = self.decode_tensor(&z)?;
            let frames = shape.width * level;
            for row in x.flatten_from(1)?.to_vec2::<f32>()? {
                let values = row
                    .into_iter()
                    .map(|v| {
                        let y = v * std + mean;
                        if y.is_finite() {
                            y.max(self.floor)
                        } else {
                            self.floor
                        }
                    })
                    .collect();
                out.push(MelSpectrogram::new(values, self.config.n_mels, frames, stft.clone())?);
            }
        }
        Ok(out)
    }

    /// Maps a raw latent to zero-mean unit-variance per channel.
    pub fn standardize(&self, z: &LatentTensor) -> LatentTensor {
        self.map_channels(z, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, z: &LatentTensor) -> LatentTensor {
        self.map_channels(z, |v, m, s| v * s + m)
    }

    fn map_channels(&self, z: &LatentTensor, f: impl Fn(f32, f32, f32) -> f32) -> LatentTensor {
        let plane = z.height * z.width;
        let values = z
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane).min(self.latent_stats.0.len() - 1);
                f(v, self.latent_stats.0[c], self.latent_stats.1[c])
            })
            .collect();
        LatentTensor { values, ..z.clone() }
    }

    pub fn fit_latent_stats(&mut self, latents: &[LatentTensor]) {
        let c = self.config.latent_channels;
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let mut count = vec![0usize; c];
        for z in latents {
            let plane = z.height * z.width;
            for (i, &v) in z.values.iter().enumerate() {
                let ch = i / plane;
                mean[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
                count[ch] += 1;
            }
        }
        let mut m = vec![0f32; c];
        let mut s = vec![1f32; c];
        for ch in 0..c {
            if count[ch] > 0 {
                let mu = mean[ch] / count[ch] as f64;
                let var = (sq[ch] / count[ch] as f64 - mu * mu).max(1e-12);
                m[ch] = mu as f32;
                s[ch] = var.sqrt() as f32;
            }
        }
        self.latent_stats = (m, s);
    }

    pub fn latent_stats(&self) -> &(Vec<f32>, Vec<f32>) {
        &self.latent_stats
    }

    pub fn to_arrays(&self) -> Result<BTreeMap<String, Array>> {
        let mut arrays = self.store.to_arrays()?;
        arrays.insert(
            "input_stats".into(),
            Array::vector(vec![self.input_stats.0, self.input_stats.1]),
        );
        arrays.insert("latent_mean".into(), Array::vector(self.latent_stats.0.clone()));
        arrays.insert("latent_std".into(), Array::vector(self.latent_stats.1.clone()));
        Ok(arrays)
    }

    pub fn from_arrays(config: VaeConfig, stft: &StftConfig, arrays: &BTreeMap<String, Array>) -> Result<Self> {
        let mut vae = Self::new(config, stft, 0)?;
        vae.store.load_arrays(arrays)?;
        let get = |k: &str| {
            arrays
                .get(k)
                .map(|a| a.data.clone())
                .ok_or_else(|| FlabError::Input(format!("VAE checkpoint lacks {k}")))
        };
        let stats = get("input_stats")?;
        vae.input_stats = (stats[0], stats[1]);
        vae.latent_stats = (get("latent_mean")?, get("latent_std")?);
        Ok(vae)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeTrainReport {
    pub losses: Vec<f64>,
}

impl VaeTrainReport {
    /// Trailing moving average with window `w`.
    pub fn moving_average(&self, w: usize) -> Vec<f64> {
        self.losses
            .windows(w.min(self.losses.len()).max(1))
            .map(|win| win.iter().sum::<f64>() / win.len() as f64)
            .collect()
    }
}

/// `(reconstruction L1, KL per sample)` for a normalized batch.
fn vae_losses(vae: &MelVae, x: &Tensor, seed: u64) -> Result<(Tensor, Tensor)> {
    let (mean, logvar) = vae.encode_moments(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f32> = (0..mean.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::from_vec(eps, mean.shape(), &Device::Cpu)?;
    let z = (&mean + (&logvar * 0.5)?.exp()?.mul(&eps)?)?;
    let recon = vae.decode_tensor(&z)?;
    let l1 = (recon - x)?.abs()?.mean_all()?;
    let kl_terms = ((mean.sqr()? + logvar.exp()?)? - &logvar)? - 1.0;
    let kl = (kl_terms?.flatten_from(1)?.sum(D::Minus1)? * 0.5)?.mean_all()?;
    Ok((l1, kl))
}

/// Mean absolute log-mel error of `decode(encode(x, mean))` over `mels`.
pub fn reconstruction_error(vae: &MelVae, mels: &[&MelSpectrogram]) -> Result<f64> {
    let mut total = 0.0;
    for mel in mels {
        let z = vae.encode(mel, Posterior::Mean)?;
        let back = vae.decode(&z, &mel.config)?.crop_frames(mel.frames);
        total += back.mean_abs_diff(mel)?;
    }
    Ok(total / mels.len().max(1) as f64)
}

/// Trains on equally sized mels with L1 reconstruction plus `kl_weight * KL`,
/// then fits latent standardization statistics on the posterior means.
pub fn train_vae(
    mels: &[&MelSpectrogram],
    config: VaeConfig,
    train: &VaeTrainConfig,
) -> Result<(MelVae, VaeTrainReport)> {
    let Some(first) = mels.first() else {
        return input_err("VAE training needs a non-empty corpus");
    };
    let mut vae = MelVae::new(config, &first.config, train.seed)?;
    let n_values: usize = mels.iter().map(|m| m.values.len()).sum();
    let mean = mels
        .iter()
        .flat_map(|m| m.values.iter())
        .map(|&v| v as f64)
        .sum::<f64>()
        / n_values as f64;
    let var = mels
        .iter()
        .flat_map(|m| m.values.iter())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n_values as f64;
    vae.input_stats = (mean as f32, var.sqrt().max(1e-6) as f32);
    let (all, _) = vae.mels_to_tensor(mels)?;
    let mut opt = Adam::new(
        vae.store.vars().iter().map(|(k, v)| (k.clone(), v)),
        AdamConfig::with_lr(train.lr),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5AE);
    let mut losses = Vec::with_capacity(train.steps);
    let kl_weight = vae.config.kl_weight;
    for step in 0..train.steps {
        let ids: Vec<u32> = (0..train.batch_size.min(mels.len()))
            .map(|_| rng.random_range(0..mels.len() as u32))
            .collect();
        let ids = Tensor::from_vec(ids, train.batch_size.min(mels.len()), &Device::Cpu)?;
        let x = all.index_select(&ids, 0)?;
        let (l1, kl) = vae_losses(&vae, &x, rng.random())?;
        let loss = (l1 + (kl * kl_weight)?)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(FlabError::Numerical(format!("VAE loss became {value} at step {step}")));
        }
        losses.push(value);
        opt.backward_step(&loss)?;
    }
    let latents = vae.encode_batch(mels, Posterior::Mean)?;
    vae.fit_latent_stats(&latents);
    Ok((vae, VaeTrainReport { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    fn kl_by_quadrature(mu: f64, logvar: f64) -> f64 {
        let sigma = (logvar / 2.0).exp();
        let q =
            |x: f64| (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let p = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let lo = mu.min(0.0) - 12.0 * sigma.max(1.0);
        let hi = mu.max(0.0) + 12.0 * sigma.max(1.0);
        simpson(
            |x| {
                let qx = q(x);
                if qx < 1e-300 {
                    0.0
                } else {
                    qx * (qx / p(x)).ln()
                }
            },
            lo,
            hi,
            20_000,
        )
    }

    #[test]
    fn kl_closed_form_matches_quadrature() {
        assert_eq!(gaussian_kl(&[0.0], &[0.0]), 0.0);
        for &(mu, lv) in &[(0.7, 0.0), (-1.3, 0.0), (0.5, -1.0), (2.0, 0.8), (0.0, -2.5)] {
            let closed = gaussian_kl(&[mu], &[lv]);
            let numeric = kl_by_quadrature(mu, lv);
            assert!(
                (closed - numeric).abs() < 1e-4,
                "mu={mu} lv={lv}: {closed} vs {numeric}"
            );
            if lv == 0.0 {
                assert!((closed - 0.5 * mu * mu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compression_law() {
        let mut c = VaeConfig::new(80);
        assert_eq!(
            c.latent_shape(344),
            LatentShape {
                channels: 4,
                height: 20,
                width: 86
            }
        );
        let c64 = VaeConfig::new(64);
        assert_eq!(
            c64.latent_shape(400),
            LatentShape {
                channels: 4,
                height: 16,
                width: 100
            }
        );
        c.compression_level = 3;
        assert!(c.validate().is_err());
        let mut c = VaeConfig::new(32);
        for level in [2usize, 4, 8] {
            c.compression_level = level;
            c.validate().unwrap();
            assert_eq!(c.latent_shape(64).height, 32 / level);
            assert_eq!(c.latent_shape(64).width, 64 / level);
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let stft = StftConfig::desk();
        let vae = MelVae::new(VaeConfig::new(64), &stft, 0).unwrap();
        let mel = MelSpectrogram::silent(&stft, 400);
        let z = vae.encode(&mel, Posterior::Mean).unwrap();
        assert_eq!(z.shape().dims(), [4, 16, 100]);
        assert_eq!(z, vae.encode(&mel, Posterior::Mean).unwrap());
        assert_eq!(
            vae.encode(&mel, Posterior::Sample(3)).unwrap(),
            vae.encode(&mel, Posterior::Sample(3)).unwrap()
        );
        let back = vae.decode(&z, &stft).unwrap();
        assert_eq!((back.n_mels, back.frames), (64, 400));
        let zero = vae.decode(&LatentTensor::zeros(z.shape()), &stft).unwrap();
        assert!(zero.is_finite());
        assert!(zero.values.iter().all(|&v| v >= stft.floor_value()));
    }

    #[test]
    fn odd_frame_counts_are_padded() {
        let stft = StftConfig::tiny();
        let vae = MelVae::new(VaeConfig::new(24), &stft, 0).unwrap();
        let z = vae.encode(&MelSpectrogram::silent(&stft, 61), Posterior::Mean).unwrap();
        assert_eq!(z.shape().dims(), [4, 6, 16]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let stft = StftConfig::tiny();
        let vae = MelVae::new(VaeConfig::new(24), &stft, 0).unwrap();
        let mut mel = MelSpectrogram::silent(&stft, 64);
        mel.values[3] = f32::NAN;
        assert!(matches!(vae.encode(&mel, Posterior::Mean), Err(FlabError::Input(_))));
        let wrong = LatentTensor::zeros(LatentShape {
            channels: 3,
            height: 6,
            width: 16,
        });
        assert!(vae.decode(&wrong, &stft).is_err());
    }

    #[test]
    fn standardization_round_trips() {
        let stft = StftConfig::tiny();
        let mut vae = MelVae::new(VaeConfig::new(24), &stft, 0).unwrap();
        let zs: Vec<LatentTensor> = (0..4)
            .map(|i| LatentTensor::new((0..96).map(|j| (i * 96 + j) as f32 * 0.1).collect(), 4, 6, 4).unwrap())
            .collect();
        vae.fit_latent_stats(&zs);
        let s = vae.standardize(&zs[1]);
        let back = vae.destandardize(&s);
        for (a, b) in back.values.iter().zip(&zs[1].values) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    fn tiny_corpus(n: usize) -> Vec<MelSpectrogram> {
        let stft = StftConfig::tiny();
        let front = crate::audio::MelFrontend::new(&stft).unwrap();
        let classes = crate::synth::dcase_classes(1.0, stft.sample_rate);
        (0..n)
            .map(|i| {
                let w = crate::synth::synth_clip(&classes[i % classes.len()], 100 + i as u64).unwrap();
                front.mel(&w).unwrap()
            })
            .collect()
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let mels = tiny_corpus(28);
        let (train_set, val) = mels.split_at(21);
        let train_refs: Vec<&MelSpectrogram> = train_set.iter().collect();
        let val_refs: Vec<&MelSpectrogram> = val.iter().collect();
        let mut cfg = VaeConfig::new(24);
        cfg.kl_weight = 0.0;
        let untrained = MelVae::new(cfg.clone(), &StftConfig::tiny(), 1).unwrap();
        let before = reconstruction_error(&untrained, &val_refs).unwrap();
        let tc = VaeTrainConfig {
            steps: 150,
            batch_size: 8,
            lr: 2e-3,
            seed: 1,
        };
        let (vae, report) = train_vae(&train_refs, cfg, &tc).unwrap();
        let after = reconstruction_error(&vae, &val_refs).unwrap();
        assert!(after < before, "{after} !< {before}");
        let ma = report.moving_average(10);
        assert!(ma.last().unwrap() < ma.first().unwrap());
        let (m, s) = vae.latent_stats();
        assert!(m.iter().chain(s).all(|v| v.is_finite()) && s.iter().all(|&v| v > 0.0));

        let arrays = vae.to_arrays().unwrap();
        let back = MelVae::from_arrays(vae.config.clone(), &StftConfig::tiny(), &arrays).unwrap();
        let z = vae.encode(val_refs[0], Posterior::Mean).unwrap();
        assert_eq!(z, back.encode(val_refs[0], Posterior::Mean).unwrap());
    }
}
