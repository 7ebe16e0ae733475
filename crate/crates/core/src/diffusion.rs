//! Conditional DDPM over VAE latents: noise schedule, forward process, the
//! epsilon-prediction objective, a FiLM-conditioned UNet and an ancestral sampler.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Array;
use crate::embedding::Embedding;
use crate::error::{config_err, input_err, FlabError, Result};
use crate::mel_vae::{LatentShape, LatentTensor};
use crate::nn::{self, Adam, AdamConfig, Conv, ParamStore, UpConv};
use crate::synth::derive_seed;
use crate::tuner::TuningLayer;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Per-step quantities for steps `1..=n`, stored at index `step - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub n: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(n: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if n < 10 {
        return config_err(format!("diffusion needs at least 10 steps, got {n}"));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..n)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (n - 1) as f64)
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let last = alpha_bar[n - 1];
    if last >= 1e-3 {
        return config_err(format!(
            "with beta {BETA_START}..{BETA_END}, {n} steps leave alpha_bar_N = {last:.3e}; z_N would not be near-Gaussian"
        ));
    }
    Ok(NoiseSchedule {
        n,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    /// `alpha_bar` at `step`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_at(&self, step: usize) -> f64 {
        if step == 0 {
            1.0
        } else {
            self.alpha_bar[step - 1]
        }
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step == 0 || step > self.n {
            return input_err(format!("diffusion step {step} outside 1..={}", self.n));
        }
        Ok(())
    }

    /// `K` evenly strided steps ending at `N`, ascending.
    pub fn respaced(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return config_err(format!("sampler steps {k} outside 1..={}", self.n));
        }
        let mut steps: Vec<usize> = (1..=k)
            .map(|i| ((i as f64 * self.n as f64 / k as f64).round() as usize).max(1))
            .collect();
        steps.dedup();
        Ok(steps)
    }
}

/// `sqrt(alpha_bar_n) z0 + sqrt(1 - alpha_bar_n) eps`.
pub fn q_sample(z0: &LatentTensor, step: usize, eps: &LatentTensor, sched: &NoiseSchedule) -> Result<LatentTensor> {
    sched.check_step(step)?;
    if z0.shape() != eps.shape() {
        return input_err("q_sample: z0 and eps shapes differ");
    }
    let ab = sched.alpha_bar_at(step);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = z0
        .values
        .iter()
        .zip(&eps.values)
        .map(|(&z, &e)| (a * z as f64 + s * e as f64) as f32)
        .collect();
    Ok(LatentTensor { values, ..z0.clone() })
}

fn per_item(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.resize(like.rank(), 1);
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}

/// Batched forward process over a `(B, ...)` tensor with one step per item.
pub fn q_sample_tensor(z0: &Tensor, steps: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    for &s in steps {
        sched.check_step(s)?;
    }
    let a = per_item(steps.iter().map(|&s| sched.alpha_bar_at(s).sqrt()).collect(), z0)?;
    let s = per_item(
        steps.iter().map(|&s| (1.0 - sched.alpha_bar_at(s)).sqrt()).collect(),
        z0,
    )?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// `eps_theta(z_n, n, E)` over a batch.
pub trait Denoiser {
    fn predict(&self, z: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor>;

    fn dtype(&self) -> DType {
        DType::F32
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub z0: Tensor,
    pub cond: Tensor,
    pub steps: Vec<usize>,
    pub eps: Tensor,
}

impl DiffusionBatch {
    pub fn new(z0: Tensor, cond: Tensor, steps: Vec<usize>, eps: Tensor) -> Result<Self> {
        let b = z0.dim(0)?;
        if cond.dim(0)? != b || steps.len() != b || eps.dims() != z0.dims() {
            return input_err(format!(
                "inconsistent diffusion batch: z0 {:?}, cond {:?}, {} steps, eps {:?}",
                z0.dims(),
                cond.dims(),
                steps.len(),
                eps.dims()
            ));
        }
        Ok(Self { z0, cond, steps, eps })
    }

    /// Draws `n ~ U{1..N}` and `eps ~ N(0, I)` for every item.
    pub fn draw(z0: Tensor, cond: Tensor, sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<Self> {
        let b = z0.dim(0)?;
        let steps = (0..b).map(|_| rng.random_range(1..=sched.n)).collect();
        let noise: Vec<f64> = (0..z0.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::from_vec(noise, z0.shape(), z0.device())?.to_dtype(z0.dtype())?;
        Self::new(z0, cond, steps, eps)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Batch mean of `||eps - eps_theta(q_sample(z0, n, eps), n, E)||^2`.
pub fn training_loss(batch: &DiffusionBatch, model: &impl Denoiser, sched: &NoiseSchedule) -> Result<Tensor> {
    let zn = q_sample_tensor(&batch.z0, &batch.steps, &batch.eps, sched)?;
    let pred = model.predict(&zn, &batch.steps, &batch.cond)?;
    if pred.dims() != batch.eps.dims() {
        return input_err(format!(
            "denoiser returned {:?}, expected {:?}",
            pred.dims(),
            batch.eps.dims()
        ));
    }
    let per_item = (&batch.eps - pred)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?;
    Ok(per_item.mean_all()?)
}

/// `training_loss` divided by the per-item dimension, so a zero predictor scores about 1.
pub fn training_loss_per_dim(batch: &DiffusionBatch, model: &impl Denoiser, sched: &NoiseSchedule) -> Result<Tensor> {
    let dim = batch.z0.elem_count() / batch.len().max(1);
    Ok((training_loss(batch, model, sched)? / dim as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
}

impl UNetConfig {
    pub fn new(latent_channels: usize, cond_dim: usize, width: usize) -> Self {
        Self {
            latent_channels,
            width,
            cond_dim,
            time_dim: 4 * width.max(8),
        }
    }
}

/// Residual block with an additive time bias and FiLM `(1 + gamma) h + beta` from the condition.
struct FilmBlock {
    conv1: Conv,
    conv2: Conv,
    time: Linear,
    film: Linear,
    channels: usize,
}

impl FilmBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize, time_dim: usize, cond_dim: usize) -> Result<Self> {
        Ok(Self {
            conv1: store.conv2d(&format!("{name}.conv1"), channels, channels, 3, 1)?,
            conv2: store.conv2d(&format!("{name}.conv2"), channels, channels, 3, 1)?,
            time: store.linear(&format!("{name}.time"), time_dim, channels)?,
            film: store.linear_zeroed(&format!("{name}.film"), cond_dim, 2 * channels)?,
            channels,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        let mut h = nn::apply(&self.conv1, &nn::silu(x)?)?;
        let t = nn::apply(&self.time, temb)?.unsqueeze(2)?.unsqueeze(3)?;
        h = h.broadcast_add(&t)?;
        let film = nn::apply(&self.film, cond)?.unsqueeze(2)?.unsqueeze(3)?;
        let gamma = (film.narrow(1, 0, c)? + 1.0)?;
        let beta = film.narrow(1, c, c)?;
        h = h.broadcast_mul(&gamma)?.broadcast_add(&beta)?;
        h = nn::apply(&self.conv2, &nn::silu(&h)?)?;
        Ok((x + h)?)
    }
}

/// Two-level UNet: full-resolution block, one stride-2 level, transposed-conv
/// upsampling with a skip connection.
pub struct UNet {
    pub config: UNetConfig,
    store: ParamStore,
    time_mlp: Linear,
    conv_in: Conv,
    block1: FilmBlock,
    down: Conv,
    block2: FilmBlock,
    up: UpConv,
    merge: Conv,
    block3: FilmBlock,
    conv_out: Conv,
}

impl std::fmt::Debug for UNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UNet")
            .field("config", &self.config)
            .field("store", &self.store)
            .finish()
    }
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.width == 0 || config.latent_channels == 0 || config.cond_dim == 0 || config.time_dim % 2 != 0 {
            return config_err(format!("invalid UNet config {config:?}"));
        }
        let mut s = ParamStore::new(seed, DType::F32);
        let (w, c, td, cd) = (config.width, config.latent_channels, config.time_dim, config.cond_dim);
        Ok(Self {
            time_mlp: s.linear("time_mlp", td, td)?,
            conv_in: s.conv2d("conv_in", c, w, 3, 1)?,
            block1: FilmBlock::new(&mut s, "block1", w, td, cd)?,
            down: s.conv2d("down", w, 2 * w, 3, 2)?,
            block2: FilmBlock::new(&mut s, "block2", 2 * w, td, cd)?,
            up: s.up_conv("up", 2 * w, w)?,
            merge: s.conv2d("merge", 2 * w, w, 3, 1)?,
            block3: FilmBlock::new(&mut s, "block3", w, td, cd)?,
            conv_out: s.conv2d("conv_out", w, c, 3, 1)?,
            config,
            store: s,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn to_arrays(&self) -> Result<BTreeMap<String, Array>> {
        self.store.to_arrays()
    }

    pub fn from_arrays(config: UNetConfig, arrays: &BTreeMap<String, Array>) -> Result<Self> {
        let unet = Self::new(config, 0)?;
        unet.store.load_arrays(arrays)?;
        Ok(unet)
    }
}

impl Denoiser for UNet {
    fn predict(&self, z: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.config.latent_channels || cond.dim(1)? != self.config.cond_dim {
            return input_err(format!(
                "UNet expects {} channels and condition dim {}, got {c} and {}",
                self.config.latent_channels,
                self.config.cond_dim,
                cond.dim(1)?
            ));
        }
        let t: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
        let temb = nn::sinusoidal_embedding(&t, self.config.time_dim, DType::F32)?;
        let temb = nn::silu(&nn::apply(&self.time_mlp, &temb)?)?;
        let h0 = nn::apply(&self.conv_in, z)?;
        let h1 = self.block1.forward(&h0, &temb, cond)?;
        let h2 = nn::apply(&self.down, &h1)?;
        let h2 = self.block2.forward(&h2, &temb, cond)?;
        let u = nn::apply(&self.up, &h2)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
        let u = nn::apply(&self.merge, &Tensor::cat(&[&u, &h1], 1)?)?;
        let u = self.block3.forward(&u, &temb, cond)?;
        nn::apply(&self.conv_out, &nn::silu(&u)?)
    }
}

fn stack_embeddings(conds: &[&Embedding], dtype: DType) -> Result<Tensor> {
    let d = conds.first().map(|e| e.dim()).unwrap_or(0);
    let mut data = Vec::with_capacity(conds.len() * d);
    for e in conds {
        if e.dim() != d {
            return input_err("condition embeddings have mixed dimensions");
        }
        data.extend_from_slice(&e.values);
    }
    Ok(Tensor::from_vec(data, (conds.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Ancestral sampling of one latent per `(condition, seed)` pair on `k` evenly
/// strided steps. Each item draws its noise from its own seed, so results do not
/// depend on how candidates are batched.
pub fn ddpm_sample_batch(
    conds: &[&Embedding],
    seeds: &[u64],
    model: &impl Denoiser,
    sched: &NoiseSchedule,
    shape: LatentShape,
    k: usize,
) -> Result<Vec<LatentTensor>> {
    if conds.len() != seeds.len() {
        return input_err("ddpm_sample_batch: one seed per condition required");
    }
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let b = conds.len();
    let per = shape.numel();
    let dtype = model.dtype();
    let cond = stack_embeddings(conds, dtype)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let mut v = Vec::with_capacity(b * per);
        for r in rngs.iter_mut() {
            v.extend((0..per).map(|_| r.sample::<f64, _>(StandardNormal)));
        }
        Ok(Tensor::from_vec(v, (b, shape.channels, shape.height, shape.width), &Device::Cpu)?.to_dtype(dtype)?)
    };
    let ts = sched.respaced(k)?;
    let mut z = draw(&mut rngs)?;
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let t_prev = if i == 0 { 0 } else { ts[i - 1] };
        let (ab, ab_prev) = (sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev));
        let beta = 1.0 - ab / ab_prev;
        let eps = model.predict(&z, &vec![t; b], &cond)?;
        let mean = ((&z - (eps * (beta / (1.0 - ab).sqrt()))?)? / (1.0 - beta).sqrt())?;
        z = if t_prev > 0 {
            let var = beta * (1.0 - ab_prev) / (1.0 - ab);
            (mean + (draw(&mut rngs)? * var.sqrt())?)?
        } else {
            mean
        };
    }
    let rows = z.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2::<f32>()?;
    let out: Vec<LatentTensor> = rows
        .into_iter()
        .map(|v| LatentTensor::new(v, shape.channels, shape.height, shape.width))
        .collect::<Result<_>>()?;
    if out.iter().any(|l| !l.is_finite()) {
        return Err(FlabError::Numerical("sampler produced non-finite latents".into()));
    }
    Ok(out)
}

pub fn ddpm_sample(
    cond: &Embedding,
    model: &impl Denoiser,
    sched: &NoiseSchedule,
    seed: u64,
    shape: LatentShape,
    k: usize,
) -> Result<LatentTensor> {
    Ok(ddpm_sample_batch(&[cond], &[seed], model, sched, shape, k)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    AudioEmbedding,
    TunedTextEmbedding,
}

impl ConditionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AudioEmbedding => "audio_embedding",
            Self::TunedTextEmbedding => "tuned_text_embedding",
        }
    }
}

/// Standardized latents with one condition embedding each, stacked once.
#[derive(Debug, Clone)]
pub struct LdmData {
    pub latents: Tensor,
    pub conds: Tensor,
    pub source: ConditionSource,
}

impl LdmData {
    pub fn new(latents: &[LatentTensor], conds: &[Embedding], source: ConditionSource) -> Result<Self> {
        if latents.is_empty() || latents.len() != conds.len() {
            return input_err(format!("{} latents vs {} conditions", latents.len(), conds.len()));
        }
        let shape = latents[0].shape();
        let mut data = Vec::with_capacity(latents.len() * shape.numel());
        for l in latents {
            if l.shape() != shape {
                return input_err("training latents have mixed shapes");
            }
            data.extend_from_slice(&l.values);
        }
        let latents_t = Tensor::from_vec(
            data,
            (latents.len(), shape.channels, shape.height, shape.width),
            &Device::Cpu,
        )?;
        let refs: Vec<&Embedding> = conds.iter().collect();
        Ok(Self {
            latents: latents_t,
            conds: stack_embeddings(&refs, DType::F32)?,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cond_dim(&self) -> usize {
        self.conds.dims()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing a condition with zeros.
    pub cond_dropout: f64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            cond_dropout: 0.0,
        }
    }
}

/// Adam over the UNet and, when trainable, the tuner.
pub fn ldm_optimizer(unet: &UNet, tuner: Option<&TuningLayer>, lr: f64) -> Result<Adam> {
    let mut vars: Vec<(String, &candle_core::Var)> = unet
        .store()
        .vars()
        .iter()
        .map(|(k, v)| (format!("unet.{k}"), v))
        .collect();
    if let Some(t) = tuner {
        vars.extend(t.named_vars());
    }
    Adam::new(vars, AdamConfig::with_lr(lr))
}

/// Draws the batch for `step`; each step has its own derived seed so a resumed run
/// replays the same batches.
fn step_batch(
    data: &LdmData,
    sched: &NoiseSchedule,
    cfg: &LdmTrainConfig,
    step: usize,
) -> Result<(DiffusionBatch, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[step as u64]));
    let b = cfg.batch_size.min(data.len()).max(1);
    let ids: Vec<u32> = (0..b).map(|_| rng.random_range(0..data.len() as u32)).collect();
    let ids = Tensor::from_vec(ids, b, &Device::Cpu)?;
    let z0 = data.latents.index_select(&ids, 0)?;
    let mut cond = data.conds.index_select(&ids, 0)?;
    let mut dropped = 0;
    if cfg.cond_dropout > 0.0 {
        let keep: Vec<f32> = (0..b)
            .map(|_| {
                if rng.random::<f64>() < cfg.cond_dropout {
                    dropped += 1;
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        cond = cond.broadcast_mul(&Tensor::from_vec(keep, (b, 1), &Device::Cpu)?)?;
    }
    Ok((DiffusionBatch::draw(z0, cond, sched, &mut rng)?, dropped))
}

/// Denoiser with the tuner applied to the incoming condition.
struct Tuned<'a> {
    unet: &'a UNet,
    tuner: Option<&'a TuningLayer>,
}

impl Denoiser for Tuned<'_> {
    fn predict(&self, z: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        match self.tuner {
            Some(t) => self.unet.predict(z, steps, &t.apply_tensor(cond)?),
            None => self.unet.predict(z, steps, cond),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LdmTrainReport {
    /// Per-dimension loss at every step taken in this call.
    pub losses: Vec<f64>,
    pub conditions_dropped: usize,
}

/// Optimizes the per-dimension epsilon loss from `opt.steps_taken()` up to
/// `cfg.steps`, calling `hook(step)` after each step. With tuned-text
/// conditions a tuner must be supplied; it is applied in-graph.
pub fn train_ldm(
    unet: &UNet,
    tuner: Option<&TuningLayer>,
    data: &LdmData,
    sched: &NoiseSchedule,
    cfg: &LdmTrainConfig,
    opt: &mut Adam,
    hook: &mut dyn FnMut(usize, &Adam) -> Result<()>,
) -> Result<LdmTrainReport> {
    match (data.source, tuner) {
        (ConditionSource::TunedTextEmbedding, None) => {
            return config_err("tuned-text conditions need a tuning layer");
        }
        (ConditionSource::AudioEmbedding, Some(_)) => {
            return config_err("audio-embedding conditions are not passed through the tuner");
        }
        _ => {}
    }
    if data.cond_dim() != unet.config.cond_dim {
        return config_err(format!(
            "conditions have dimension {}, UNet expects {}",
            data.cond_dim(),
            unet.config.cond_dim
        ));
    }
    let model = Tuned { unet, tuner };
    let mut report = LdmTrainReport::default();
    let start = opt.steps_taken() as usize;
    for step in start..cfg.steps {
        let (batch, dropped) = step_batch(data, sched, cfg, step)?;
        report.conditions_dropped += dropped;
        let loss = training_loss_per_dim(&batch, &model, sched)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(FlabError::Numerical(format!("LDM loss became {value} at step {step}")));
        }
        report.losses.push(value);
        opt.backward_step(&loss)?;
        hook(step + 1, opt)?;
    }
    Ok(report)
}

/// Deterministic per-dimension loss over every item, `draws` noise draws each.
pub fn validation_loss(
    unet: &UNet,
    tuner: Option<&TuningLayer>,
    data: &LdmData,
    sched: &NoiseSchedule,
    seed: u64,
    draws: usize,
) -> Result<f64> {
    let model = Tuned { unet, tuner };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..draws {
        let mut start = 0;
        while start < data.len() {
            let len = (data.len() - start).min(64);
            let z0 = data.latents.narrow(0, start, len)?;
            let cond = data.conds.narrow(0, start, len)?;
            let batch = DiffusionBatch::draw(z0, cond, sched, &mut rng)?;
            total += nn::scalar(&training_loss_per_dim(&batch, &model, sched)?)? * len as f64;
            count += len;
            start += len;
        }
    }
    Ok(total / count.max(1) as f64)
}
