//! A small contrastive language-audio encoder.
//!
//! Audio branch: three stride-2 convolutions over the log-mel image, global
//! mean pool, linear projection. Text branch: word-embedding table, mean pool,
//! two-layer perceptron. Both branches emit unit-norm vectors of the same
//! dimension and are trained jointly with a symmetric InfoNCE loss.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::Linear;
use rand::prelude::IndexedRandom;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::checkpoint::{Array, Container};
use crate::embedding::Embedding;
use crate::error::{input_err, FlabError, Result};
use crate::nn::{self, Adam, AdamConfig, Conv, ParamStore};
use crate::synth::LabelTable;

pub const UNK: &str = "<unk>";

/// Extra words accepted by the tokenizer beyond those in the label table.
pub const ADJUNCT_WORDS: &[&str] = &[
    "a", "an", "the", "of", "and", "sound", "someone", "using", "moving", "motor", "driving", "car", "vehicle",
    "engine", "walking", "falling", "noise", "loud", "soft",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return input_err(format!("vocabulary must start with {UNK}"));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Self { tokens, index })
    }

    /// Words of every label and wrapped text in `table`, plus [`ADJUNCT_WORDS`].
    pub fn build(table: &LabelTable) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for label in table.labels() {
            set.insert(label.to_lowercase());
            set.extend(words(label));
        }
        for text in table.texts() {
            set.extend(words(text));
        }
        set.extend(ADJUNCT_WORDS.iter().map(|w| w.to_string()));
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(set);
        Self::from_tokens(tokens).expect("starts with unk")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercased word-level tokenization; unknown words map to `<unk>`.
    pub fn tokenize(&self, raw: &str) -> Result<TextPrompt> {
        let tokens: Vec<u32> = words(raw).map(|w| self.index.get(&w).copied().unwrap_or(0)).collect();
        if tokens.is_empty() {
            return input_err(format!("prompt `{raw}` has no tokens"));
        }
        Ok(TextPrompt {
            tokens,
            raw: raw.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.tokens.iter().map(|t| format!("{t}\n")).collect();
        std::fs::write(path, text).map_err(|e| FlabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlabError::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TextPrompt {
    pub tokens: Vec<u32>,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClapConfig {
    pub embed_dim: usize,
    pub word_dim: usize,
    pub text_hidden: usize,
    pub channels: [usize; 3],
    pub n_mels: usize,
    pub frames: usize,
    pub init_temperature: f64,
}

impl ClapConfig {
    pub fn desk(n_mels: usize, frames: usize) -> Self {
        Self {
            embed_dim: 64,
            word_dim: 32,
            text_hidden: 64,
            channels: [16, 32, 64],
            n_mels,
            frames,
            init_temperature: 0.07,
        }
    }

    pub fn tiny(n_mels: usize, frames: usize) -> Self {
        Self {
            embed_dim: 32,
            ..Self::desk(n_mels, frames)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClapTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClapTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub struct ClapModel {
    pub config: ClapConfig,
    pub vocab: Vocabulary,
    store: ParamStore,
    word_table: Tensor,
    text_hidden: Linear,
    text_out: Linear,
    convs: Vec<Conv>,
    audio_out: Linear,
    log_temperature: Tensor,
    /// Affine input normalization of log-mel values, fitted on training data.
    input_stats: (f32, f32),
}

impl std::fmt::Debug for ClapModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClapModel")
            .field("config", &self.config)
            .field("vocab", &self.vocab.len())
            .field("store", &self.store)
            .finish()
    }
}

impl ClapModel {
    pub fn new(config: ClapConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed, DType::F32);
        let word_table = store.uniform("text.words", &[vocab.len(), config.word_dim], 1.0)?;
        let text_hidden = store.linear("text.hidden", config.word_dim, config.text_hidden)?;
        let text_out = store.linear("text.out", config.text_hidden, config.embed_dim)?;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(store.conv2d(&format!("audio.conv{i}"), c_in, c, 3, 2)?);
            c_in = c;
        }
        let audio_out = store.linear("audio.out", c_in, config.embed_dim)?;
        let log_t = Tensor::new(&[config.init_temperature.ln() as f32], &Device::Cpu)?;
        let log_temperature = store.insert("log_temperature", log_t)?;
        Ok(Self {
            config,
            vocab,
            store,
            word_table,
            text_hidden,
            text_out,
            convs,
            audio_out,
            log_temperature,
            input_stats: (0.0, 1.0),
        })
    }

    pub fn temperature(&self) -> Result<f64> {
        Ok(nn::scalar(&self.log_temperature.exp()?.squeeze(0)?)?)
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(B, D)` unit-norm text features.
    pub fn text_features(&self, prompts: &[&TextPrompt]) -> Result<Tensor> {
        let v = self.vocab.len();
        let mut bow = vec![0f32; prompts.len() * v];
        for (b, p) in prompts.iter().enumerate() {
            if p.tokens.is_empty() {
                return input_err("empty token sequence");
            }
            let w = 1.0 / p.tokens.len() as f32;
            for &t in &p.tokens {
                if t as usize >= v {
                    return input_err(format!("token id {t} outside vocabulary of {v}"));
                }
                bow[b * v + t as usize] += w;
            }
        }
        let bow = Tensor::from_vec(bow, (prompts.len(), v), &Device::Cpu)?;
        let pooled = bow.matmul(&self.word_table)?;
        let h = nn::silu(&nn::apply(&self.text_hidden, &pooled)?)?;
        nn::l2_normalize(&nn::apply(&self.text_out, &h)?)
    }

    pub fn mels_to_tensor(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        let (m, t) = (self.config.n_mels, self.config.frames);
        let (mean, std) = self.input_stats;
        let mut data = Vec::with_capacity(mels.len() * m * t);
        for mel in mels {
            if mel.n_mels != m || mel.frames != t {
                return input_err(format!(
                    "encoder expects {m}x{t} mels, got {}x{}",
                    mel.n_mels, mel.frames
                ));
            }
            data.extend(mel.values.iter().map(|v| (v - mean) / std));
        }
        Ok(Tensor::from_vec(data, (mels.len(), 1, m, t), &Device::Cpu)?)
    }

    /// `(B, D)` unit-norm audio features from a normalized `(B, 1, M, T)` batch.
    pub fn audio_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = nn::silu(&nn::apply(conv, &h)?)?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        nn::l2_normalize(&nn::apply(&self.audio_out, &pooled)?)
    }

    pub fn encode_text(&self, prompt: &TextPrompt) -> Result<Embedding> {
        let f = self.text_features(&[prompt])?;
        Ok(Embedding::unit(f.squeeze(0)?.to_vec1::<f32>()?))
    }

    pub fn encode_audio(&self, mel: &MelSpectrogram) -> Result<Embedding> {
        Ok(self.encode_audios(&[mel])?.remove(0))
    }

    pub fn encode_audios(&self, mels: &[&MelSpectrogram]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(mels.len());
        for chunk in mels.chunks(64) {
            let f = self.audio_features(&self.mels_to_tensor(chunk)?)?;
            out.extend(f.to_vec2::<f32>()?.into_iter().map(Embedding::unit));
        }
        Ok(out)
    }

    /// Symmetric InfoNCE over the `B x B` cosine matrix scaled by 1/temperature.
    pub fn contrastive_loss(&self, audio: &Tensor, text: &Tensor) -> Result<Tensor> {
        let b = audio.dim(0)?;
        let logits = audio.matmul(&text.t()?)?.broadcast_div(&self.log_temperature.exp()?)?;
        let targets = Tensor::arange(0u32, b as u32, &Device::Cpu)?;
        let a2t = candle_nn::loss::cross_entropy(&logits, &targets)?;
        let t2a = candle_nn::loss::cross_entropy(&logits.t()?.contiguous()?, &targets)?;
        Ok(((a2t + t2a)? * 0.5)?)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "kind": "clap",
            "config": self.config,
            "vocab": self.vocab.tokens(),
        });
        let mut c = Container::new(meta);
        c.extend_prefixed("clap", self.to_arrays()?);
        Ok(c)
    }

    pub fn to_arrays(&self) -> Result<BTreeMap<String, Array>> {
        let mut arrays = self.store.to_arrays()?;
        arrays.insert(
            "input_stats".into(),
            Array::vector(vec![self.input_stats.0, self.input_stats.1]),
        );
        Ok(arrays)
    }

    pub fn from_arrays(config: ClapConfig, vocab: Vocabulary, arrays: &BTreeMap<String, Array>) -> Result<Self> {
        let mut model = Self::new(config, vocab, 0)?;
        model.store.load_arrays(arrays)?;
        let stats = arrays
            .get("input_stats")
            .ok_or_else(|| FlabError::Input("clap checkpoint lacks input_stats".into()))?;
        model.input_stats = (stats.data[0], stats.data[1]);
        Ok(model)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ClapConfig = serde_json::from_value(c.metadata["clap_config"].clone())
            .or_else(|_| serde_json::from_value(c.metadata["config"].clone()))?;
        let vocab_value = if c.metadata.get("clap_vocab").is_some() {
            c.metadata["clap_vocab"].clone()
        } else {
            c.metadata["vocab"].clone()
        };
        let vocab = Vocabulary::from_tokens(serde_json::from_value(vocab_value)?)?;
        Self::from_arrays(config, vocab, &c.subset("clap"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClapTrainReport {
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub reshuffles: usize,
}

/// Shuffles `idx` until no batch of size > 1 holds a single text (i.e. class).
fn batches(
    idx: &mut [usize],
    prompts: &[&TextPrompt],
    batch: usize,
    rng: &mut ChaCha8Rng,
    reshuffles: &mut usize,
) -> Vec<Vec<usize>> {
    for _ in 0..16 {
        idx.shuffle(rng);
        let degenerate = idx
            .chunks(batch)
            .any(|c| c.len() > 1 && c.iter().all(|&i| prompts[i] == prompts[c[0]]));
        if !degenerate {
            break;
        }
        log::warn!("single-class contrastive batch; reshuffling");
        *reshuffles += 1;
    }
    idx.chunks(batch)
        .filter(|c| c.len() > 1)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains both branches on `(mel, prompt)` pairs. Requires at least two distinct prompts.
pub fn train_contrastive(
    pairs: &[(&MelSpectrogram, &TextPrompt)],
    config: ClapConfig,
    vocab: Vocabulary,
    train: &ClapTrainConfig,
) -> Result<(ClapModel, ClapTrainReport)> {
    let distinct: std::collections::HashSet<&TextPrompt> = pairs.iter().map(|p| p.1).collect();
    if distinct.len() < 2 {
        return input_err("contrastive training needs at least two distinct classes");
    }
    let mut model = ClapModel::new(config, vocab, train.seed)?;
    let n_values: usize = pairs.iter().map(|p| p.0.values.len()).sum();
    let mean = pairs
        .iter()
        .flat_map(|p| p.0.values.iter())
        .map(|&v| v as f64)
        .sum::<f64>()
        / n_values as f64;
    let var = pairs
        .iter()
        .flat_map(|p| p.0.values.iter())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n_values as f64;
    model.input_stats = (mean as f32, var.sqrt().max(1e-6) as f32);

    let mels: Vec<&MelSpectrogram> = pairs.iter().map(|p| p.0).collect();
    let prompts: Vec<&TextPrompt> = pairs.iter().map(|p| p.1).collect();
    let all_audio = model.mels_to_tensor(&mels)?;
    let mut opt = Adam::new(
        model.store.vars().iter().map(|(k, v)| (k.clone(), v)),
        AdamConfig::with_lr(train.lr),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xC1A9);
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    let batch = train.batch_size.max(2);
    let mut reshuffles = 0;
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut initial_loss = f64::NAN;
    for epoch in 0..train.epochs {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in batches(&mut idx, &prompts, batch, &mut rng, &mut reshuffles) {
            let ids = Tensor::from_vec(
                chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                chunk.len(),
                &Device::Cpu,
            )?;
            let audio = model.audio_features(&all_audio.index_select(&ids, 0)?)?;
            let batch_prompts: Vec<&TextPrompt> = chunk.iter().map(|&i| prompts[i]).collect();
            let text = model.text_features(&batch_prompts)?;
            let loss = model.contrastive_loss(&audio, &text)?;
            let value = nn::scalar(&loss)?;
            if !value.is_finite() {
                return Err(FlabError::Numerical(format!(
                    "contrastive loss became {value} in epoch {epoch}"
                )));
            }
            if initial_loss.is_nan() {
                initial_loss = value;
            }
            total += value;
            count += 1;
            opt.backward_step(&loss)?;
        }
        epoch_losses.push(total / count.max(1) as f64);
    }
    Ok((
        model,
        ClapTrainReport {
            epoch_losses,
            initial_loss,
            reshuffles,
        },
    ))
}

/// Text→audio top-1 retrieval accuracy.
///
/// For every held-out clip, a gallery is formed from the clip plus one random
/// clip of each other class; the query is the clip's class prompt, and the
/// trial succeeds when the clip itself ranks first.
pub fn retrieval_accuracy(
    model: &ClapModel,
    clips: &[(&MelSpectrogram, &str)],
    prompts: &BTreeMap<String, TextPrompt>,
    seed: u64,
) -> Result<f64> {
    let mels: Vec<&MelSpectrogram> = clips.iter().map(|c| c.0).collect();
    let audio = model.encode_audios(&mels)?;
    let mut text = BTreeMap::new();
    for (class, p) in prompts {
        text.insert(class.as_str(), model.encode_text(p)?);
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        by_class.entry(c.1).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for (i, &(_, class)) in clips.iter().enumerate() {
        let query = text
            .get(class)
            .ok_or_else(|| FlabError::Lookup(format!("no prompt for class {class}")))?;
        let own = query.dot(&audio[i]);
        let mut best_other = f64::NEG_INFINITY;
        for (other, members) in &by_class {
            if *other == class {
                continue;
            }
            let j = *members.choose(&mut rng).expect("non-empty class");
            best_other = best_other.max(query.dot(&audio[j]));
        }
        if own > best_other {
            hits += 1;
        }
    }
    Ok(hits as f64 / clips.len().max(1) as f64)
}
