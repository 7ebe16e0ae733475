use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::audio::{StftConfig, Waveform};
use crate::clap_lite::ClapModel;
use crate::config::RunConfig;
use crate::diffusion::{ddpm_sample_batch, NoiseSchedule, UNet};
use crate::embedding::Embedding;
use crate::error::{config_err, input_err, FlabError, Result};
use crate::mel_vae::{LatentShape, LatentTensor, MelVae};
use crate::selector::{
    build_audio_target_pool, calibrate_class, calibration_csv, draw_target, select, Candidate, CandidatePool,
    SelectionMode, SelectionPolicy, TargetSource,
};
use crate::synth::{derive_seed, fnv1a, ManifestEntry, Split};
use crate::tuner::TuningLayer;
use crate::vocoder::{mel_to_wav_batch, VocoderConfig};

use super::{embed_waveforms, write_jsonl, write_text, Bundle};

const SAMPLE_CHUNK: usize = 64;

/// Sampling front to back: condition, LDM, VAE decoder, vocoder, audio embedding.
pub struct Generator<'a> {
    pub clap: &'a ClapModel,
    pub vae: &'a MelVae,
    pub unet: &'a UNet,
    pub tuner: Option<&'a TuningLayer>,
    pub sched: NoiseSchedule,
    pub shape: LatentShape,
    pub stft: StftConfig,
    pub frames: usize,
    pub clip_samples: usize,
    pub sample_steps: usize,
    pub vocoder: VocoderConfig,
}

/// Candidates for one class in group-major order: `k` per requested clip.
pub struct CandidateSet {
    pub class: String,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub waves: Vec<Waveform>,
    pub embeddings: Vec<Embedding>,
}

impl CandidateSet {
    pub fn groups(&self) -> usize {
        self.waves.len() / self.k.max(1)
    }

    /// The candidates of requested clip `g`, scored against `target`.
    pub fn pool(&self, g: usize, target: &Embedding) -> Result<CandidatePool> {
        let candidates = (g * self.k..(g + 1) * self.k)
            .map(|i| {
                Ok(Candidate {
                    clip_id: format!("{:02}", i - g * self.k),
                    audio: None,
                    embedding: self.embeddings[i].clone(),
                    score: self.embeddings[i].cosine(target)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(CandidatePool {
            class: self.class.clone(),
            candidates,
        })
    }
}

/// Selection targets for one class.
#[derive(Debug, Clone)]
pub enum Targets {
    Single(Embedding),
    /// One target is drawn per requested clip.
    Pool(Vec<Embedding>),
}

impl Targets {
    fn for_group(&self, class: &str, g: usize, seed: u64) -> Result<&Embedding> {
        match self {
            Targets::Single(t) => Ok(t),
            Targets::Pool(ts) => draw_target(ts, derive_seed(seed, &[fnv1a(class), g as u64, 0x7A])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub clip_id: String,
    pub class: String,
    pub seed: u64,
    /// Index of the emitted candidate within its group.
    pub chosen: usize,
    pub scores: Vec<f64>,
    pub waveform: Waveform,
    pub embedding: Embedding,
}

impl<'a> Generator<'a> {
    pub fn from_bundle(b: &'a Bundle, vocoder_iters: usize) -> Result<Self> {
        Ok(Self {
            clap: &b.clap,
            vae: &b.vae,
            unet: &b.unet,
            tuner: b.tuner.as_ref(),
            sched: b.schedule()?,
            shape: b.latent_shape(),
            stft: b.meta.stft.clone(),
            frames: b.meta.frames,
            clip_samples: b.meta.clip_samples,
            sample_steps: b.meta.schedule.sample_steps,
            vocoder: VocoderConfig::new(&b.meta.stft, vocoder_iters)?,
        })
    }

    pub fn text_embedding(&self, prompt: &str) -> Result<Embedding> {
        self.clap.encode_text(&self.clap.vocab.tokenize(prompt)?)
    }

    /// The LDM condition for `prompt`: the text embedding passed through the tuner.
    pub fn condition(&self, prompt: &str) -> Result<Embedding> {
        let e = self.text_embedding(prompt)?;
        match self.tuner {
            Some(t) => t.apply(&e),
            None => Ok(e),
        }
    }

    /// Waveforms for the given latents, cropped to the clip length.
    pub fn render(&self, latents: &[LatentTensor], seeds: &[u64]) -> Result<Vec<Waveform>> {
        let raw: Vec<LatentTensor> = latents.iter().map(|z| self.vae.destandardize(z)).collect();
        let refs: Vec<&LatentTensor> = raw.iter().collect();
        let mels: Vec<_> = self
            .vae
            .decode_batch(&refs, &self.stft)?
            .into_iter()
            .map(|m| m.crop_frames(self.frames))
            .collect();
        let mel_refs: Vec<_> = mels.iter().collect();
        let voc_seeds: Vec<u64> = seeds.iter().map(|&s| derive_seed(s, &[0x70C])).collect();
        let mut waves = mel_to_wav_batch(&mel_refs, &voc_seeds, &self.vocoder)?;
        for w in &mut waves {
            w.samples.resize(self.clip_samples, 0.0);
        }
        Ok(waves)
    }

    /// `groups * k` candidates for one class under `cond`. Candidate seeds depend
    /// only on `(seed, class, group, index)`.
    pub fn candidates(
        &self,
        class: &str,
        cond: &Embedding,
        groups: usize,
        k: usize,
        seed: u64,
    ) -> Result<CandidateSet> {
        if k == 0 {
            return input_err("candidate pool size must be at least 1");
        }
        let seeds: Vec<u64> = (0..groups)
            .flat_map(|g| (0..k).map(move |j| derive_seed(seed, &[fnv1a(class), g as u64, j as u64])))
            .collect();
        let mut waves = Vec::with_capacity(seeds.len());
        for chunk in seeds.chunks(SAMPLE_CHUNK) {
            let conds = vec![cond; chunk.len()];
            let z = ddpm_sample_batch(&conds, chunk, self.unet, &self.sched, self.shape, self.sample_steps)?;
            waves.extend(self.render(&z, chunk)?);
        }
        let embeddings = embed_waveforms(self.clap, &self.stft, &waves)?;
        Ok(CandidateSet {
            class: class.to_string(),
            k,
            seeds,
            waves,
            embeddings,
        })
    }
}

/// One clip per group: the first id `select` returns with `want = 1`.
pub fn emit(set: &CandidateSet, policy: &SelectionPolicy, targets: &Targets, seed: u64) -> Result<Vec<GeneratedClip>> {
    (0..set.groups())
        .map(|g| {
            let target = targets.for_group(&set.class, g, seed)?;
            let pool = set.pool(g, target)?;
            let id = select(&pool, policy, 1)?
                .into_iter()
                .next()
                .ok_or_else(|| FlabError::Input(format!("selection emitted nothing for {} group {g}", set.class)))?;
            let chosen: usize = id.parse().expect("candidate ids are indices");
            let i = g * set.k + chosen;
            Ok(GeneratedClip {
                clip_id: format!("{}_gen_{g:04}", set.class),
                class: set.class.clone(),
                seed: set.seeds[i],
                chosen,
                scores: pool.candidates.iter().map(|c| c.score).collect(),
                waveform: set.waves[i].clone(),
                embedding: set.embeddings[i].clone(),
            })
        })
        .collect()
}

fn normalized(e: Embedding) -> Embedding {
    Embedding::unit(e.values)
}

/// Selection targets for `class` under `source`.
pub(crate) fn class_targets(
    gen: &Generator,
    cfg: &RunConfig,
    source: TargetSource,
    class: &str,
    prompt: &str,
    train_embeddings: &mut Option<BTreeMap<String, Vec<Embedding>>>,
) -> Result<Targets> {
    match source {
        TargetSource::TunedText => Ok(Targets::Single(normalized(gen.condition(prompt)?))),
        TargetSource::TextVariant => {
            let variants = cfg
                .selection
                .text_variants
                .get(class)
                .cloned()
                .unwrap_or_else(|| vec![prompt.to_string()]);
            let ts = variants
                .iter()
                .map(|p| gen.text_embedding(p).map(normalized))
                .collect::<Result<Vec<_>>>()?;
            Ok(Targets::Pool(ts))
        }
        TargetSource::AudioEmbeddingPool => {
            if train_embeddings.is_none() {
                *train_embeddings = Some(super::reference_embeddings(cfg, gen.clap, Split::Train)?);
            }
            let by_class = train_embeddings.as_ref().expect("filled above");
            let embs = by_class
                .get(class)
                .ok_or_else(|| FlabError::Input(format!("no training clips of {class} for the audio target pool")))?;
            let pool = build_audio_target_pool(embs, cfg.selection.audio_pool_top_m)?;
            Ok(Targets::Pool(pool.into_iter().map(|(_, e)| e).collect()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub labels: Vec<String>,
    pub count: usize,
    pub pool_size: usize,
    pub mode: SelectionMode,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    clip_id: &'a str,
    class: &'a str,
    chosen: usize,
    scores: &'a [f64],
}

fn check_labels<'b>(bundle: &'b Bundle, labels: &[String]) -> Result<Vec<(&'b str, &'b str)>> {
    labels
        .iter()
        .map(|l| {
            bundle
                .meta
                .prompts
                .get_key_value(l)
                .map(|(k, v)| (k.as_str(), v.as_str()))
                .ok_or_else(|| {
                    let valid: Vec<&str> = bundle.meta.prompts.keys().map(String::as_str).collect();
                    FlabError::Lookup(format!("unknown label `{l}`; valid labels: {}", valid.join(", ")))
                })
        })
        .collect()
}

/// Samples, selects and writes `count` clips per label into `out_dir`, with a
/// `generated.jsonl` manifest and, under selection, a `scores.jsonl` sidecar.
pub fn cmd_generate(cfg: &RunConfig, bundle: &Bundle, req: &GenerateRequest) -> Result<Vec<GeneratedClip>> {
    if bundle.meta.prompts.is_empty() {
        return input_err("generation needs a fine-tuned bundle");
    }
    let classes = check_labels(bundle, &req.labels)?;
    let policy = SelectionPolicy {
        pool_size: req.pool_size,
        mode: req.mode,
        seed: req.seed,
        ..cfg.policy()
    };
    policy.validate()?;
    let gen = Generator::from_bundle(bundle, cfg.generate.vocoder_iters)?;
    let mut train_embeddings = None;
    let mut all = Vec::new();
    for (class, prompt) in classes {
        let targets = class_targets(&gen, cfg, policy.target_source, class, prompt, &mut train_embeddings)?;
        let cond = gen.condition(prompt)?;
        let set = gen.candidates(class, &cond, req.count, req.pool_size, req.seed)?;
        all.extend(emit(&set, &policy, &targets, req.seed)?);
    }
    write_generated(&req.out_dir, &all, bundle, policy.mode != SelectionMode::None)?;
    cfg.save(&req.out_dir.join("config.toml"))?;
    Ok(all)
}

pub(crate) fn write_generated(out_dir: &Path, clips: &[GeneratedClip], bundle: &Bundle, sidecar: bool) -> Result<()> {
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        let rel = format!("{}/{}.wav", c.class, c.clip_id);
        c.waveform.write_wav(&out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            clip_id: c.clip_id.clone(),
            class: c.class.clone(),
            text: bundle.meta.prompts.get(&c.class).cloned().unwrap_or_default(),
            seed: c.seed,
            path: rel,
        });
    }
    write_jsonl(&out_dir.join("generated.jsonl"), &entries)?;
    if sidecar {
        let rows: Vec<ScoreRow> = clips
            .iter()
            .map(|c| ScoreRow {
                clip_id: &c.clip_id,
                class: &c.class,
                chosen: c.chosen,
                scores: &c.scores,
            })
            .collect();
        write_jsonl(&out_dir.join("scores.jsonl"), &rows)?;
    }
    Ok(())
}

/// Per-class threshold calibration against the validation split; writes
/// `calibration.csv` and persists the thresholds into `<run_dir>/config.toml`.
pub fn cmd_calibrate(cfg: &RunConfig, bundle: &Bundle, seed: u64) -> Result<BTreeMap<String, f64>> {
    let gen = Generator::from_bundle(bundle, cfg.generate.vocoder_iters)?;
    let reference = super::reference_embeddings(cfg, gen.clap, Split::Val)?;
    let policy = cfg.policy();
    let mut train_embeddings = None;
    let mut thresholds = BTreeMap::new();
    let mut rows = Vec::new();
    for (class, prompt) in &bundle.meta.prompts {
        let targets = class_targets(&gen, cfg, policy.target_source, class, prompt, &mut train_embeddings)?;
        let cond = gen.condition(prompt)?;
        let set = gen.candidates(
            class,
            &cond,
            cfg.selection.calibration_clips,
            cfg.selection.pool_size,
            seed,
        )?;
        let groups = (0..set.groups())
            .map(|g| set.pool(g, targets.for_group(class, g, seed)?))
            .collect::<Result<Vec<_>>>()?;
        let refs = reference.get(class).cloned().unwrap_or_default();
        if refs.len() < 2 {
            return config_err(format!(
                "calibration needs at least 2 validation clips of {class}, found {}",
                refs.len()
            ));
        }
        let (theta, r) = calibrate_class(&groups, &refs, &cfg.selection.calibration_grid)?;
        log::info!("calibrated {class}: theta = {theta}");
        thresholds.insert(class.clone(), theta);
        rows.extend(r);
    }
    write_text(
        &cfg.run_dir.join("calibration").join("calibration.csv"),
        &calibration_csv(&rows),
    )?;
    let mut updated = cfg.clone();
    updated.selection.thresholds = thresholds.clone();
    updated.save(&cfg.run_dir.join("config.toml"))?;
    Ok(thresholds)
}

pub(crate) fn load_generated(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("generated.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| FlabError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FlabError::from))
        .collect()
}
