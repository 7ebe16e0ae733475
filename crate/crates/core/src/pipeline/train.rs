use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::audio::MelSpectrogram;
use crate::checkpoint::Container;
use crate::clap_lite::{train_contrastive, ClapConfig, ClapTrainConfig, TextPrompt, Vocabulary};
use crate::config::{epochs_to_steps, PromptKind, RunConfig, Stage};
use crate::diffusion::{
    ldm_optimizer, make_schedule, train_ldm, ConditionSource, LdmData, LdmTrainConfig, ScheduleKind, UNet, UNetConfig,
};
use crate::embedding::Embedding;
use crate::error::{config_err, FlabError, Result};
use crate::fad::{evaluate_fad, FadReport};
use crate::mel_vae::{train_vae, LatentTensor, MelVae, Posterior, VaeConfig, VaeTrainConfig};
use crate::nn::Adam;
use crate::selector::SelectionPolicy;
use crate::synth::{derive_seed, Split};
use crate::tuner::init_tuning;

use super::generate::{emit, Generator, Targets};
use super::{load_manifest, load_mels, reference_embeddings, write_jsonl, write_text, Bundle, BundleMeta, Lineage};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub stage: Stage,
    pub from_scratch: bool,
    pub freeze_tuner: bool,
    /// Resume even when the snapshot was written under a different config.
    pub force: bool,
    /// Stop (with a snapshot) once this many LDM steps have been taken.
    pub stop_after: Option<usize>,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            stage: cfg.stage,
            from_scratch: cfg.finetune.from_scratch,
            freeze_tuner: cfg.finetune.freeze_tuner,
            force: false,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    /// LDM losses of the steps taken in this invocation.
    pub losses: Vec<f64>,
    pub start_step: usize,
    pub end_step: usize,
    pub total_steps: usize,
    pub lineage: Lineage,
}

impl TrainOutcome {
    pub fn complete(&self) -> bool {
        self.end_step == self.total_steps
    }
}

#[derive(Serialize)]
struct ValRow {
    step: usize,
    pooled_fad: Option<f64>,
    class_mean_fad: Option<f64>,
}

fn snapshot_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.run_dir
        .join("checkpoints")
        .join(format!("{}.snapshot.flab", stage.as_str()))
}

fn save_snapshot(path: &Path, bundle: &Bundle, opt: &Adam) -> Result<()> {
    let mut c = bundle.to_container()?;
    c.extend_prefixed("opt", opt.state_arrays()?);
    c.save(path)
}

/// The snapshot at `path` when present; a config-hash mismatch is an error unless forced.
fn load_snapshot(path: &Path, hash: &str, force: bool) -> Result<Option<(Bundle, Container)>> {
    if !path.exists() {
        return Ok(None);
    }
    let c = Container::load(path)?;
    let b = Bundle::from_container(&c)?;
    if b.meta.config_hash != hash && !force {
        return config_err(format!(
            "snapshot {} was written under config {}, current config is {hash}; pass --force to resume anyway",
            path.display(),
            b.meta.config_hash
        ));
    }
    Ok(Some((b, c)))
}

fn write_losses(cfg: &RunConfig, stage: Stage, start: usize, losses: &[f64]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l:.8}\n", start + i + 1));
    }
    write_text(
        &cfg.run_dir
            .join("logs")
            .join(format!("{}_losses_from_{start}.csv", stage.as_str())),
        &s,
    )
}

fn standardized_latents(vae: &MelVae, mels: &[MelSpectrogram]) -> Result<Vec<LatentTensor>> {
    let refs: Vec<&MelSpectrogram> = mels.iter().collect();
    Ok(vae
        .encode_batch(&refs, Posterior::Mean)?
        .iter()
        .map(|z| vae.standardize(z))
        .collect())
}

/// Trains clap_lite and mel_vae, then the LDM and tuner for `opts.stage`, and
/// writes the resulting bundle to `<run_dir>/checkpoints/<stage>.flab`.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = match opts.stage {
        Stage::Pretrain => pretrain(cfg, opts)?,
        Stage::Finetune => finetune(cfg, opts)?,
    };
    cfg.save(
        &cfg.run_dir
            .join("checkpoints")
            .join(format!("{}.toml", opts.stage.as_str())),
    )?;
    Ok(out)
}

fn clip_samples(cfg: &RunConfig) -> usize {
    (cfg.audio.duration_s * cfg.audio.stft.sample_rate as f64).round() as usize
}

fn pretrain(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let hash = cfg.training_hash()?;
    let pre_m = load_manifest(cfg, Split::Pretrain)?;
    let train_m = load_manifest(cfg, Split::Train)?;
    if pre_m.entries.is_empty() {
        return config_err("the pretraining split is empty");
    }
    let pre_mels = load_mels(cfg, &pre_m)?;
    let train_mels = load_mels(cfg, &train_m)?;
    let frames = pre_mels[0].frames;
    let n_mels = cfg.audio.stft.n_mels;
    let snap = snapshot_path(cfg, Stage::Pretrain);

    let (bundle, opt_state) = match load_snapshot(&snap, &hash, opts.force)? {
        Some((b, c)) => (b, Some(c.subset("opt"))),
        None => {
            let vocab = Vocabulary::build(&cfg.label_table());
            let prompts: Vec<TextPrompt> = pre_m
                .entries
                .iter()
                .chain(&train_m.entries)
                .map(|e| vocab.tokenize(&e.text))
                .collect::<Result<_>>()?;
            let pairs: Vec<(&MelSpectrogram, &TextPrompt)> = pre_mels.iter().chain(&train_mels).zip(&prompts).collect();
            let clap_cfg = ClapConfig {
                embed_dim: cfg.model.embed_dim,
                ..ClapConfig::desk(n_mels, frames)
            };
            let clap_train = ClapTrainConfig {
                epochs: cfg.clap.epochs,
                batch_size: cfg.clap.batch_size,
                lr: cfg.clap.lr,
                seed: derive_seed(cfg.seed, &[1]),
            };
            let (clap, clap_report) = train_contrastive(&pairs, clap_cfg.clone(), vocab, &clap_train)?;
            log::info!("clap: final epoch loss {:?}", clap_report.epoch_losses.last());

            let all: Vec<&MelSpectrogram> = pre_mels.iter().chain(&train_mels).collect();
            let vae_cfg = VaeConfig {
                n_mels,
                compression_level: cfg.model.compression,
                latent_channels: cfg.model.latent_channels,
                hidden: cfg.model.vae_hidden,
                kl_weight: cfg.model.kl_weight,
            };
            let vae_train = VaeTrainConfig {
                steps: epochs_to_steps(cfg.vae.epochs, all.len(), cfg.vae.batch_size),
                batch_size: cfg.vae.batch_size,
                lr: cfg.vae.lr,
                seed: derive_seed(cfg.seed, &[2]),
            };
            let (vae, vae_report) = train_vae(&all, vae_cfg.clone(), &vae_train)?;
            log::info!("vae: final loss {:?}", vae_report.losses.last());

            let unet_cfg = UNetConfig::new(cfg.model.latent_channels, cfg.model.embed_dim, cfg.model.unet_width);
            let unet = UNet::new(unet_cfg.clone(), derive_seed(cfg.seed, &[3]))?;
            let meta = BundleMeta {
                stage: Stage::Pretrain,
                step: 0,
                config_hash: hash.clone(),
                lineage: Lineage::derive(None, Stage::Pretrain, "new", "none", &hash),
                schedule: cfg.schedule.clone(),
                stft: cfg.audio.stft.clone(),
                frames,
                clip_samples: clip_samples(cfg),
                clap_config: clap_cfg,
                clap_vocab: clap.vocab.tokens().to_vec(),
                vae_config: vae_cfg,
                unet_config: unet_cfg,
                condition_source: ConditionSource::AudioEmbedding,
                prompts: BTreeMap::new(),
            };
            (
                Bundle {
                    meta,
                    clap,
                    vae,
                    unet,
                    tuner: None,
                },
                None,
            )
        }
    };

    let latents = standardized_latents(&bundle.vae, &pre_mels)?;
    let refs: Vec<&MelSpectrogram> = pre_mels.iter().collect();
    let mut conds = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(128) {
        conds.extend(bundle.clap.encode_audios(chunk)?);
    }
    let data = LdmData::new(&latents, &conds, ConditionSource::AudioEmbedding)?;
    let train_cfg = LdmTrainConfig {
        steps: epochs_to_steps(cfg.pretrain.epochs, data.len(), cfg.pretrain.batch_size),
        batch_size: cfg.pretrain.batch_size,
        lr: cfg.pretrain.lr,
        seed: derive_seed(cfg.seed, &[4]),
        cond_dropout: 0.0,
    };
    run_ldm(cfg, opts, Stage::Pretrain, bundle, opt_state, &data, train_cfg, None)
}

fn finetune(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let hash = cfg.training_hash()?;
    let pre_path = cfg.pretrained_path();
    if !pre_path.exists() {
        return config_err(format!(
            "fine-tuning needs a pretrain checkpoint at {} (clap_lite and mel_vae come from it)",
            pre_path.display()
        ));
    }
    let pre = Bundle::load(&pre_path)?;
    if pre.meta.stage != Stage::Pretrain {
        return config_err(format!("{} is not a pretrain checkpoint", pre_path.display()));
    }
    let train_m = load_manifest(cfg, Split::Train)?;
    let train_mels = load_mels(cfg, &train_m)?;
    let classes = train_m.classes();
    let labels = cfg.label_table();
    let mut prompts = BTreeMap::new();
    for class in &classes {
        let p = match cfg.finetune.text_overrides.get(class) {
            Some(t) => t.clone(),
            None => match cfg.finetune.prompt {
                PromptKind::Label => class.clone(),
                PromptKind::Text => labels.label_to_text(class)?.to_string(),
            },
        };
        prompts.insert(class.clone(), p);
    }
    let tuner_kind = if opts.freeze_tuner { "frozen" } else { "trainable" };
    let ldm_init = if opts.from_scratch { "scratch" } else { "pretrained" };
    let snap = snapshot_path(cfg, Stage::Finetune);

    let (bundle, opt_state) = match load_snapshot(&snap, &hash, opts.force)? {
        Some((mut b, c)) => {
            if let Some(t) = b.tuner.as_mut() {
                t.trainable = !opts.freeze_tuner;
            }
            (b, Some(c.subset("opt")))
        }
        None => {
            let d = cfg.model.embed_dim;
            let tuner = if opts.freeze_tuner {
                let mut t = init_tuning(d, 0.0, 0)?;
                t.trainable = false;
                t
            } else {
                init_tuning(d, cfg.finetune.tuner_noise_std, derive_seed(cfg.seed, &[5]))?
            };
            let unet = if opts.from_scratch {
                UNet::new(pre.meta.unet_config.clone(), derive_seed(cfg.seed, &[6]))?
            } else {
                pre.unet
            };
            let meta = BundleMeta {
                stage: Stage::Finetune,
                step: 0,
                config_hash: hash.clone(),
                lineage: Lineage::derive(Some(&pre.meta.lineage), Stage::Finetune, ldm_init, tuner_kind, &hash),
                condition_source: ConditionSource::TunedTextEmbedding,
                prompts: prompts.clone(),
                ..pre.meta
            };
            (
                Bundle {
                    meta,
                    clap: pre.clap,
                    vae: pre.vae,
                    unet,
                    tuner: Some(tuner),
                },
                None,
            )
        }
    };

    let latents = standardized_latents(&bundle.vae, &train_mels)?;
    let mut text = BTreeMap::new();
    for (class, p) in &prompts {
        text.insert(class.clone(), bundle.clap.encode_text(&bundle.clap.vocab.tokenize(p)?)?);
    }
    let conds: Vec<Embedding> = train_m.entries.iter().map(|e| text[&e.class].clone()).collect();
    let data = LdmData::new(&latents, &conds, ConditionSource::TunedTextEmbedding)?;
    let train_cfg = LdmTrainConfig {
        steps: epochs_to_steps(cfg.finetune.optim.epochs, data.len(), cfg.finetune.optim.batch_size),
        batch_size: cfg.finetune.optim.batch_size,
        lr: cfg.finetune.optim.lr,
        seed: derive_seed(cfg.seed, &[7]),
        cond_dropout: 0.0,
    };
    let validation = if cfg.finetune.val_interval > 0 {
        Some(reference_embeddings(cfg, &bundle.clap, Split::Val)?)
    } else {
        None
    };
    run_ldm(
        cfg,
        opts,
        Stage::Finetune,
        bundle,
        opt_state,
        &data,
        train_cfg,
        validation.as_ref(),
    )
}

/// FAD of a few unselected clips per class against the validation split.
fn validation_fad(
    cfg: &RunConfig,
    bundle: &Bundle,
    reference: &BTreeMap<String, Vec<Embedding>>,
    step: usize,
) -> Result<FadReport> {
    let gen = Generator::from_bundle(bundle, cfg.generate.vocoder_iters)?;
    let policy = SelectionPolicy::new(crate::selector::SelectionMode::None, 1);
    let seed = derive_seed(cfg.seed, &[8, step as u64]);
    let mut generated = BTreeMap::new();
    for (class, prompt) in &bundle.meta.prompts {
        let cond = gen.condition(prompt)?;
        let set = gen.candidates(class, &cond, cfg.finetune.val_clips_per_class, 1, seed)?;
        let clips = emit(&set, &policy, &Targets::Single(cond.clone()), seed)?;
        generated.insert(
            class.clone(),
            clips.into_iter().map(|c| c.embedding).collect::<Vec<_>>(),
        );
    }
    let classes: Vec<String> = reference.keys().cloned().collect();
    evaluate_fad(&generated, reference, &classes, "clap_lite")
}

#[allow(clippy::too_many_arguments)]
fn run_ldm(
    cfg: &RunConfig,
    opts: &TrainOptions,
    stage: Stage,
    mut bundle: Bundle,
    opt_state: Option<BTreeMap<String, crate::checkpoint::Array>>,
    data: &LdmData,
    mut train_cfg: LdmTrainConfig,
    validation: Option<&BTreeMap<String, Vec<Embedding>>>,
) -> Result<TrainOutcome> {
    let sched = make_schedule(cfg.schedule.train_steps, ScheduleKind::Linear)?;
    let total = train_cfg.steps;
    let mut opt = ldm_optimizer(&bundle.unet, bundle.tuner.as_ref(), train_cfg.lr)?;
    if let Some(state) = &opt_state {
        opt.load_state(state)?;
    }
    let start = opt.steps_taken() as usize;
    if let Some(stop) = opts.stop_after {
        train_cfg.steps = total.min(stop.max(start));
    }
    let snap = snapshot_path(cfg, stage);
    let interval = cfg.finetune.snapshot_interval;
    let val_interval = if stage == Stage::Finetune {
        cfg.finetune.val_interval
    } else {
        0
    };
    let mut val_rows = Vec::new();
    let report = {
        let b = &bundle;
        let mut hook = |step: usize, opt: &Adam| -> Result<()> {
            if interval > 0 && step % interval == 0 && step < total {
                save_snapshot(&snap, &with_step(b, step)?, opt)?;
            }
            if let Some(reference) = validation {
                if val_interval > 0 && step % val_interval == 0 {
                    let r = validation_fad(cfg, b, reference, step)?;
                    log::info!("step {step}: validation FAD {:?}", r.pooled);
                    val_rows.push(ValRow {
                        step,
                        pooled_fad: r.pooled,
                        class_mean_fad: r.class_mean(),
                    });
                }
            }
            Ok(())
        };
        train_ldm(&b.unet, b.tuner.as_ref(), data, &sched, &train_cfg, &mut opt, &mut hook)?
    };
    if !val_rows.is_empty() {
        write_jsonl(
            &cfg.run_dir
                .join("logs")
                .join(format!("{}_validation.jsonl", stage.as_str())),
            &val_rows,
        )?;
    }
    write_losses(cfg, stage, start, &report.losses)?;
    let end = opt.steps_taken() as usize;
    bundle.meta.step = end;
    let checkpoint = if end < total {
        save_snapshot(&snap, &bundle, &opt)?;
        snap
    } else {
        let path = cfg.checkpoint_path(stage);
        bundle.save(&path)?;
        if snap.exists() {
            std::fs::remove_file(&snap).map_err(|e| FlabError::io(&snap, e))?;
        }
        path
    };
    Ok(TrainOutcome {
        checkpoint,
        losses: report.losses,
        start_step: start,
        end_step: end,
        total_steps: total,
        lineage: bundle.meta.lineage.clone(),
    })
}

/// A shallow view of `b` stamped with `step`, for snapshots taken mid-run.
fn with_step(b: &Bundle, step: usize) -> Result<Bundle> {
    let mut c = b.to_container()?;
    c.metadata["step"] = step.into();
    Bundle::from_container(&c)
}
