//! Run configuration: one TOML file with `[section]` tables, plus named presets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::StftConfig;
use crate::error::{config_err, FlabError, Result};
use crate::selector::{SelectionMode, SelectionPolicy, TargetSource};
use crate::synth::{dcase_classes, pretrain_classes, Family, LabelTable, SoundClassSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = FlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => config_err(format!("unknown stage `{other}` (pretrain, finetune)")),
        }
    }
}

/// Which text the fine-tuning conditions are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// The bare class label, e.g. "Keyboard".
    Label,
    /// The wrapped phrase from the label table, e.g. "Someone using keyboard".
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioSection {
    pub duration_s: f64,
    pub stft: StftConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub family: String,
    pub text: String,
    pub ranges: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub n_per_class: usize,
    pub split_ratio: f64,
    pub eval_per_class: usize,
    pub pretrain_classes: usize,
    pub pretrain_per_class: usize,
    /// Replaces the seven built-in fine-tuning classes when non-empty.
    #[serde(default)]
    pub custom_classes: Vec<ClassEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub latent_channels: usize,
    pub compression: usize,
    pub vae_hidden: usize,
    pub kl_weight: f64,
    pub unet_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub train_steps: usize,
    pub sample_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub optimizer: String,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub optim: OptimSection,
    pub prompt: PromptKind,
    pub tuner_noise_std: f64,
    pub freeze_tuner: bool,
    pub from_scratch: bool,
    /// Per-class replacement prompts, for fixed-text ablations.
    #[serde(default)]
    pub text_overrides: BTreeMap<String, String>,
    /// Steps between validation FAD measurements; 0 disables them.
    pub val_interval: usize,
    pub val_clips_per_class: usize,
    /// Steps between resumable snapshots; 0 disables them.
    pub snapshot_interval: usize,
    /// Pretrained bundle; defaults to `<run_dir>/checkpoints/pretrain.flab`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    pub pool_size: usize,
    pub mode: SelectionMode,
    pub target_source: TargetSource,
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
    pub audio_pool_top_m: usize,
    /// Prompt pool per class for `text_variant` targets.
    #[serde(default)]
    pub text_variants: BTreeMap<String, Vec<String>>,
    pub calibration_grid: Vec<f64>,
    pub calibration_clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub count_per_class: usize,
    pub vocoder_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub seeds: Vec<u64>,
    /// Class whose conditioning is varied in the stability and multi-target studies.
    pub study_class: String,
    pub fixed_texts: Vec<String>,
    pub stability_reps: usize,
    pub multi_target_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub stage: Stage,
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/corpus`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
    pub audio: AudioSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub clap: OptimSection,
    pub vae: OptimSection,
    pub pretrain: OptimSection,
    pub finetune: FinetuneSection,
    pub selection: SelectionSection,
    pub generate: GenerateSection,
    pub benchmark: BenchmarkSection,
}

fn adam(lr: f64, epochs: usize, batch_size: usize) -> OptimSection {
    OptimSection {
        optimizer: "adam".into(),
        lr,
        epochs,
        batch_size,
    }
}

impl RunConfig {
    /// 8 kHz one-second clips; sized for the test suite and acceptance runs.
    pub fn tiny() -> Self {
        Self {
            preset: "tiny".into(),
            seed: 0,
            stage: Stage::Pretrain,
            run_dir: PathBuf::from("runs/tiny"),
            corpus_dir: None,
            audio: AudioSection {
                duration_s: 1.0,
                stft: StftConfig::tiny(),
            },
            corpus: CorpusSection {
                seed: 2023,
                n_per_class: 40,
                split_ratio: 0.9,
                eval_per_class: 32,
                pretrain_classes: 20,
                pretrain_per_class: 40,
                custom_classes: Vec::new(),
            },
            model: ModelSection {
                embed_dim: 32,
                latent_channels: 4,
                compression: 4,
                vae_hidden: 16,
                kl_weight: 1e-4,
                unet_width: 32,
            },
            schedule: ScheduleSection {
                train_steps: 1000,
                sample_steps: 25,
            },
            clap: adam(1e-3, 30, 32),
            vae: adam(1e-3, 4, 8),
            pretrain: adam(1e-3, 24, 32),
            finetune: FinetuneSection {
                optim: adam(1e-3, 38, 32),
                prompt: PromptKind::Text,
                tuner_noise_std: 0.01,
                freeze_tuner: false,
                from_scratch: false,
                text_overrides: BTreeMap::new(),
                val_interval: 0,
                val_clips_per_class: 8,
                snapshot_interval: 100,
                pretrained: None,
            },
            selection: SelectionSection {
                pool_size: 8,
                mode: SelectionMode::Top1,
                target_source: TargetSource::TunedText,
                thresholds: BTreeMap::new(),
                audio_pool_top_m: 24,
                text_variants: BTreeMap::new(),
                calibration_grid: crate::selector::default_grid(),
                calibration_clips: 16,
            },
            generate: GenerateSection {
                count_per_class: 32,
                vocoder_iters: 32,
            },
            benchmark: BenchmarkSection {
                seeds: vec![0, 1, 2],
                study_class: "MovingMotorVehicle".into(),
                fixed_texts: vec!["motor".into(), "a moving motor".into(), "sound of motor".into()],
                stability_reps: 10,
                multi_target_seeds: 5,
            },
        }
    }

    /// The tiny geometry with a handful of clips and steps; seconds end to end.
    pub fn smoke() -> Self {
        let t = Self::tiny();
        Self {
            preset: "smoke".into(),
            run_dir: PathBuf::from("runs/smoke"),
            corpus: CorpusSection {
                n_per_class: 20,
                eval_per_class: 6,
                pretrain_classes: 8,
                pretrain_per_class: 6,
                ..t.corpus
            },
            schedule: ScheduleSection {
                train_steps: 1000,
                sample_steps: 4,
            },
            clap: adam(1e-3, 2, 32),
            vae: adam(1e-3, 1, 16),
            pretrain: adam(1e-3, 1, 16),
            finetune: FinetuneSection {
                optim: adam(1e-3, 2, 16),
                val_clips_per_class: 3,
                snapshot_interval: 4,
                ..t.finetune
            },
            selection: SelectionSection {
                pool_size: 2,
                audio_pool_top_m: 12,
                calibration_clips: 3,
                ..t.selection
            },
            generate: GenerateSection {
                count_per_class: 3,
                vocoder_iters: 2,
            },
            benchmark: BenchmarkSection {
                stability_reps: 3,
                multi_target_seeds: 2,
                ..t.benchmark
            },
            ..t
        }
    }

    /// 16 kHz four-second clips, 64 mels, hop 160.
    pub fn desk() -> Self {
        let t = Self::tiny();
        Self {
            preset: "desk".into(),
            run_dir: PathBuf::from("runs/desk"),
            audio: AudioSection {
                duration_s: 4.0,
                stft: StftConfig::desk(),
            },
            corpus: CorpusSection {
                n_per_class: 100,
                eval_per_class: 100,
                pretrain_per_class: 200,
                ..t.corpus
            },
            model: ModelSection {
                embed_dim: 64,
                unet_width: 48,
                ..t.model
            },
            schedule: ScheduleSection {
                train_steps: 1000,
                sample_steps: 200,
            },
            clap: adam(1e-3, 20, 32),
            vae: adam(1e-3, 2, 8),
            pretrain: adam(1e-3, 6, 32),
            finetune: FinetuneSection {
                optim: adam(1e-3, 40, 32),
                val_interval: 500,
                val_clips_per_class: 16,
                snapshot_interval: 200,
                ..t.finetune
            },
            selection: SelectionSection {
                pool_size: 8,
                audio_pool_top_m: 60,
                calibration_clips: 32,
                ..t.selection
            },
            generate: GenerateSection {
                count_per_class: 100,
                vocoder_iters: 32,
            },
            ..t
        }
    }

    /// Published-scale defaults: 22.05 kHz, learning rate 3e-5, 3 pretraining epochs,
    /// up to 1000 fine-tuning epochs.
    pub fn full() -> Self {
        let d = Self::desk();
        Self {
            preset: "full".into(),
            run_dir: PathBuf::from("runs/full"),
            audio: AudioSection {
                duration_s: 4.0,
                stft: StftConfig::full(),
            },
            model: ModelSection {
                embed_dim: 512,
                latent_channels: 8,
                unet_width: 128,
                ..d.model
            },
            clap: adam(3e-5, 20, 32),
            vae: adam(3e-5, 20, 8),
            pretrain: adam(3e-5, 3, 32),
            finetune: FinetuneSection {
                optim: adam(3e-5, 1000, 32),
                val_interval: 100_000,
                ..d.finetune
            },
            ..d
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "smoke" => Ok(Self::smoke()),
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => config_err(format!("unknown preset `{other}` (smoke, tiny, desk, full)")),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| FlabError::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| FlabError::io(parent, e))?;
        }
        std::fs::write(path, self.to_toml()?).map_err(|e| FlabError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.stft.validate()?;
        if !(self.audio.duration_s > 0.0) {
            return config_err("audio.duration_s must be positive");
        }
        let samples = (self.audio.duration_s * self.audio.stft.sample_rate as f64).round() as usize;
        if self.audio.stft.n_frames(samples).is_none() {
            return config_err("clips are shorter than one STFT window");
        }
        for (name, o) in [
            ("clap", &self.clap),
            ("vae", &self.vae),
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune.optim),
        ] {
            if o.optimizer != "adam" {
                return config_err(format!("{name}.optimizer `{}` unsupported (adam)", o.optimizer));
            }
            if !(o.lr > 0.0) || o.batch_size == 0 {
                return config_err(format!("{name}: lr and batch_size must be positive"));
            }
        }
        if self.model.embed_dim == 0 || self.model.unet_width == 0 || self.model.latent_channels == 0 {
            return config_err("model dimensions must be positive");
        }
        if self.schedule.sample_steps == 0 || self.schedule.sample_steps > self.schedule.train_steps {
            return config_err("schedule.sample_steps must lie in [1, train_steps]");
        }
        if self.corpus.pretrain_classes > 20 {
            return config_err("at most 20 pretraining classes are available");
        }
        if self.finetune.tuner_noise_std < 0.0 {
            return config_err("finetune.tuner_noise_std must be >= 0");
        }
        self.policy().validate()?;
        if self.selection.calibration_grid.is_empty() {
            return config_err("selection.calibration_grid is empty");
        }
        self.dev_classes()?;
        Ok(())
    }

    pub fn dev_classes(&self) -> Result<Vec<SoundClassSpec>> {
        let (d, sr) = (self.audio.duration_s, self.audio.stft.sample_rate);
        if self.corpus.custom_classes.is_empty() {
            return Ok(dcase_classes(d, sr));
        }
        self.corpus
            .custom_classes
            .iter()
            .map(|c| {
                let family: Family = c.family.parse()?;
                let ranges: Vec<(&str, f64, f64)> = c.ranges.iter().map(|(k, v)| (k.as_str(), v[0], v[1])).collect();
                let spec = SoundClassSpec::new(&c.name, family, &ranges, d, sr);
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }

    pub fn pretrain_specs(&self) -> Vec<SoundClassSpec> {
        let mut v = pretrain_classes(self.audio.duration_s, self.audio.stft.sample_rate);
        v.truncate(self.corpus.pretrain_classes);
        v
    }

    pub fn label_table(&self) -> LabelTable {
        let mut t = LabelTable::default_table();
        for c in &self.corpus.custom_classes {
            t.insert(&c.name, &c.text);
        }
        t
    }

    pub fn corpus_root(&self) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| self.run_dir.join("corpus"))
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.run_dir
            .join("checkpoints")
            .join(format!("{}.flab", stage.as_str()))
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.finetune
            .pretrained
            .clone()
            .unwrap_or_else(|| self.checkpoint_path(Stage::Pretrain))
    }

    pub fn policy(&self) -> SelectionPolicy {
        SelectionPolicy {
            pool_size: self.selection.pool_size,
            thresholds: self.selection.thresholds.clone(),
            mode: self.selection.mode,
            target_source: self.selection.target_source,
            seed: self.seed,
            backfill: true,
        }
    }

    /// Hash over everything that shapes training; paths and the stage are excluded.
    pub fn training_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.run_dir = PathBuf::new();
        c.corpus_dir = None;
        c.finetune.pretrained = None;
        c.stage = Stage::Pretrain;
        c.generate = Self::tiny().generate;
        c.benchmark = Self::tiny().benchmark;
        c.selection = Self::tiny().selection;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Steps for `epochs` passes over `n` items at `batch_size`.
pub fn epochs_to_steps(epochs: usize, n: usize, batch_size: usize) -> usize {
    epochs * n.div_ceil(batch_size.max(1)).max(1)
}
