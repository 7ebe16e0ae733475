use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::StftConfig;
use crate::checkpoint::{Array, Container};
use crate::clap_lite::{ClapConfig, ClapModel, Vocabulary};
use crate::config::{ScheduleSection, Stage};
use crate::diffusion::{make_schedule, ConditionSource, NoiseSchedule, ScheduleKind, UNet, UNetConfig};
use crate::error::{input_err, Result};
use crate::mel_vae::{LatentShape, MelVae, VaeConfig};
use crate::tuner::TuningLayer;

/// Provenance of a checkpoint: its own id and the id of the bundle it started from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub id: String,
    pub parent: Option<String>,
    /// `pretrained`, `scratch` or `new`.
    pub ldm_init: String,
    /// `none`, `frozen` or `trainable`.
    pub tuner: String,
}

impl Lineage {
    pub fn derive(parent: Option<&Lineage>, stage: Stage, ldm_init: &str, tuner: &str, config_hash: &str) -> Self {
        let parent_id = parent.map(|p| p.id.clone());
        let key = format!(
            "{}|{}|{ldm_init}|{tuner}|{config_hash}",
            parent_id.as_deref().unwrap_or("-"),
            stage.as_str()
        );
        Self {
            id: super::sha256_hex(key.as_bytes())[..16].to_string(),
            parent: parent_id,
            ldm_init: ldm_init.into(),
            tuner: tuner.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub stage: Stage,
    pub step: usize,
    pub config_hash: String,
    pub lineage: Lineage,
    pub schedule: ScheduleSection,
    pub stft: StftConfig,
    /// Mel frames per clip before latent padding.
    pub frames: usize,
    /// Samples per clip.
    pub clip_samples: usize,
    pub clap_config: ClapConfig,
    pub clap_vocab: Vec<String>,
    pub vae_config: VaeConfig,
    pub unet_config: UNetConfig,
    pub condition_source: ConditionSource,
    /// Conditioning prompt per class (fine-tuned bundles only).
    pub prompts: BTreeMap<String, String>,
}

/// Every trained module plus the metadata needed to rebuild it.
pub struct Bundle {
    pub meta: BundleMeta,
    pub clap: ClapModel,
    pub vae: MelVae,
    pub unet: UNet,
    pub tuner: Option<TuningLayer>,
}

impl Bundle {
    pub fn to_container(&self) -> Result<Container> {
        let mut meta = serde_json::to_value(&self.meta)?;
        meta["kind"] = "flab-bundle".into();
        let mut c = Container::new(meta);
        c.extend_prefixed("clap", self.clap.to_arrays()?);
        c.extend_prefixed("vae", self.vae.to_arrays()?);
        c.extend_prefixed("unet", self.unet.to_arrays()?);
        if let Some(t) = &self.tuner {
            c.extend_prefixed("tuner", t.to_arrays()?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("flab-bundle") {
            return input_err("container is not a model bundle");
        }
        let meta: BundleMeta = serde_json::from_value(c.metadata.clone())?;
        let vocab = Vocabulary::from_tokens(meta.clap_vocab.clone())?;
        let clap = ClapModel::from_arrays(meta.clap_config.clone(), vocab, &c.subset("clap"))?;
        let vae = MelVae::from_arrays(meta.vae_config.clone(), &meta.stft, &c.subset("vae"))?;
        let unet = UNet::from_arrays(meta.unet_config.clone(), &c.subset("unet"))?;
        let tuner_arrays: BTreeMap<String, Array> = c.subset("tuner");
        let tuner = if tuner_arrays.is_empty() {
            None
        } else {
            let mut t = TuningLayer::from_arrays(&tuner_arrays)?;
            t.trainable = meta.lineage.tuner == "trainable";
            Some(t)
        };
        Ok(Self {
            meta,
            clap,
            vae,
            unet,
            tuner,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.meta.schedule.train_steps, ScheduleKind::Linear)
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.meta.vae_config.latent_shape(self.meta.frames)
    }
}
