//! Staged training, generation, evaluation, calibration and benchmarking over a run directory.

mod bench;
mod bundle;
mod evaluate;
mod generate;
mod train;

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::audio::{MelFrontend, MelSpectrogram, StftConfig, Waveform};
use crate::clap_lite::ClapModel;
use crate::config::RunConfig;
use crate::embedding::Embedding;
use crate::error::{config_err, FlabError, Result};
use crate::synth::{build_corpus, build_split, CorpusManifest, Split};

pub use bench::{cmd_benchmark, iqr, BenchmarkReport, RowResult, ROWS};
pub use bundle::{Bundle, BundleMeta, Lineage};
pub use evaluate::{cmd_evaluate, reference_embeddings, EmbeddingCache};
pub use generate::{
    cmd_calibrate, cmd_generate, emit, CandidateSet, GenerateRequest, GeneratedClip, Generator, Targets,
};
pub use train::{cmd_train, TrainOptions, TrainOutcome};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| FlabError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| FlabError::io(path, e))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_text(path, &s)
}

pub(crate) fn load_manifest(cfg: &RunConfig, split: Split) -> Result<CorpusManifest> {
    let root = cfg.corpus_root();
    if !root.join(CorpusManifest::file_name(split)).exists() {
        return config_err(format!(
            "corpus split `{}` not found under {}; run synth-data first",
            split.as_str(),
            root.display()
        ));
    }
    CorpusManifest::load(&root, split)
}

pub(crate) fn mels_of(waves: &[Waveform], stft: &StftConfig) -> Result<Vec<MelSpectrogram>> {
    let frontend = MelFrontend::new(stft)?;
    waves.par_iter().map(|w| frontend.mel(w)).collect()
}

pub(crate) fn load_mels(cfg: &RunConfig, manifest: &CorpusManifest) -> Result<Vec<MelSpectrogram>> {
    mels_of(&manifest.load_audio(&cfg.corpus_root())?, &cfg.audio.stft)
}

/// CLAP audio embeddings of waveforms, mel extraction in parallel.
pub fn embed_waveforms(clap: &ClapModel, stft: &StftConfig, waves: &[Waveform]) -> Result<Vec<Embedding>> {
    let mels = mels_of(waves, stft)?;
    let refs: Vec<&MelSpectrogram> = mels.iter().collect();
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(128) {
        out.extend(clap.encode_audios(chunk)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub train: usize,
    pub val: usize,
    pub eval: usize,
    pub pretrain: usize,
}

/// Synthesizes the fine-tuning train/val split, the held-out eval split and the
/// pretraining superset, and writes the label table and resolved config.
pub fn cmd_synth_data(cfg: &RunConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    let root = cfg.corpus_root();
    let labels = cfg.label_table();
    let dev = cfg.dev_classes()?;
    std::fs::create_dir_all(&root).map_err(|e| FlabError::io(&root, e))?;
    labels.save(&root.join("label_text.tsv"))?;
    let c = &cfg.corpus;
    let splits = build_corpus(&dev, c.n_per_class, c.split_ratio, c.seed, &labels, &root)?;
    let eval = build_split(&dev, c.eval_per_class, Split::Eval, c.seed, &labels, &root)?;
    let pretrain = if c.pretrain_classes > 0 {
        build_split(
            &cfg.pretrain_specs(),
            c.pretrain_per_class,
            Split::Pretrain,
            c.seed,
            &labels,
            &root,
        )?
        .entries
        .len()
    } else {
        0
    };
    cfg.save(&root.join("config.toml"))?;
    Ok(SynthSummary {
        train: splits.train.entries.len(),
        val: splits.val.entries.len(),
        eval: eval.entries.len(),
        pretrain,
    })
}
