use std::collections::BTreeMap;
use std::path::Path;

use crate::audio::{StftConfig, Waveform};
use crate::checkpoint::{Array, Container};
use crate::clap_lite::ClapModel;
use crate::config::RunConfig;
use crate::embedding::Embedding;
use crate::error::Result;
use crate::fad::{evaluate_fad, FadReport};
use crate::synth::{CorpusManifest, ManifestEntry, Split};

use super::generate::load_generated;
use super::{embed_waveforms, load_manifest, sha256_hex, write_text};

/// Audio embeddings keyed by clip id, stored in the named-array container and
/// tagged with the extractor that produced them.
pub struct EmbeddingCache;

impl EmbeddingCache {
    pub fn extractor_id(clap: &ClapModel) -> Result<String> {
        let bytes = clap.to_container()?.to_bytes()?;
        Ok(format!("clap_lite:{}", &sha256_hex(&bytes)[..12]))
    }

    /// Embeddings for `entries`, computing only those missing from the cache at `path`.
    pub fn load_or_compute(
        path: &Path,
        clap: &ClapModel,
        stft: &StftConfig,
        entries: &[ManifestEntry],
        root: &Path,
    ) -> Result<Vec<Embedding>> {
        let extractor = Self::extractor_id(clap)?;
        let mut cache = match Container::load(path) {
            Ok(c) if c.metadata.get("extractor").and_then(|v| v.as_str()) == Some(extractor.as_str()) => c,
            _ => Container::new(serde_json::json!({ "kind": "embedding-cache", "extractor": extractor })),
        };
        let missing: Vec<&ManifestEntry> = entries
            .iter()
            .filter(|e| !cache.arrays.contains_key(&e.clip_id))
            .collect();
        if !missing.is_empty() {
            let waves = missing
                .iter()
                .map(|e| Waveform::read_wav(&CorpusManifest::resolve(root, e)))
                .collect::<Result<Vec<_>>>()?;
            for (e, emb) in missing.iter().zip(embed_waveforms(clap, stft, &waves)?) {
                cache.insert(e.clip_id.clone(), Array::vector(emb.values));
            }
            cache.save(path)?;
        }
        entries
            .iter()
            .map(|e| Ok(Embedding::raw(cache.get(&e.clip_id)?.data.clone())))
            .collect()
    }
}

fn group(entries: &[ManifestEntry], embeddings: Vec<Embedding>) -> BTreeMap<String, Vec<Embedding>> {
    let mut map: BTreeMap<String, Vec<Embedding>> = BTreeMap::new();
    for (e, emb) in entries.iter().zip(embeddings) {
        map.entry(e.class.clone()).or_default().push(emb);
    }
    map
}

/// Per-class embeddings of a corpus split, cached under `<run_dir>/cache`.
pub fn reference_embeddings(
    cfg: &RunConfig,
    clap: &ClapModel,
    split: Split,
) -> Result<BTreeMap<String, Vec<Embedding>>> {
    let manifest = load_manifest(cfg, split)?;
    let path = cfg
        .run_dir
        .join("cache")
        .join(format!("{}_embeddings.flab", split.as_str()));
    let embs = EmbeddingCache::load_or_compute(&path, clap, &cfg.audio.stft, &manifest.entries, &cfg.corpus_root())?;
    Ok(group(&manifest.entries, embs))
}

/// FAD of the clips listed in `<generated_dir>/generated.jsonl` against a corpus
/// split; writes `fad.csv` and `fad.jsonl` next to the clips.
pub fn cmd_evaluate(cfg: &RunConfig, clap: &ClapModel, generated_dir: &Path, split: Split) -> Result<FadReport> {
    let entries = load_generated(generated_dir)?;
    let embs = EmbeddingCache::load_or_compute(
        &generated_dir.join("embeddings.flab"),
        clap,
        &cfg.audio.stft,
        &entries,
        generated_dir,
    )?;
    let generated = group(&entries, embs);
    let reference = reference_embeddings(cfg, clap, split)?;
    let classes: Vec<String> = reference.keys().cloned().collect();
    let report = evaluate_fad(&generated, &reference, &classes, &EmbeddingCache::extractor_id(clap)?)?;
    write_text(&generated_dir.join("fad.csv"), &report.to_csv())?;
    write_text(&generated_dir.join("fad.jsonl"), &report.to_jsonl()?)?;
    Ok(report)
}
