use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{PromptKind, RunConfig, Stage};
use crate::embedding::Embedding;
use crate::error::{config_err, Result};
use crate::fad::{evaluate_fad, FadReport};
use crate::selector::{SelectionMode, SelectionPolicy, TargetSource};
use crate::synth::{derive_seed, Split};

use super::generate::{class_targets, emit, CandidateSet, Generator, Targets};
use super::{cmd_synth_data, cmd_train, reference_embeddings, write_jsonl, write_text, Bundle, TrainOptions};

/// The ablation ladder, in table order.
pub const ROWS: [&str; 5] = ["LDM-S", "+Pre", "+Text", "+Filter", "+Tuned"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    /// Per-class FAD averaged over the seeds that produced a value.
    pub per_class: BTreeMap<String, Option<f64>>,
    /// Pooled FAD averaged over seeds.
    pub pooled: Option<f64>,
    pub per_seed_pooled: Vec<Option<f64>>,
    pub per_seed_class: Vec<BTreeMap<String, Option<f64>>>,
    /// Seeds whose run failed, with the error.
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRow {
    pub config: String,
    pub seed: u64,
    pub pooled: Option<f64>,
    pub class_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub config: String,
    pub rep: usize,
    pub fad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<u64>,
    pub classes: Vec<String>,
    pub rows: Vec<RowResult>,
    pub boxplot: Vec<BoxRow>,
    pub study_class: String,
    /// Per-repetition FAD of the study class under each training embedding.
    pub stability: Vec<StudyRow>,
    /// Per-seed FAD of the study class under each selection target.
    pub multi_target: Vec<StudyRow>,
    pub study_failures: Vec<String>,
}

impl BenchmarkReport {
    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// FAD values of one study configuration.
    pub fn study_values(rows: &[StudyRow], config: &str) -> Vec<f64> {
        rows.iter()
            .filter(|r| r.config == config)
            .filter_map(|r| r.fad)
            .collect()
    }

    pub fn table1_csv(&self) -> String {
        let mut s = format!("system,{},pooled\n", self.classes.join(","));
        for r in &self.rows {
            s.push_str(&r.name);
            for c in &self.classes {
                s.push(',');
                s.push_str(&fmt_opt(r.per_class.get(c).copied().flatten()));
            }
            let _ = writeln!(s, ",{}", fmt_opt(r.pooled));
        }
        s
    }

    pub fn boxplot_csv(&self) -> String {
        let mut s = String::from("config,seed,pooled,class_mean\n");
        for b in &self.boxplot {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                b.config,
                b.seed,
                fmt_opt(b.pooled),
                fmt_opt(b.class_mean)
            );
        }
        s
    }

    pub fn study_csv(rows: &[StudyRow]) -> String {
        let mut s = String::from("config,rep,fad\n");
        for r in rows {
            let _ = writeln!(s, "{},{},{}", r.config, r.rep, fmt_opt(r.fad));
        }
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "failed".into())
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Interquartile range with linear interpolation between order statistics.
pub fn iqr(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Some(q(0.75) - q(0.25))
}

type RowRun = std::result::Result<FadReport, String>;

struct FinetuneSpec<'a> {
    dir: &'a str,
    from_scratch: bool,
    freeze_tuner: bool,
    prompt: PromptKind,
    overrides: BTreeMap<String, String>,
}

fn finetune_model(base: &RunConfig, seed_dir: &Path, spec: &FinetuneSpec) -> Result<(RunConfig, Bundle)> {
    let mut cfg = base.clone();
    cfg.stage = Stage::Finetune;
    cfg.run_dir = seed_dir.join(spec.dir);
    cfg.finetune.pretrained = Some(base.checkpoint_path(Stage::Pretrain));
    cfg.finetune.from_scratch = spec.from_scratch;
    cfg.finetune.freeze_tuner = spec.freeze_tuner;
    cfg.finetune.prompt = spec.prompt;
    cfg.finetune.text_overrides = spec.overrides.clone();
    let path = cfg.checkpoint_path(Stage::Finetune);
    if !path.exists() {
        cmd_train(&cfg, &TrainOptions::from_config(&cfg))?;
    }
    let bundle = Bundle::load(&path)?;
    Ok((cfg, bundle))
}

/// Candidate sets for every class of `bundle`.
fn sample_all(
    cfg: &RunConfig,
    gen: &Generator,
    bundle: &Bundle,
    k: usize,
    seed: u64,
) -> Result<Vec<(CandidateSet, Embedding)>> {
    bundle
        .meta
        .prompts
        .iter()
        .map(|(class, prompt)| {
            let cond = gen.condition(prompt)?;
            let set = gen.candidates(class, &cond, cfg.generate.count_per_class, k, seed)?;
            Ok((set, cond))
        })
        .collect()
}

fn fad_of(
    sets: &[(CandidateSet, Embedding)],
    policy: &SelectionPolicy,
    reference: &BTreeMap<String, Vec<Embedding>>,
    seed: u64,
    out: &Path,
) -> Result<FadReport> {
    let mut generated = BTreeMap::new();
    for (set, cond) in sets {
        let clips = emit(
            set,
            policy,
            &Targets::Single(Embedding::unit(cond.values.clone())),
            seed,
        )?;
        generated.insert(
            set.class.clone(),
            clips.into_iter().map(|c| c.embedding).collect::<Vec<_>>(),
        );
    }
    let classes: Vec<String> = reference.keys().cloned().collect();
    let report = evaluate_fad(&generated, reference, &classes, "clap_lite")?;
    write_text(&out.join("fad.csv"), &report.to_csv())?;
    write_text(&out.join("fad.jsonl"), &report.to_jsonl()?)?;
    Ok(report)
}

/// FAD reports of the five ablation rows for one seed, keyed by row name.
fn run_seed(base: &RunConfig, seed_dir: &Path) -> Result<BTreeMap<&'static str, RowRun>> {
    let pre_path = base.checkpoint_path(Stage::Pretrain);
    if !pre_path.exists() {
        cmd_train(base, &TrainOptions::from_config(base))?;
    }
    let pre = Bundle::load(&pre_path)?;
    let reference = reference_embeddings(base, &pre.clap, Split::Eval)?;
    let k = base.selection.pool_size;
    let gen_seed = derive_seed(base.seed, &[0xB0]);
    let mut out = BTreeMap::new();

    let single = |spec: FinetuneSpec, row: &'static str| -> Result<FadReport> {
        let (cfg, bundle) = finetune_model(base, seed_dir, &spec)?;
        let gen = Generator::from_bundle(&bundle, cfg.generate.vocoder_iters)?;
        let sets = sample_all(&cfg, &gen, &bundle, 1, gen_seed)?;
        fad_of(
            &sets,
            &SelectionPolicy::new(SelectionMode::None, 1),
            &reference,
            gen_seed,
            &cfg.run_dir.join("eval").join(dir_of(row)),
        )
    };
    let frozen = |dir, from_scratch, prompt| FinetuneSpec {
        dir,
        from_scratch,
        freeze_tuner: true,
        prompt,
        overrides: BTreeMap::new(),
    };
    out.insert(
        "LDM-S",
        single(frozen("ldm_s", true, PromptKind::Label), "LDM-S").map_err(|e| e.to_string()),
    );
    out.insert(
        "+Pre",
        single(frozen("pre", false, PromptKind::Label), "+Pre").map_err(|e| e.to_string()),
    );

    // +Text and +Filter evaluate the same candidates with and without selection.
    let text_rows = (|| -> Result<(FadReport, FadReport)> {
        let (cfg, bundle) = finetune_model(base, seed_dir, &frozen("text", false, PromptKind::Text))?;
        let gen = Generator::from_bundle(&bundle, cfg.generate.vocoder_iters)?;
        let sets = sample_all(&cfg, &gen, &bundle, k, gen_seed)?;
        let none = fad_of(
            &sets,
            &SelectionPolicy::new(SelectionMode::None, k),
            &reference,
            gen_seed,
            &cfg.run_dir.join("eval").join("text"),
        )?;
        let top1 = fad_of(
            &sets,
            &SelectionPolicy::new(SelectionMode::Top1, k),
            &reference,
            gen_seed,
            &cfg.run_dir.join("eval").join("filter"),
        )?;
        Ok((none, top1))
    })();
    match text_rows {
        Ok((a, b)) => {
            out.insert("+Text", Ok(a));
            out.insert("+Filter", Ok(b));
        }
        Err(e) => {
            out.insert("+Text", Err(e.to_string()));
            out.insert("+Filter", Err(e.to_string()));
        }
    }

    let tuned = (|| -> Result<FadReport> {
        let spec = FinetuneSpec {
            freeze_tuner: false,
            ..frozen("tuned", false, PromptKind::Text)
        };
        let (cfg, bundle) = finetune_model(base, seed_dir, &spec)?;
        let gen = Generator::from_bundle(&bundle, cfg.generate.vocoder_iters)?;
        let sets = sample_all(&cfg, &gen, &bundle, k, gen_seed)?;
        fad_of(
            &sets,
            &SelectionPolicy::new(SelectionMode::Top1, k),
            &reference,
            gen_seed,
            &cfg.run_dir.join("eval").join("tuned"),
        )
    })();
    out.insert("+Tuned", tuned.map_err(|e| e.to_string()));
    Ok(out)
}

fn dir_of(row: &str) -> &'static str {
    match row {
        "LDM-S" => "ldm_s",
        "+Pre" => "pre",
        "+Text" => "text",
        "+Filter" => "filter",
        _ => "tuned",
    }
}

/// Seed `s` of the benchmark: its own run directory, sharing the corpus.
fn seed_config(cfg: &RunConfig, s: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = s;
    c.stage = Stage::Pretrain;
    c.corpus_dir = Some(cfg.corpus_root());
    c.run_dir = cfg.run_dir.join("bench").join(format!("seed_{s}"));
    c
}

/// FAD of the study class under each fixed text, the wrapped text and the tuned
/// embedding, over repeated unselected sampling runs.
fn stability_study(base: &RunConfig, class: &str) -> Result<Vec<StudyRow>> {
    let seed_dir = base.run_dir.clone();
    let pre = Bundle::load(&base.checkpoint_path(Stage::Pretrain))?;
    let reference = reference_embeddings(base, &pre.clap, Split::Eval)?;
    let mut configs: Vec<(String, FinetuneSpec)> = base
        .benchmark
        .fixed_texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let spec = FinetuneSpec {
                dir: "",
                from_scratch: false,
                freeze_tuner: true,
                prompt: PromptKind::Text,
                overrides: BTreeMap::from([(class.to_string(), t.clone())]),
            };
            (format!("fixed:{i}:{t}"), spec)
        })
        .collect();
    for (name, freeze) in [("wrapped", true), ("tuned", false)] {
        configs.push((
            name.into(),
            FinetuneSpec {
                dir: "",
                from_scratch: false,
                freeze_tuner: freeze,
                prompt: PromptKind::Text,
                overrides: BTreeMap::new(),
            },
        ));
    }
    let mut rows = Vec::new();
    for (i, (name, mut spec)) in configs.into_iter().enumerate() {
        let dir = match name.as_str() {
            "wrapped" => "text".to_string(),
            "tuned" => "tuned".to_string(),
            _ => format!("fixed_{i}"),
        };
        spec.dir = &dir;
        let (cfg, bundle) = finetune_model(base, &seed_dir, &spec)?;
        let gen = Generator::from_bundle(&bundle, cfg.generate.vocoder_iters)?;
        let prompt = &bundle.meta.prompts[class];
        let cond = gen.condition(prompt)?;
        for rep in 0..base.benchmark.stability_reps {
            let seed = derive_seed(base.seed, &[0x57AB, rep as u64]);
            let set = gen.candidates(class, &cond, cfg.generate.count_per_class, 1, seed)?;
            let clips = emit(
                &set,
                &SelectionPolicy::new(SelectionMode::None, 1),
                &Targets::Single(cond.clone()),
                seed,
            )?;
            let generated = BTreeMap::from([(class.to_string(), clips.into_iter().map(|c| c.embedding).collect())]);
            let report = evaluate_fad(&generated, &reference, &[class.to_string()], "clap_lite")?;
            rows.push(StudyRow {
                config: name.clone(),
                rep,
                fad: report.get(class),
            });
        }
    }
    Ok(rows)
}

/// FAD of the study class on the tuned model under a single tuned-text target and
/// under an audio-embedding target pool, over several generation seeds.
fn multi_target_study(base: &RunConfig, class: &str) -> Result<Vec<StudyRow>> {
    let spec = FinetuneSpec {
        dir: "tuned",
        from_scratch: false,
        freeze_tuner: false,
        prompt: PromptKind::Text,
        overrides: BTreeMap::new(),
    };
    let (cfg, bundle) = finetune_model(base, &base.run_dir, &spec)?;
    let gen = Generator::from_bundle(&bundle, cfg.generate.vocoder_iters)?;
    // The training split embeddings live in the seed run directory.
    let reference = reference_embeddings(base, &bundle.clap, Split::Eval)?;
    let prompt = bundle.meta.prompts[class].clone();
    let cond = gen.condition(&prompt)?;
    let mut train_embeddings = None;
    let tuned_t = class_targets(
        &gen,
        base,
        TargetSource::TunedText,
        class,
        &prompt,
        &mut train_embeddings,
    )?;
    let audio_t = class_targets(
        &gen,
        base,
        TargetSource::AudioEmbeddingPool,
        class,
        &prompt,
        &mut train_embeddings,
    )?;
    let k = base.selection.pool_size;
    let policy = SelectionPolicy::new(SelectionMode::Top1, k);
    let mut rows = Vec::new();
    for rep in 0..base.benchmark.multi_target_seeds {
        let seed = derive_seed(base.seed, &[0x3A7, rep as u64]);
        let set = gen.candidates(class, &cond, cfg.generate.count_per_class, k, seed)?;
        for (name, targets) in [("tuned_text", &tuned_t), ("audio_pool", &audio_t)] {
            let clips = emit(&set, &policy, targets, seed)?;
            let generated = BTreeMap::from([(class.to_string(), clips.into_iter().map(|c| c.embedding).collect())]);
            let report = evaluate_fad(&generated, &reference, &[class.to_string()], "clap_lite")?;
            rows.push(StudyRow {
                config: name.into(),
                rep,
                fad: report.get(class),
            });
        }
    }
    Ok(rows)
}

/// Runs the ablation ladder over every configured seed, then the stability and
/// multi-target studies on the first seed, and writes the CSV outputs and
/// `report.json` under `<run_dir>/bench`.
pub fn cmd_benchmark(cfg: &RunConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let seeds = cfg.benchmark.seeds.clone();
    if seeds.len() < 3 {
        return config_err(format!("the benchmark needs at least 3 seeds, got {}", seeds.len()));
    }
    let root = cfg.corpus_root();
    if !root
        .join(crate::synth::CorpusManifest::file_name(Split::Pretrain))
        .exists()
    {
        cmd_synth_data(cfg)?;
    }
    let classes: Vec<String> = cfg.dev_classes()?.iter().map(|c| c.name.clone()).collect();
    let mut per_row: BTreeMap<&str, Vec<(u64, RowRun)>> = BTreeMap::new();
    for &s in &seeds {
        let sc = seed_config(cfg, s);
        log::info!("benchmark seed {s}");
        match run_seed(&sc, &sc.run_dir) {
            Ok(rows) => {
                for (name, r) in rows {
                    per_row.entry(name).or_default().push((s, r));
                }
            }
            Err(e) => {
                for name in ROWS {
                    per_row.entry(name).or_default().push((s, Err(e.to_string())));
                }
            }
        }
    }

    let mut rows = Vec::new();
    let mut boxplot = Vec::new();
    for name in ROWS {
        let runs = per_row.remove(name).unwrap_or_default();
        let mut per_seed_pooled = Vec::new();
        let mut per_seed_class = Vec::new();
        let mut failures = Vec::new();
        for (s, r) in runs {
            match r {
                Ok(rep) => {
                    boxplot.push(BoxRow {
                        config: name.into(),
                        seed: s,
                        pooled: rep.pooled,
                        class_mean: rep.class_mean(),
                    });
                    per_seed_pooled.push(rep.pooled);
                    per_seed_class.push(classes.iter().map(|c| (c.clone(), rep.get(c))).collect());
                }
                Err(e) => {
                    boxplot.push(BoxRow {
                        config: name.into(),
                        seed: s,
                        pooled: None,
                        class_mean: None,
                    });
                    failures.push((s, e));
                    per_seed_pooled.push(None);
                    per_seed_class.push(classes.iter().map(|c| (c.clone(), None)).collect());
                }
            }
        }
        let per_class = classes
            .iter()
            .map(|c| {
                (
                    c.clone(),
                    mean(per_seed_class.iter().map(|m: &BTreeMap<String, Option<f64>>| m[c])),
                )
            })
            .collect();
        rows.push(RowResult {
            name: name.into(),
            per_class,
            pooled: mean(per_seed_pooled.iter().copied()),
            per_seed_pooled,
            per_seed_class,
            failures,
        });
    }

    let study_class = cfg.benchmark.study_class.clone();
    let first = seed_config(cfg, seeds[0]);
    let mut study_failures = Vec::new();
    let stability = stability_study(&first, &study_class).unwrap_or_else(|e| {
        study_failures.push(format!("stability: {e}"));
        Vec::new()
    });
    let multi_target = multi_target_study(&first, &study_class).unwrap_or_else(|e| {
        study_failures.push(format!("multi-target: {e}"));
        Vec::new()
    });

    let report = BenchmarkReport {
        seeds,
        classes,
        rows,
        boxplot,
        study_class,
        stability,
        multi_target,
        study_failures,
    };
    let out: PathBuf = cfg.run_dir.join("bench");
    write_text(&out.join("table1.csv"), &report.table1_csv())?;
    write_text(&out.join("boxplot.csv"), &report.boxplot_csv())?;
    write_text(
        &out.join("stability.csv"),
        &BenchmarkReport::study_csv(&report.stability),
    )?;
    write_text(
        &out.join("multi_target.csv"),
        &BenchmarkReport::study_csv(&report.multi_target),
    )?;
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_jsonl(&out.join("rows.jsonl"), &report.rows)?;
    cfg.save(&out.join("config.toml"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iqr_matches_numpy_linear() {
        // numpy.percentile([1..=10], [25, 75]) = 3.25, 7.75
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((iqr(&v).unwrap() - 4.5).abs() < 1e-12);
        assert_eq!(iqr(&[2.0]), Some(0.0));
        assert_eq!(iqr(&[]), None);
    }

    #[test]
    fn table_has_one_line_per_row() {
        let classes = vec!["A".to_string(), "B".to_string()];
        let rows = ROWS
            .iter()
            .map(|n| RowResult {
                name: n.to_string(),
                per_class: classes.iter().map(|c| (c.clone(), Some(1.0))).collect(),
                pooled: None,
                per_seed_pooled: vec![],
                per_seed_class: vec![],
                failures: vec![],
            })
            .collect();
        let r = BenchmarkReport {
            seeds: vec![0, 1, 2],
            classes,
            rows,
            boxplot: vec![],
            study_class: "A".into(),
            stability: vec![],
            multi_target: vec![],
            study_failures: vec![],
        };
        let csv = r.table1_csv();
        assert_eq!(csv.lines().count(), 6);
        assert_eq!(csv.lines().next().unwrap(), "system,A,B,pooled");
        assert!(csv.contains("+Filter,1.000000,1.000000,failed"));
    }
}
