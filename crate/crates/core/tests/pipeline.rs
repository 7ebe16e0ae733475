//! End-to-end runs of the staged pipeline on the smoke preset.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use flab_core::audio::Waveform;
use flab_core::checkpoint::Container;
use flab_core::config::{RunConfig, Stage};
use flab_core::pipeline::{
    cmd_calibrate, cmd_evaluate, cmd_generate, cmd_synth_data, cmd_train, Bundle, GenerateRequest, TrainOptions,
};
use flab_core::selector::SelectionMode;
use flab_core::FlabError;

struct Shared {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
}

/// One synthesized corpus and pretrain checkpoint shared by every test.
fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::smoke();
        cfg.run_dir = dir.path().join("run");
        cmd_synth_data(&cfg).unwrap();
        cmd_train(&cfg, &TrainOptions::from_config(&cfg)).unwrap();
        Shared { _dir: dir, cfg }
    })
}

fn finetune_cfg(name: &str) -> RunConfig {
    let base = &shared().cfg;
    let mut cfg = base.clone();
    cfg.stage = Stage::Finetune;
    cfg.corpus_dir = Some(base.corpus_root());
    cfg.finetune.pretrained = Some(base.checkpoint_path(Stage::Pretrain));
    cfg.run_dir = base.run_dir.parent().unwrap().join(name);
    cfg
}

fn tuned() -> &'static (RunConfig, PathBuf) {
    static T: OnceLock<(RunConfig, PathBuf)> = OnceLock::new();
    T.get_or_init(|| {
        let cfg = finetune_cfg("tuned");
        let out = cmd_train(&cfg, &TrainOptions::from_config(&cfg)).unwrap();
        (cfg, out.checkpoint)
    })
}

fn read_manifest_lines(dir: &Path, name: &str) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join(name))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_data_split_counts() {
    let cfg = &shared().cfg;
    let root = cfg.corpus_root();
    let count = |f: &str| std::fs::read_to_string(root.join(f)).unwrap().lines().count();
    // 20 clips per class at 9:1, seven classes
    assert_eq!(count("train.jsonl"), 126);
    assert_eq!(count("val.jsonl"), 14);
    assert_eq!(count("eval.jsonl"), 42);
    assert_eq!(count("pretrain.jsonl"), 48);
    assert!(root.join("label_text.tsv").exists());
    assert!(root.join("config.toml").exists());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let path = shared().cfg.checkpoint_path(Stage::Pretrain);
    let bytes = std::fs::read(&path).unwrap();
    let again = Bundle::load(&path).unwrap().to_container().unwrap().to_bytes().unwrap();
    assert_eq!(bytes, again);
    let (_, tuned_path) = tuned();
    let bytes = std::fs::read(tuned_path).unwrap();
    let c = Container::load(tuned_path).unwrap();
    assert_eq!(
        bytes,
        Bundle::from_container(&c)
            .unwrap()
            .to_container()
            .unwrap()
            .to_bytes()
            .unwrap()
    );
}

#[test]
fn finetune_without_pretrain_is_a_config_error() {
    let mut cfg = finetune_cfg("orphan");
    cfg.finetune.pretrained = Some(cfg.run_dir.join("missing.flab"));
    let err = cmd_train(&cfg, &TrainOptions::from_config(&cfg)).unwrap_err();
    assert!(matches!(err, FlabError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn scratch_and_pretrained_lineages_differ() {
    let pre = Bundle::load(&shared().cfg.checkpoint_path(Stage::Pretrain)).unwrap();
    let (_, tuned_path) = tuned();
    let t = Bundle::load(tuned_path).unwrap();
    let mut cfg = finetune_cfg("scratch");
    cfg.finetune.from_scratch = true;
    cfg.finetune.freeze_tuner = true;
    let out = cmd_train(&cfg, &TrainOptions::from_config(&cfg)).unwrap();
    let s = Bundle::load(&out.checkpoint).unwrap();

    assert_eq!(t.meta.lineage.parent.as_deref(), Some(pre.meta.lineage.id.as_str()));
    assert_eq!(s.meta.lineage.parent, t.meta.lineage.parent);
    assert_ne!(s.meta.lineage.id, t.meta.lineage.id);
    assert_eq!(
        (s.meta.lineage.ldm_init.as_str(), s.meta.lineage.tuner.as_str()),
        ("scratch", "frozen")
    );
    assert_eq!(
        (t.meta.lineage.ldm_init.as_str(), t.meta.lineage.tuner.as_str()),
        ("pretrained", "trainable")
    );

    // a frozen tuner stays the identity map with zero bias, the trainable one moves
    let identity_offset = |t: &flab_core::tuner::TuningLayer| {
        let a = t.to_arrays().unwrap();
        let d = t.dim();
        let w_off = a["W"]
            .data
            .iter()
            .enumerate()
            .map(|(k, v)| (v - if k / d == k % d { 1.0 } else { 0.0 }).abs())
            .fold(0.0f32, f32::max);
        let b_off = a["b"].data.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        (w_off, b_off)
    };
    assert_eq!(identity_offset(s.tuner.as_ref().unwrap()), (0.0, 0.0));
    let (w_off, b_off) = identity_offset(t.tuner.as_ref().unwrap());
    assert!(w_off > 0.0 && b_off > 0.0);
}

#[test]
fn resume_reproduces_subsequent_losses() {
    let mut cfg = finetune_cfg("resume_full");
    cfg.finetune.optim.epochs = 2;
    cfg.finetune.snapshot_interval = 0;
    let full = cmd_train(&cfg, &TrainOptions::from_config(&cfg)).unwrap();
    assert_eq!(full.total_steps, 16);
    assert!(full.complete());

    let mut cfg = cfg.clone();
    cfg.run_dir = cfg.run_dir.with_file_name("resume_split");
    let first = cmd_train(
        &cfg,
        &TrainOptions {
            stop_after: Some(6),
            ..TrainOptions::from_config(&cfg)
        },
    )
    .unwrap();
    assert!(!first.complete());
    assert_eq!(first.losses, full.losses[..6]);
    let rest = cmd_train(&cfg, &TrainOptions::from_config(&cfg)).unwrap();
    assert_eq!(rest.start_step, 6);
    assert_eq!(rest.losses.len(), 10);
    assert_eq!(rest.losses, full.losses[6..]);
    assert_eq!(
        std::fs::read(&rest.checkpoint).unwrap(),
        std::fs::read(&full.checkpoint).unwrap()
    );
}

#[test]
fn resume_under_a_changed_config_needs_force() {
    let mut cfg = finetune_cfg("resume_hash");
    let opts = TrainOptions {
        stop_after: Some(1),
        ..TrainOptions::from_config(&cfg)
    };
    cmd_train(&cfg, &opts).unwrap();
    cfg.finetune.optim.lr *= 2.0;
    let err = cmd_train(&cfg, &opts).unwrap_err();
    assert!(matches!(err, FlabError::Config(_)), "{err}");
    let forced = cmd_train(
        &cfg,
        &TrainOptions {
            force: true,
            stop_after: None,
            ..opts
        },
    )
    .unwrap();
    assert_eq!(forced.start_step, 1);
    assert!(forced.complete());
}

fn request(out_dir: PathBuf, pool_size: usize, mode: SelectionMode, seed: u64) -> GenerateRequest {
    let cfg = &shared().cfg;
    GenerateRequest {
        labels: cfg.dev_classes().unwrap().iter().map(|c| c.name.clone()).collect(),
        count: 3,
        pool_size,
        mode,
        seed,
        out_dir,
    }
}

fn wavs_under(dir: &Path) -> Vec<PathBuf> {
    let mut v = Vec::new();
    for class in std::fs::read_dir(dir).unwrap() {
        let class = class.unwrap().path();
        if class.is_dir() {
            for f in std::fs::read_dir(&class).unwrap() {
                v.push(f.unwrap().path());
            }
        }
    }
    v.sort();
    v
}

#[test]
fn generate_writes_count_times_classes_valid_wavs() {
    let (cfg, ckpt) = tuned();
    let bundle = Bundle::load(ckpt).unwrap();
    let out = cfg.run_dir.join("gen_plain");
    let clips = cmd_generate(cfg, &bundle, &request(out.clone(), 1, SelectionMode::None, 5)).unwrap();
    assert_eq!(clips.len(), 21);
    let files = wavs_under(&out);
    assert_eq!(files.len(), 21);
    assert_eq!(read_manifest_lines(&out, "generated.jsonl").len(), 21);
    assert!(!out.join("scores.jsonl").exists());
    for f in &files {
        let r = hound::WavReader::open(f).unwrap();
        let spec = r.spec();
        assert_eq!((spec.channels, spec.bits_per_sample, spec.sample_rate), (1, 16, 8000));
        assert_eq!(r.duration(), 8000);
    }
    let w = Waveform::read_wav(&files[0]).unwrap();
    assert!(w.samples.iter().all(|s| s.is_finite()));

    let again = cfg.run_dir.join("gen_plain_again");
    cmd_generate(cfg, &bundle, &request(again.clone(), 1, SelectionMode::None, 5)).unwrap();
    for (a, b) in files.iter().zip(wavs_under(&again)) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}

#[test]
fn top1_generation_writes_score_sidecar() {
    let (cfg, ckpt) = tuned();
    let bundle = Bundle::load(ckpt).unwrap();
    let out = cfg.run_dir.join("gen_top1");
    let clips = cmd_generate(cfg, &bundle, &request(out.clone(), 2, SelectionMode::Top1, 9)).unwrap();
    let rows = read_manifest_lines(&out, "scores.jsonl");
    assert_eq!(rows.len(), clips.len());
    for (row, clip) in rows.iter().zip(&clips) {
        let scores = row["scores"].as_array().unwrap();
        assert_eq!(scores.len(), 2);
        let best = scores.iter().map(|v| v.as_f64().unwrap()).fold(f64::MIN, f64::max);
        assert_eq!(scores[clip.chosen].as_f64().unwrap(), best);
    }
}

#[test]
fn unknown_label_lists_valid_ones() {
    let (cfg, ckpt) = tuned();
    let bundle = Bundle::load(ckpt).unwrap();
    let mut req = request(cfg.run_dir.join("gen_bad"), 1, SelectionMode::None, 0);
    req.labels = vec!["Trombone".into()];
    let err = cmd_generate(cfg, &bundle, &req).unwrap_err();
    assert!(matches!(err, FlabError::Lookup(_)));
    let msg = err.to_string();
    assert!(
        msg.contains("Trombone") && msg.contains("DogBark") && msg.contains("Rain"),
        "{msg}"
    );
}

#[test]
fn evaluate_reports_every_reference_class() {
    let (cfg, ckpt) = tuned();
    let bundle = Bundle::load(ckpt).unwrap();
    let out = cfg.run_dir.join("gen_eval");
    cmd_generate(cfg, &bundle, &request(out.clone(), 1, SelectionMode::None, 3)).unwrap();
    let report = cmd_evaluate(cfg, &bundle.clap, &out, flab_core::synth::Split::Eval).unwrap();
    assert_eq!(report.per_class.len(), 7);
    assert!(report.per_class.values().all(|c| c.fad.is_some_and(|f| f >= 0.0)));
    assert!(out.join("fad.csv").exists() && out.join("fad.jsonl").exists());
}

#[test]
fn calibration_persists_thresholds() {
    let (cfg, ckpt) = tuned();
    let bundle = Bundle::load(ckpt).unwrap();
    let thetas = cmd_calibrate(cfg, &bundle, 11).unwrap();
    assert_eq!(thetas.len(), 7);
    let csv = std::fs::read_to_string(cfg.run_dir.join("calibration").join("calibration.csv")).unwrap();
    assert!(csv.starts_with("class,theta,n_selected,fad\n"));
    let saved = RunConfig::load(&cfg.run_dir.join("config.toml")).unwrap();
    assert_eq!(saved.selection.thresholds, thetas);
}

#[test]
fn benchmark_report_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::smoke();
    cfg.run_dir = dir.path().to_path_buf();
    cfg.corpus_dir = Some(shared().cfg.corpus_root());
    let report = flab_core::pipeline::cmd_benchmark(&cfg).unwrap();
    assert_eq!(report.rows.len(), 5);
    for r in &report.rows {
        assert!(r.failures.is_empty(), "{}: {:?}", r.name, r.failures);
        assert_eq!(r.per_class.len(), 7);
    }
    assert_eq!(report.boxplot.len(), 5 * 3);
    let out = dir.path().join("bench");
    let boxplot = std::fs::read_to_string(out.join("boxplot.csv")).unwrap();
    assert_eq!(boxplot.lines().count(), 1 + 5 * 3);
    let table = std::fs::read_to_string(out.join("table1.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert_eq!(table.lines().next().unwrap().split(',').count(), 1 + 7 + 1);
    // three fixed texts, wrapped and tuned
    assert_eq!(report.stability.len(), 5 * 3);
    assert_eq!(report.multi_target.len(), 2 * 2);
    assert!(report.study_failures.is_empty(), "{:?}", report.study_failures);
    // every cell comes from a stored report
    assert!(out.join("seed_0/pre/eval/pre/fad.jsonl").exists());
    assert!(out.join("seed_2/text/eval/filter/fad.jsonl").exists());
}
