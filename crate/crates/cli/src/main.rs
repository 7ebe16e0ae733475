use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flab_core::config::{RunConfig, Stage};
use flab_core::pipeline::{
    cmd_benchmark, cmd_calibrate, cmd_evaluate, cmd_generate, cmd_synth_data, cmd_train, Bundle, GenerateRequest,
    TrainOptions,
};
use flab_core::selector::SelectionMode;
use flab_core::synth::Split;
use flab_core::{FlabError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "flab",
    version,
    about = "Text-conditioned Foley sound generation with latent diffusion"
)]
struct Cli {
    /// TOML run config. Defaults to `<run-dir>/config.toml` when present, else the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is found.
    #[arg(long, global = true, default_value = "tiny")]
    preset: String,
    /// Overrides the config's run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides the config's corpus directory.
    #[arg(long, global = true)]
    corpus_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    None,
    Top1,
    Threshold,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Val,
    Eval,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the fine-tuning, evaluation and pretraining corpora.
    SynthData,
    /// Train one stage and write `<run-dir>/checkpoints/<stage>.flab`.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Fine-tune a freshly initialized LDM instead of the pretrained one.
        #[arg(long)]
        from_scratch: bool,
        /// Keep the tuning layer at identity.
        #[arg(long)]
        freeze_tuner: bool,
        /// Resume a snapshot even if it was written under another config.
        #[arg(long)]
        force: bool,
        /// Stop after this many LDM steps, leaving a resumable snapshot.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Sample, select and write clips per label.
    Generate {
        /// Comma-separated class labels; all classes of the checkpoint when omitted.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long)]
        count: Option<usize>,
        /// Candidates sampled per emitted clip.
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory, `<run-dir>/generated` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FAD of a generated directory against a corpus split.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-class selection thresholds against the validation split.
    Calibrate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// The five-row ablation plus the stability and multi-target studies.
    Benchmark,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let from_run_dir = cli
        .run_dir
        .as_ref()
        .map(|d| d.join("config.toml"))
        .filter(|p| p.exists());
    let mut cfg = match cli.config.as_ref().or(from_run_dir.as_ref()) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&cli.preset)?,
    };
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(d) = &cli.corpus_dir {
        cfg.corpus_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn load_bundle(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Bundle> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.checkpoint_path(Stage::Finetune));
    if !path.exists() {
        return Err(FlabError::Config(format!(
            "checkpoint {} not found; run `flab train` first",
            path.display()
        )));
    }
    Bundle::load(&path)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::SynthData => {
            let s = cmd_synth_data(&cfg)?;
            println!(
                "corpus at {}: train {} / val {} / eval {} / pretrain {}",
                cfg.corpus_root().display(),
                s.train,
                s.val,
                s.eval,
                s.pretrain
            );
        }
        Command::Train {
            stage,
            from_scratch,
            freeze_tuner,
            force,
            stop_after,
        } => {
            cfg.stage = match stage {
                StageArg::Pretrain => Stage::Pretrain,
                StageArg::Finetune => Stage::Finetune,
            };
            cfg.finetune.from_scratch |= from_scratch;
            cfg.finetune.freeze_tuner |= freeze_tuner;
            let opts = TrainOptions {
                force,
                stop_after,
                ..TrainOptions::from_config(&cfg)
            };
            let out = cmd_train(&cfg, &opts)?;
            println!(
                "{} steps {}..{} of {}, last loss {:?}, wrote {} (lineage {})",
                cfg.stage.as_str(),
                out.start_step,
                out.end_step,
                out.total_steps,
                out.losses.last(),
                out.checkpoint.display(),
                out.lineage.id
            );
        }
        Command::Generate {
            labels,
            count,
            pool,
            mode,
            seed,
            checkpoint,
            out,
        } => {
            let bundle = load_bundle(&cfg, checkpoint.as_deref())?;
            let labels = if labels.is_empty() {
                bundle.meta.prompts.keys().cloned().collect()
            } else {
                labels
            };
            let mode = match mode {
                Some(ModeArg::None) => SelectionMode::None,
                Some(ModeArg::Top1) => SelectionMode::Top1,
                Some(ModeArg::Threshold) => SelectionMode::Threshold,
                None => cfg.selection.mode,
            };
            let req = GenerateRequest {
                labels,
                count: count.unwrap_or(cfg.generate.count_per_class),
                pool_size: pool.unwrap_or(if mode == SelectionMode::None {
                    1
                } else {
                    cfg.selection.pool_size
                }),
                mode,
                seed,
                out_dir: out.unwrap_or_else(|| cfg.run_dir.join("generated")),
            };
            let clips = cmd_generate(&cfg, &bundle, &req)?;
            println!("wrote {} clips to {}", clips.len(), req.out_dir.display());
        }
        Command::Evaluate {
            generated,
            split,
            checkpoint,
        } => {
            let bundle = load_bundle(&cfg, checkpoint.as_deref())?;
            let split = match split {
                SplitArg::Val => Split::Val,
                SplitArg::Eval => Split::Eval,
            };
            let report = cmd_evaluate(&cfg, &bundle.clap, &generated, split)?;
            print!("{}", report.to_csv());
        }
        Command::Calibrate { seed, checkpoint } => {
            let bundle = load_bundle(&cfg, checkpoint.as_deref())?;
            let thetas = cmd_calibrate(&cfg, &bundle, seed)?;
            for (class, t) in thetas {
                println!("{class}\t{t}");
            }
        }
        Command::Benchmark => {
            let report = cmd_benchmark(&cfg)?;
            print!("{}", report.table1_csv());
            println!("outputs under {}", cfg.run_dir.join("bench").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("FLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
