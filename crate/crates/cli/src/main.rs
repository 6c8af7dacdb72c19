//! `loopfit` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use loopfit::benchmark::{Benchmark, BenchmarkConfig};
use loopfit::checkpoint::Checkpoint;
use loopfit::config::{Preset, RunConfig, SEED_ENV};
use loopfit::encoder::SpeakerEmbedding;
use loopfit::evaluation::{mcd_dtw, quality_stratify, Report};
use loopfit::features::{
    generate_toy_corpus, read_frames_expecting, write_frames, Corpus, CorpusConfig, PhonemeMap,
    PhonemeSequence,
};
use loopfit::loop_core::ModelMode;
use loopfit::training::{
    objective_gradient_check, RunOptions, Trainer, TrainingData, CHECKPOINT_DIR, CONFIG_FILE,
};
use loopfit::Error;

#[derive(Parser)]
#[command(
    name = "loopfit",
    version,
    about = "Multi-speaker buffer-loop TTS with feed-forward speaker fitting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (frame files plus manifest).
    GenData(GenDataArgs),
    /// Train a model; writes config, logs and checkpoints under the run directory.
    Train(TrainArgs),
    /// Fit a speaker from one recording: a single encoder pass, no transcript.
    Embed(EmbedArgs),
    /// Synthesize phonemes with a fitted speaker embedding.
    Synth(SynthArgs),
    /// Prime a speaker-agnostic model with a recording, then synthesize new text.
    PrimeSynth(PrimeSynthArgs),
    /// Objective evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Finite-difference check of the training objective's gradients, using
    /// the preset's settings at miniature decoder sizes.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    speakers: usize,
    /// Defaults to $LOOPFIT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 40)]
    utterances: usize,
    #[arg(long, default_value_t = 20)]
    inventory: usize,
    #[arg(long, default_value_t = 63)]
    dim: usize,
    /// `desk` uses 3–8 frames per phoneme, `paper` 8–20.
    #[arg(long, default_value = "desk")]
    durations: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    /// Corpus directory; overrides `data.dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` configuration overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Train without the contrastive loss (alpha = 0).
    #[arg(long)]
    no_contrast: bool,
    /// Train without the cycle loss (beta = 0).
    #[arg(long)]
    no_cycle: bool,
    /// Train the speaker-agnostic model.
    #[arg(long)]
    agnostic: bool,
    /// Continue from the newest epoch checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in total.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PhonemeArgs {
    /// Comma-separated phoneme ids, or names from --phoneme-map.
    #[arg(long)]
    phonemes: String,
    /// File of `name id` lines.
    #[arg(long)]
    phoneme_map: Option<PathBuf>,
    /// Output cap in frames per phoneme.
    #[arg(long, default_value_t = 40)]
    frames_per_phoneme: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Required for speaker-embedded models.
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[command(flatten)]
    text: PhonemeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrimeSynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    primer: PathBuf,
    #[arg(long)]
    primer_phonemes: String,
    #[command(flatten)]
    text: PhonemeArgs,
    #[arg(long, default_value_t = 300)]
    primer_frames: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifierArgs {
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    classifier_epochs: usize,
    #[arg(long, default_value_t = 0)]
    classifier_seed: u64,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Mel-cepstral distortion after DTW alignment.
    Mcd {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        /// Comma-separated feature indices; all by default.
        #[arg(long)]
        dims: Option<String>,
    },
    /// Speaker identification on ground truth and, given a checkpoint, on
    /// free-running output for the trained speakers.
    Id {
        #[command(flatten)]
        classifier: ClassifierArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Same/not-same verification of output fitted to the held-out
    /// speakers (primed output for speaker-agnostic models).
    Auc {
        #[command(flatten)]
        classifier: ClassifierArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the ROC curve as CSV.
        #[arg(long)]
        roc_out: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        primer_frames: usize,
    },
    /// Keep speakers whose test samples separate well from other speakers.
    Stratify {
        #[command(flatten)]
        classifier: ClassifierArgs,
        /// Minimum ratio of inter- to intra-speaker cosine distance.
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
    },
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames per sequence in the check batch.
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .map(Error::exit_code)
                .unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Synth(a) => synth(a),
        Command::PrimeSynth(a) => prime_synth(a),
        Command::Eval(c) => eval(c),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV} is not an unsigned integer: {v:?}"))
            })?,
            Err(_) => 0,
        },
    };
    let base = match a.durations.as_str() {
        "desk" => CorpusConfig::desk(),
        "paper" => CorpusConfig::default(),
        other => {
            return Err(usage(format!(
                "unknown duration preset {other:?} (expected desk or paper)"
            )))
        }
    };
    let cfg = CorpusConfig {
        n_speakers: a.speakers,
        utterances_per_speaker: a.utterances,
        phoneme_inventory: a.inventory,
        feature_dim: a.dim,
        seed,
        ..base
    };
    let m = generate_toy_corpus(&cfg, &a.out)?;
    println!(
        "wrote {} utterances from {} speakers to {}",
        m.len(),
        a.speakers,
        a.out.display()
    );
    Ok(())
}

/// Newest `epoch_N` checkpoint in a run directory.
fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let n = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(n) = n {
            if best.as_ref().is_none_or(|b| n > b.0) {
                best = Some((n, path));
            }
        }
    }
    Ok(best.map(|b| b.1))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut overrides = Vec::new();
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(d) = &a.data {
        overrides.push(("data.dir".into(), d.display().to_string()));
    }
    if a.no_contrast {
        overrides.push(("loss.alpha".into(), "0".into()));
    }
    if a.no_cycle {
        overrides.push(("loss.beta".into(), "0".into()));
    }
    if a.agnostic {
        overrides.push(("model.mode".into(), "agnostic".into()));
    }

    let resume_from = if a.resume {
        latest_checkpoint(&a.run_dir)?
    } else {
        None
    };
    let ck = match &resume_from {
        Some(p) => {
            if a.config.is_some() || !overrides.is_empty() {
                return Err(usage(
                    "--resume takes its configuration from the checkpoint",
                ));
            }
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let config = match (&ck, &a.config) {
        (Some(ck), _) => ck.config.clone(),
        (None, Some(path)) => RunConfig::load(path, &overrides)?,
        (None, None) => {
            let env = std::env::var(SEED_ENV).ok();
            RunConfig::resolve(None, env.as_deref(), &overrides)?
        }
    };

    fs::create_dir_all(&a.run_dir).with_context(|| format!("creating {}", a.run_dir.display()))?;
    let cfg_path = a.run_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_text())
        .with_context(|| format!("writing {}", cfg_path.display()))?;

    let data_dir = config.data_dir.clone().ok_or_else(|| {
        Error::Config("data.dir is not set; pass --data or set it in the config".into())
    })?;
    let corpus = Corpus::load(&data_dir, Some(config.model.phoneme_inventory))?;
    let mut trainer = match ck {
        Some(ck) => Trainer::resume(ck, &corpus)?,
        None => Trainer::new(config, &corpus)?,
    }
    .with_run_dir(&a.run_dir);
    let s = trainer.run(&RunOptions {
        stop_after_epochs: a.stop_after,
        verbose: !a.quiet,
    })?;
    println!(
        "validation mse {} -> {} (best {}), epochs {:?}, steps {}, {}",
        s.initial_val,
        s.final_val,
        s.best_val,
        s.epochs,
        s.steps,
        if s.finished {
            "finished"
        } else {
            "stopped early"
        }
    );
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let y = read_frames_expecting(&a.frames, ck.encoder.config.d_o)?;
    let z = ck.encoder.embed(&y)?;
    fs::write(&a.out, z.to_text()).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn phonemes(text: &str, map: Option<&Path>, inventory: usize) -> Result<PhonemeSequence> {
    Ok(match map {
        Some(p) => {
            let t = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PhonemeMap::parse(&t)?.sequence(text, inventory)?
        }
        None => PhonemeSequence::parse(text, inventory)?,
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = &ck.model;
    let s = phonemes(
        &a.text.phonemes,
        a.text.phoneme_map.as_deref(),
        model.config.phoneme_inventory,
    )?;
    let z = match (&a.embedding, model.mode()) {
        (Some(p), ModelMode::Embedded) => {
            let t = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(SpeakerEmbedding::parse(&t)?)
        }
        (None, ModelMode::Embedded) => {
            return Err(usage("a speaker-embedded model needs --embedding"))
        }
        (Some(_), ModelMode::Agnostic) => {
            return Err(usage("a speaker-agnostic model takes no --embedding"))
        }
        (None, ModelMode::Agnostic) => None,
    };
    let max = (s.len() * a.text.frames_per_phoneme).max(1);
    let y = model.free_run(&s, z.as_ref().map(SpeakerEmbedding::as_slice), max)?;
    write_frames(&y, &a.out)?;
    println!("wrote {} frames to {}", y.len(), a.out.display());
    Ok(())
}

fn prime_synth(a: PrimeSynthArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = &ck.model;
    let inv = model.config.phoneme_inventory;
    let map = a.text.phoneme_map.as_deref();
    let primer_s = phonemes(&a.primer_phonemes, map, inv)?;
    let s = phonemes(&a.text.phonemes, map, inv)?;
    let primer = read_frames_expecting(&a.primer, model.config.d_o)?;
    let max = (s.len() * a.text.frames_per_phoneme).max(1);
    let g = model.prime_and_generate(&primer, &primer_s, &s, a.primer_frames, max)?;
    if g.first_step_buffer != g.primed_buffer {
        bail!(Error::Numeric {
            step: None,
            message: "free-running did not start from the primed buffer".into(),
        });
    }
    write_frames(&g.frames, &a.out)?;
    println!("wrote {} frames to {}", g.frames.len(), a.out.display());
    Ok(())
}

fn benchmark<'a>(
    corpus: &'a Corpus,
    c: &ClassifierArgs,
    ck: Option<&Checkpoint>,
    primer_frames: usize,
) -> Result<Benchmark<'a>> {
    let mut config = BenchmarkConfig {
        primer_frames,
        ..BenchmarkConfig::default()
    };
    config.classifier.epochs = c.classifier_epochs;
    config.classifier.seed = c.classifier_seed;
    let encoder = match ck {
        Some(ck) => ck.encoder.config.clone(),
        None => RunConfig::preset(Preset::Desk).encoder_config(),
    };
    Ok(Benchmark::new(corpus, encoder, config)?)
}

fn load_corpus(dir: &Path, ck: Option<&Checkpoint>) -> Result<Corpus> {
    Ok(Corpus::load(
        dir,
        ck.map(|c| c.config.model.phoneme_inventory),
    )?)
}

fn eval(c: EvalCommand) -> Result<()> {
    let mut report = Report::default();
    match c {
        EvalCommand::Mcd {
            reference,
            synth,
            dims,
        } => {
            let a = loopfit::features::read_frames(&reference)?;
            let b = read_frames_expecting(&synth, a.dim())?;
            let dims: Vec<usize> = match dims {
                Some(d) => d
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| usage(format!("bad dimension {s:?}")))
                    })
                    .collect::<Result<_>>()?,
                None => (0..a.dim()).collect(),
            };
            report.push("mcd", mcd_dtw(&a, &b, &dims)?);
        }
        EvalCommand::Id {
            classifier,
            checkpoint,
        } => {
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let corpus = load_corpus(&classifier.data, ck.as_ref())?;
            let b = benchmark(&corpus, &classifier, ck.as_ref(), 300)?;
            report.push("ground_truth_top1", b.ground_truth_accuracy()?);
            if let Some(ck) = &ck {
                if ck.model.mode() != ModelMode::Embedded {
                    return Err(usage(
                        "free-run identification needs a speaker-embedded model",
                    ));
                }
                let data = TrainingData::new(&corpus, &ck.config)?;
                report.push(
                    "free_run_top1",
                    b.free_run_accuracy(&ck.model, &ck.encoder, &data.train_speakers)?,
                );
            }
        }
        EvalCommand::Auc {
            classifier,
            checkpoint,
            roc_out,
            primer_frames,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let corpus = load_corpus(&classifier.data, Some(&ck))?;
            let b = benchmark(&corpus, &classifier, Some(&ck), primer_frames)?;
            let data = TrainingData::new(&corpus, &ck.config)?;
            let roc = match ck.model.mode() {
                ModelMode::Embedded => {
                    b.fitting_verification(&ck.model, &ck.encoder, &data.held_out_speakers)?
                }
                ModelMode::Agnostic => {
                    let (roc, continuous) =
                        b.priming_verification(&ck.model, &data.held_out_speakers)?;
                    report.push("buffer_continuity", if continuous { 1.0 } else { 0.0 });
                    roc
                }
            };
            report.push("auc", roc.auc);
            if let Some(p) = roc_out {
                fs::write(&p, roc.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        EvalCommand::Stratify {
            classifier,
            threshold,
        } => {
            let corpus = load_corpus(&classifier.data, None)?;
            let b = benchmark(&corpus, &classifier, None, 300)?;
            let r = quality_stratify(&b.test_activations()?, threshold)?;
            for (name, ratio) in &r.ratios {
                let kept = r.kept.contains(name);
                println!("{name} {ratio} {}", if kept { "kept" } else { "dropped" });
            }
            for name in &r.skipped {
                println!("{name} - skipped");
            }
        }
    }
    print!("{}", report.to_text());
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    let config = RunConfig {
        seed: a.seed,
        ..RunConfig::preset(preset)
    }
    .gradient_check_config();
    let ck = Checkpoint::fresh(config)?;
    let r = objective_gradient_check(
        &ck.model,
        &ck.encoder,
        &ck.config.weights,
        a.frames,
        a.step,
        a.seed,
    )?;
    let names: Vec<&String> = ck
        .model
        .params
        .names()
        .iter()
        .chain(ck.encoder.params.names())
        .collect();
    println!(
        "probes {} kinked {} max_rel_error {:e} max_abs_gradient {:e} worst {} probe {}",
        r.probes, r.kinked, r.max_rel_error, r.max_abs_gradient, names[r.worst.0], r.worst.1
    );
    if !(r.max_rel_error < a.tolerance) {
        bail!(Error::Numeric {
            step: None,
            message: format!(
                "gradient check failed: relative error {:e} ≥ {:e}",
                r.max_rel_error, a.tolerance
            ),
        });
    }
    Ok(())
}
