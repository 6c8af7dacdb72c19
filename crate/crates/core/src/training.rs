//! Two-phase training: optimiser, per-step wiring of the encoder output into
//! the decoder, the epoch loop over length buckets, run-directory
//! bookkeeping, and a finite-difference gradient check.
//!
//! Parameters, optimiser moments and batch-norm running statistics are
//! rounded to `f32` after every update. Checkpoints store `f32`, so a
//! resumed run continues from exactly the in-memory state.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
pub use crate::config::{EpochRule, OptimizerConfig, OptimizerKind, PhaseConfig};
use crate::encoder::{BnMode, SpeakerEncoder};
use crate::error::{Error, Result};
use crate::features::{
    add_noise, crop, make_triplet_batch, pair_batches, partition_by_length, Corpus, Split,
    VocoderFrameSequence,
};
use crate::loop_core::{LoopModel, ModelMode, SeqBatch};
use crate::losses::{batch_losses, mse_var, LossBreakdown, LossWeights};
use crate::seed::derive_seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_LOG: &str = "losses.log";
pub const VALIDATION_LOG: &str = "validation.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best";

pub(crate) const MODEL_STREAM: u64 = 1;
pub(crate) const ENCODER_STREAM: u64 = 2;
const DATA_STREAM: u64 = 3;

pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub(crate) fn round_tensor(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = round_f32(*v));
}

/// First and second moments per parameter tensor, in the order decoder
/// parameters then encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        OptimizerState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update of `params[i]` by `grads[i]`; entries without a gradient
    /// are left alone. Returns the gradient norm before clipping.
    pub fn apply(
        &mut self,
        cfg: &OptimizerConfig,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
    ) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::arg(
                "optimizer state does not match the parameter list",
            ));
        }
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.norm_sq())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric("non-finite gradient"));
        }
        let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::arg("gradient shape differs from its parameter"));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let pd = p.data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in pd.iter_mut().zip(g.data()) {
                        *w = round_f32(*w - cfg.lr * scale * gi);
                    }
                }
                OptimizerKind::Adam => {
                    for j in 0..pd.len() {
                        let gj = scale * g.data()[j];
                        let mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                        let vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                        pd[j] =
                            round_f32(pd[j] - cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps));
                        m[j] = round_f32(mj);
                        v[j] = round_f32(vj);
                    }
                }
            }
        }
        Ok(norm)
    }
}

/// Progress through the two-phase schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunState {
    /// 0 or 1 while training; 2 once both phases are done.
    pub phase: usize,
    /// Epochs completed in the current phase.
    pub epoch: usize,
    /// Epochs completed over both phases.
    pub total_epochs: usize,
    pub global_step: u64,
    pub seed: u64,
    /// Lowest validation MSE seen; infinite before the first epoch.
    pub best_val: f64,
    /// Lowest validation MSE in the current phase, for the stopping rule.
    pub phase_best: f64,
    /// Consecutive epochs without sufficient improvement on `phase_best`.
    pub since_best: usize,
    /// Validation MSE before any update; NaN until measured.
    pub initial_val: f64,
    pub last_val: f64,
}

impl TrainRunState {
    pub fn new(seed: u64) -> Self {
        TrainRunState {
            phase: 0,
            epoch: 0,
            total_epochs: 0,
            global_step: 0,
            seed,
            best_val: f64::INFINITY,
            phase_best: f64::INFINITY,
            since_best: 0,
            initial_val: f64::NAN,
            last_val: f64::NAN,
        }
    }

    pub fn finished(&self) -> bool {
        self.phase >= 2
    }
}

/// Train/validation split of a corpus with length buckets over the
/// training samples.
#[derive(Clone, Debug)]
pub struct TrainingData<'a> {
    pub corpus: &'a Corpus,
    /// Corpus indices of training utterances of the training speakers.
    pub train: Vec<usize>,
    /// Corpus indices of held-back utterances of the training speakers.
    pub validation: Vec<usize>,
    pub train_speakers: Vec<String>,
    pub held_out_speakers: Vec<String>,
    /// Speaker index (into `train_speakers`) per corpus index.
    speaker_of: Vec<usize>,
    pub buckets: Vec<Vec<usize>>,
}

impl<'a> TrainingData<'a> {
    pub fn new(corpus: &'a Corpus, config: &RunConfig) -> Result<Self> {
        if corpus.feature_dim != config.model.d_o {
            return Err(Error::Config(format!(
                "corpus frames have {} dimensions, model.d_o is {}",
                corpus.feature_dim, config.model.d_o
            )));
        }
        if corpus.phoneme_inventory > config.model.phoneme_inventory {
            return Err(Error::Config(format!(
                "corpus uses {} phoneme ids, model.phoneme_inventory is {}",
                corpus.phoneme_inventory, config.model.phoneme_inventory
            )));
        }
        let all = corpus.speakers();
        let n = if config.train_speakers == 0 {
            all.len()
        } else {
            config.train_speakers
        };
        if n > all.len() {
            return Err(Error::Config(format!(
                "data.train_speakers = {n} but the corpus has {} speakers",
                all.len()
            )));
        }
        if n < 2 {
            return Err(Error::Config(
                "training needs at least two speakers for negatives".into(),
            ));
        }
        let train_speakers = all[..n].to_vec();
        let held_out_speakers = all[n..].to_vec();
        let index: HashMap<&str, usize> = train_speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let speaker_of = corpus
            .manifest
            .records
            .iter()
            .map(|r| index.get(r.speaker.as_str()).copied().unwrap_or(usize::MAX))
            .collect::<Vec<_>>();
        let train =
            corpus.indices(|r| r.split == Split::Train && index.contains_key(r.speaker.as_str()));
        let validation =
            corpus.indices(|r| r.split == Split::Test && index.contains_key(r.speaker.as_str()));
        if validation.is_empty() {
            return Err(Error::Config(
                "no validation utterances for the training speakers".into(),
            ));
        }
        let per_speaker_min = (0..n)
            .map(|s| train.iter().filter(|&&i| speaker_of[i] == s).count())
            .min()
            .unwrap_or(0);
        if per_speaker_min < 2 {
            return Err(Error::Config(
                "every training speaker needs at least two training utterances".into(),
            ));
        }
        let by_id: HashMap<&str, usize> = corpus
            .manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.utterance_id.as_str(), i))
            .collect();
        let train_manifest = corpus
            .manifest
            .filter(|r| r.split == Split::Train && index.contains_key(r.speaker.as_str()));
        let buckets = partition_by_length(&train_manifest, config.buckets)
            .map_err(|e| Error::Config(e.to_string()))?
            .into_iter()
            .map(|m| {
                m.records
                    .iter()
                    .map(|r| by_id[r.utterance_id.as_str()])
                    .collect()
            })
            .collect();
        Ok(TrainingData {
            corpus,
            train,
            validation,
            train_speakers,
            held_out_speakers,
            speaker_of,
            buckets,
        })
    }

    pub fn speaker_of(&self, idx: usize) -> usize {
        self.speaker_of[idx]
    }
}

/// One mini-batch ready for [`train_step`].
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub bucket: usize,
    /// Corpus indices, row order of `batch`.
    pub samples: Vec<usize>,
    pub batch: SeqBatch,
    /// Encoder input when it differs from the targets.
    pub encoder_input: Option<Tensor>,
    pub triplets: Vec<(usize, usize, usize)>,
}

fn padded(frames: &[VocoderFrameSequence]) -> Tensor {
    let d = frames[0].dim();
    let t = frames.iter().map(|f| f.len()).max().unwrap();
    let mut data = vec![0.0; frames.len() * t * d];
    for (b, f) in frames.iter().enumerate() {
        for (dst, src) in data[b * t * d..].iter_mut().zip(f.as_slice()) {
            *dst = *src as f64;
        }
    }
    Tensor::from_vec(&[frames.len(), t, d], data)
}

/// All parameters in optimiser order.
fn param_list<'m>(
    model: &'m mut LoopModel,
    encoder: &'m mut SpeakerEncoder,
) -> Vec<&'m mut Tensor> {
    model
        .params
        .values_mut()
        .iter_mut()
        .chain(encoder.params.values_mut().iter_mut())
        .collect()
}

/// One optimiser update on every parameter from the objective of `b`.
///
/// The encoder embeds each (noisy) target, the decoder is teacher-forced
/// with that embedding, and the contrastive and cycle terms are formed as
/// in [`batch_losses`]. Batch-norm running statistics are updated from the
/// encoder pass over the targets.
pub fn train_step(ck: &mut Checkpoint, b: &PreparedBatch) -> Result<LossBreakdown> {
    let step = ck.run.global_step as usize;
    let numeric = |message: String| Error::Numeric {
        step: Some(step),
        message,
    };
    let mut tape = Tape::new();
    let vars = batch_losses(
        &mut tape,
        &ck.model,
        &ck.encoder,
        &b.batch,
        b.encoder_input.as_ref(),
        Some(&b.triplets),
        &ck.config.weights,
        BnMode::Train,
    )?;
    let breakdown = vars.breakdown(&tape, &ck.config.weights);
    if !breakdown.all_finite() {
        return Err(numeric(format!("non-finite loss {breakdown:?}")));
    }
    let grads_of = tape.backward(vars.total);
    let agnostic = ck.model.mode() == ModelMode::Agnostic;
    let mut grads: Vec<Option<Tensor>> = vars
        .model_params
        .iter()
        .zip(ck.model.params.values())
        .map(|(&v, p)| Some(grads_of.get_or_zeros(v, p.shape())))
        .collect();
    grads.extend(
        vars.encoder_params
            .iter()
            .zip(ck.encoder.params.values())
            .map(|(&v, p)| (!agnostic).then(|| grads_of.get_or_zeros(v, p.shape()))),
    );
    let cfg = ck.config.optimizer;
    let mut params = param_list(&mut ck.model, &mut ck.encoder);
    ck.optimizer
        .apply(&cfg, &mut params, &grads)
        .map_err(|e| match e {
            Error::Numeric { message, .. } => numeric(message),
            other => other,
        })?;
    if !vars.stats.is_empty() {
        ck.encoder.update_running(&vars.stats);
        for r in &mut ck.encoder.running {
            r.mean
                .iter_mut()
                .chain(r.var.iter_mut())
                .for_each(|v| *v = round_f32(*v));
        }
    }
    ck.run.global_step += 1;
    Ok(breakdown)
}

/// Teacher-forced MSE on clean validation targets, with the embedding of
/// each clean target and running batch-norm statistics.
pub fn validation_mse(
    model: &LoopModel,
    encoder: &SpeakerEncoder,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::arg("empty validation set"));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(16) {
        let frames: Vec<&VocoderFrameSequence> =
            chunk.iter().map(|&i| &corpus.sequences[i]).collect();
        let phon = chunk
            .iter()
            .map(|&i| corpus.phonemes[i].ids().to_vec())
            .collect();
        let batch = SeqBatch::new(phon, &frames)?;
        let mut tape = Tape::new();
        let mb = model.params.bind(&mut tape);
        let z = if model.mode() == ModelMode::Embedded {
            let eb = encoder.params.bind(&mut tape);
            let x = tape.leaf(batch.targets.clone());
            Some(
                encoder
                    .forward_tape(&mut tape, &eb, x, &batch.lens, BnMode::Eval)
                    .z,
            )
        } else {
            None
        };
        let o = model.teacher_forced_tape(&mut tape, &mb, &batch, z);
        let m = mse_var(&mut tape, o, &batch);
        total += tape.value(m).item() * chunk.len() as f64;
    }
    let v = total / indices.len() as f64;
    if !v.is_finite() {
        return Err(Error::numeric("non-finite validation loss"));
    }
    Ok(v)
}

/// Builds the mini-batches of one epoch: bucket order shuffled, distinct
/// speakers per batch, and per-sample crop and noise drawn from seeds
/// derived from `(seed, phase, epoch, sample)`.
pub fn epoch_batches(
    data: &TrainingData,
    config: &RunConfig,
    seed: u64,
    phase: usize,
    epoch: usize,
) -> Result<Vec<PreparedBatch>> {
    let pc = &config.phases[phase];
    let base = [DATA_STREAM, phase as u64, epoch as u64];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &base));
    let mut order: Vec<usize> = (0..data.buckets.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for bucket in order {
        let members = &data.buckets[bucket];
        let samples: Vec<(usize, usize)> =
            members.iter().map(|&i| (i, data.speaker_of[i])).collect();
        for pairs in pair_batches(&samples, (pc.batch_size / 2).max(2), &mut rng) {
            let idx: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
            if let Some(stray) = idx.iter().find(|i| !members.contains(i)) {
                return Err(Error::Layout(format!(
                    "sample {stray} is not in bucket {bucket}"
                )));
            }
            let local: Vec<(usize, usize)> = (0..pairs.len()).map(|p| (2 * p, 2 * p + 1)).collect();
            let spk: Vec<usize> = idx.iter().map(|&i| data.speaker_of[i]).collect();
            let triplets = make_triplet_batch(&local, &spk)?.triplets;
            let mut clean = Vec::with_capacity(idx.len());
            let mut noisy = Vec::with_capacity(idx.len());
            for &i in &idx {
                let path = [base[0], base[1], base[2], i as u64];
                let c = crop(
                    &data.corpus.sequences[i],
                    pc.max_len,
                    derive_seed(seed, &[&path[..], &[0]].concat()),
                )?;
                noisy.push(add_noise(
                    &c,
                    pc.noise_sd,
                    derive_seed(seed, &[&path[..], &[1]].concat()),
                )?);
                clean.push(c);
            }
            let phon = idx
                .iter()
                .map(|&i| data.corpus.phonemes[i].ids().to_vec())
                .collect();
            let noisy_refs: Vec<&VocoderFrameSequence> = noisy.iter().collect();
            let batch = SeqBatch::new(phon, &noisy_refs)?;
            let encoder_input =
                (!config.encoder_noise && pc.noise_sd > 0.0).then(|| padded(&clean));
            out.push(PreparedBatch {
                bucket,
                samples: idx,
                batch,
                encoder_input,
                triplets,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop once this many epochs (over both phases) have completed.
    pub stop_after_epochs: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub initial_val: f64,
    pub final_val: f64,
    pub best_val: f64,
    pub epochs: [usize; 2],
    pub steps: u64,
    pub finished: bool,
}

pub struct Trainer<'a> {
    pub ck: Checkpoint,
    pub data: TrainingData<'a>,
    run_dir: Option<PathBuf>,
    epochs_in_phase: [usize; 2],
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, corpus: &'a Corpus) -> Result<Self> {
        Self::resume(Checkpoint::fresh(config)?, corpus)
    }

    pub fn resume(ck: Checkpoint, corpus: &'a Corpus) -> Result<Self> {
        ck.config.validate()?;
        let data = TrainingData::new(corpus, &ck.config)?;
        Ok(Trainer {
            ck,
            data,
            run_dir: None,
            epochs_in_phase: [0, 0],
        })
    }

    /// Writes `config.txt`, logs and checkpoints under `dir`.
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    pub fn validation_mse(&self) -> Result<f64> {
        validation_mse(
            &self.ck.model,
            &self.ck.encoder,
            self.data.corpus,
            &self.data.validation,
        )
    }

    fn checkpoint_path(&self, name: &str) -> Option<PathBuf> {
        self.run_dir
            .as_ref()
            .map(|d| d.join(CHECKPOINT_DIR).join(name))
    }

    fn prepare_run_dir(&self) -> Result<()> {
        let Some(dir) = &self.run_dir else {
            return Ok(());
        };
        let ckdir = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
        let cfg = dir.join(CONFIG_FILE);
        fs::write(&cfg, self.ck.config.to_text()).map_err(|e| Error::io(&cfg, e))?;
        // on resume drop log lines past the checkpoint so the log continues
        // exactly where the restored state left off
        let step = self.ck.run.global_step;
        let epochs = self.ck.run.total_epochs;
        truncate_log(
            &dir.join(LOSS_LOG),
            "# step phase epoch mse contrast cycle total",
            |first| first.parse::<u64>().map(|s| s <= step).unwrap_or(false),
        )?;
        truncate_log(
            &dir.join(VALIDATION_LOG),
            "# total_epochs phase epoch val_mse",
            |first| first.parse::<usize>().map(|e| e <= epochs).unwrap_or(false),
        )?;
        Ok(())
    }

    fn append(&self, file: &str, line: &str) -> Result<()> {
        let Some(dir) = &self.run_dir else {
            return Ok(());
        };
        let path = dir.join(file);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn save(&self, name: &str) -> Result<()> {
        if let Some(p) = self.checkpoint_path(name) {
            self.ck.save(&p)?;
        }
        Ok(())
    }

    fn last_good(&self) -> String {
        match (&self.run_dir, self.ck.run.total_epochs) {
            (None, _) => "no run directory".into(),
            (Some(_), 0) => "no checkpoint written yet".into(),
            (Some(_), n) => format!(
                "last good checkpoint {}",
                self.checkpoint_path(&format!("epoch_{n}"))
                    .unwrap()
                    .display()
            ),
        }
    }

    /// Runs the remaining schedule.
    pub fn run(&mut self, opts: &RunOptions) -> Result<TrainSummary> {
        self.prepare_run_dir()?;
        if self.ck.run.initial_val.is_nan() {
            let v = self.validation_mse()?;
            self.ck.run.initial_val = v;
            self.ck.run.last_val = v;
            self.append(VALIDATION_LOG, &format!("0 0 0 {v}"))?;
        }
        while !self.ck.run.finished() {
            if opts
                .stop_after_epochs
                .is_some_and(|n| self.ck.run.total_epochs >= n)
            {
                break;
            }
            let phase = self.ck.run.phase;
            let pc = self.ck.config.phases[phase];
            let batches = epoch_batches(
                &self.data,
                &self.ck.config,
                self.ck.run.seed,
                phase,
                self.ck.run.epoch,
            )?;
            for b in &batches {
                let step = self.ck.run.global_step;
                let l = train_step(&mut self.ck, b).map_err(|e| match e {
                    Error::Numeric { step, message } => Error::Numeric {
                        step,
                        message: format!("{message}; {}", self.last_good()),
                    },
                    other => other,
                })?;
                self.append(
                    LOSS_LOG,
                    &format!(
                        "{step} {} {} {} {} {} {}",
                        phase + 1,
                        self.ck.run.epoch + 1,
                        l.mse,
                        l.contrast,
                        l.cycle,
                        l.total
                    ),
                )?;
            }
            let run = &mut self.ck.run;
            run.epoch += 1;
            run.total_epochs += 1;
            self.epochs_in_phase[phase] += 1;
            let val = validation_mse(
                &self.ck.model,
                &self.ck.encoder,
                self.data.corpus,
                &self.data.validation,
            )
            .map_err(|e| match e {
                Error::Numeric { message, .. } => Error::Numeric {
                    step: Some(self.ck.run.global_step as usize),
                    message,
                },
                other => other,
            })?;
            let run = &mut self.ck.run;
            run.last_val = val;
            let improved_best = val < run.best_val;
            if improved_best {
                run.best_val = val;
            }
            let phase_done = match pc.epochs {
                EpochRule::Fixed(n) => run.epoch >= n,
                EpochRule::UntilConverged {
                    max_epochs,
                    tolerance,
                    patience,
                } => {
                    if val < run.phase_best * (1.0 - tolerance) {
                        run.phase_best = val;
                        run.since_best = 0;
                    } else {
                        run.since_best += 1;
                    }
                    run.since_best >= patience || run.epoch >= max_epochs
                }
            };
            let line = format!("{} {} {} {val}", run.total_epochs, phase + 1, run.epoch);
            if opts.verbose {
                eprintln!(
                    "epoch {} (phase {}, {}): validation mse {val:.4}, {} steps",
                    run.total_epochs,
                    phase + 1,
                    run.epoch,
                    run.global_step
                );
            }
            if phase_done {
                run.phase += 1;
                run.epoch = 0;
                run.phase_best = f64::INFINITY;
                run.since_best = 0;
            }
            self.append(VALIDATION_LOG, &line)?;
            let n = self.ck.run.total_epochs;
            self.save(&format!("epoch_{n}"))?;
            if improved_best {
                self.save(BEST_CHECKPOINT)?;
            }
        }
        let r = &self.ck.run;
        Ok(TrainSummary {
            initial_val: r.initial_val,
            final_val: r.last_val,
            best_val: r.best_val,
            epochs: self.epochs_in_phase,
            steps: r.global_step,
            finished: r.finished(),
        })
    }
}

fn truncate_log(path: &Path, header: &str, keep: impl Fn(&str) -> bool) -> Result<()> {
    let mut text = format!("{header}\n");
    if let Ok(old) = fs::read_to_string(path) {
        for line in old.lines().filter(|l| !l.starts_with('#')) {
            if keep(line.split_whitespace().next().unwrap_or("")) {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Probe error above which the finite difference is repeated at a smaller step.
const KINK_RECHECK: f64 = 1e-6;
/// Relative change between the two step sizes that marks a non-smooth probe.
const KINK_DISAGREEMENT: f64 = 1e-5;
/// Central-difference roundoff is taken as this many `ε·|f| / h`; a gap
/// between the two steps within their roundoff is not a kink.
const ROUNDOFF_FACTOR: f64 = 8.0;

/// How [`gradient_check`] probes each tensor.
#[derive(Clone, Copy, Debug)]
pub struct ProbeMode {
    /// Tensors with at most this many scalars are checked per coordinate.
    pub coordinate_limit: usize,
    /// Random unit directions per larger tensor; at least 64.
    pub directions: usize,
    pub seed: u64,
}

impl Default for ProbeMode {
    fn default() -> Self {
        ProbeMode {
            coordinate_limit: 64,
            directions: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor index and probe number of the worst probe.
    pub worst: (usize, usize),
    pub probes: usize,
    /// Largest magnitude seen on either side, for spotting a check that
    /// only compared zeros.
    pub max_abs_gradient: f64,
    /// Probes whose central difference changed with a tenth of the step,
    /// i.e. that straddled a non-smooth point; these were compared at the
    /// smaller step.
    pub kinked: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// Small tensors are probed coordinate by coordinate; larger ones along
/// random unit directions, comparing the directional derivative. A probe
/// that disagrees is repeated at a tenth of the step; if the two differences
/// disagree with each other by more than their roundoff, the probe crossed a
/// kink and the smaller step is used.
pub fn gradient_check(
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    mode: ProbeMode,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len()
        || params
            .iter()
            .zip(analytic)
            .any(|(p, g)| p.shape() != g.shape())
    {
        return Err(Error::arg("analytic gradients do not match the parameters"));
    }
    if !(step > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mode.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        probes: 0,
        max_abs_gradient: 0.0,
        kinked: 0,
    };
    for ti in 0..params.len() {
        let n = params[ti].len();
        let dirs: Vec<Vec<f64>> = if n <= mode.coordinate_limit {
            (0..n)
                .map(|j| {
                    let mut d = vec![0.0; n];
                    d[j] = 1.0;
                    d
                })
                .collect()
        } else {
            (0..mode.directions.max(64))
                .map(|_| {
                    let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                    d.into_iter().map(|v| v / norm).collect()
                })
                .collect()
        };
        for (pi, d) in dirs.iter().enumerate() {
            let mut eval = |h: f64| -> Result<f64> {
                for ((w, p), dj) in work[ti].data_mut().iter_mut().zip(params[ti].data()).zip(d) {
                    *w = p + h * dj;
                }
                let v = f(&work)?;
                if !v.is_finite() {
                    return Err(Error::numeric(
                        "gradient-check closure returned a non-finite value",
                    ));
                }
                Ok(v)
            };
            let mut central = |h: f64| -> Result<(f64, f64)> {
                let (up, down) = (eval(h)?, eval(-h)?);
                let noise = ROUNDOFF_FACTOR * f64::EPSILON * up.abs().max(down.abs()) / h;
                Ok(((up - down) / (2.0 * h), noise))
            };
            let (fd, noise) = central(step)?;
            let an: f64 = analytic[ti]
                .data()
                .iter()
                .zip(d)
                .map(|(g, dj)| g * dj)
                .sum();
            let mut err = relative_error(an, fd);
            if err > KINK_RECHECK {
                let (fine, fine_noise) = central(0.1 * step)?;
                let gap = (fd - fine).abs();
                if relative_error(fd, fine) > KINK_DISAGREEMENT && gap > noise + fine_noise {
                    report.kinked += 1;
                    err = relative_error(an, fine);
                }
            }
            work[ti] = params[ti].clone();
            report.probes += 1;
            report.max_abs_gradient = report.max_abs_gradient.max(an.abs()).max(fd.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, pi);
            }
        }
    }
    Ok(report)
}

/// Checks the gradient of the full weighted objective of a small random
/// batch (two speakers, two samples each, `frames` frames) with respect to
/// every decoder and encoder parameter.
///
/// Parameters are first jittered so that no activation sits exactly on a
/// ReLU kink (zero-initialised biases meet an all-zero initial buffer). The
/// contrastive margin is set just above the negative distance of the first
/// triplet so that probes run close to the hinge.
pub fn objective_gradient_check(
    model: &LoopModel,
    encoder: &SpeakerEncoder,
    weights: &LossWeights,
    frames: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, mut encoder) = (model.clone(), encoder.clone());
    for t in model
        .params
        .values_mut()
        .iter_mut()
        .chain(encoder.params.values_mut())
    {
        for v in t.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += 0.05 * e;
        }
    }
    let (model, encoder) = (&model, &encoder);
    let cfg = &model.config;
    let mut seqs = Vec::new();
    let mut phon = Vec::new();
    for spk in 0..4 {
        let offset = if spk < 2 { 0.5 } else { -0.5 };
        let data: Vec<f64> = (0..frames * cfg.d_o)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                offset + 0.5 * e
            })
            .collect();
        seqs.push(VocoderFrameSequence::from_f64(cfg.d_o, &data)?);
        let l = 2 + spk % 2;
        phon.push(
            (0..l)
                .map(|j| (spk + j) % cfg.phoneme_inventory)
                .collect::<Vec<_>>(),
        );
    }
    let refs: Vec<&VocoderFrameSequence> = seqs.iter().collect();
    let batch = SeqBatch::new(phon, &refs)?;
    let triplets = vec![(0, 1, 2), (2, 3, 0)];

    let mut weights = *weights;
    if model.mode() == ModelMode::Embedded {
        let mut tape = Tape::new();
        let eb = encoder.params.bind(&mut tape);
        let x = tape.leaf(batch.targets.clone());
        let out = encoder.forward_tape(&mut tape, &eb, x, &batch.lens, BnMode::Train);
        let zt = tape.value(out.z).clone();
        let dz = zt.shape()[1];
        let dist = (0..dz)
            .map(|j| {
                let d = zt.data()[dz + j] - zt.data()[2 * dz + j];
                d * d
            })
            .sum::<f64>()
            .sqrt();
        weights.margin = dist + 1e-3;
    }

    let n_model = model.params.len();
    let objective = |params: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut m = model.clone();
        let mut e = encoder.clone();
        m.params.values_mut().clone_from_slice(&params[..n_model]);
        e.params.values_mut().clone_from_slice(&params[n_model..]);
        let mut tape = Tape::new();
        let vars = batch_losses(
            &mut tape,
            &m,
            &e,
            &batch,
            None,
            Some(&triplets),
            &weights,
            BnMode::Train,
        )?;
        let value = tape.value(vars.total).item();
        let g = tape.backward(vars.total);
        let grads = vars
            .model_params
            .iter()
            .chain(&vars.encoder_params)
            .zip(params)
            .map(|(&v, p)| g.get_or_zeros(v, p.shape()))
            .collect();
        Ok((value, grads))
    };
    let params: Vec<Tensor> = model
        .params
        .values()
        .iter()
        .chain(encoder.params.values())
        .cloned()
        .collect();
    let (_, analytic) = objective(&params)?;
    let mode = ProbeMode {
        coordinate_limit: 0,
        directions: 64,
        seed: derive_seed(seed, &[1]),
    };
    gradient_check(
        |p| objective(p).map(|r| r.0),
        &params,
        &analytic,
        step,
        mode,
    )
}
