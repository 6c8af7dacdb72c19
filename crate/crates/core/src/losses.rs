//! Reconstruction, contrastive and cycle losses and their weighted sum.
//!
//! Batch values are means over samples (or triples). The plain functions
//! evaluate a single sample; [`batch_losses`] records the whole training
//! objective on a tape.

use crate::encoder::{BnMode, SpeakerEncoder};
use crate::error::{Error, Result};
use crate::features::{PhonemeSequence, VocoderFrameSequence};
use crate::loop_core::{LoopModel, ModelMode, SeqBatch};
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 10.0;
pub const DEFAULT_MARGIN: f64 = 1.0;

/// Which decoder output the cycle term re-embeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CyclePass {
    /// The teacher-forced output, aligned with the targets.
    #[default]
    TeacherForced,
    /// A free-running rollout of the target length, fed its own outputs.
    FreeRunning,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub cycle_pass: CyclePass,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            margin: DEFAULT_MARGIN,
            cycle_pass: CyclePass::TeacherForced,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite())
            || !(self.beta >= 0.0 && self.beta.is_finite())
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got alpha = {}, beta = {}",
                self.alpha, self.beta
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "contrastive margin must be positive, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub contrast: f64,
    pub cycle: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.mse, self.contrast, self.cycle, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `(1/d_o) Σ_t ‖y_t − o_t‖²` for `l × d_o` tensors.
pub fn mse_loss(o: &Tensor, y: &Tensor) -> Result<f64> {
    if o.shape() != y.shape() || o.shape().len() != 2 {
        return Err(Error::arg(format!(
            "MSE needs equal l × d_o shapes, got {:?} and {:?}",
            o.shape(),
            y.shape()
        )));
    }
    let d = o.shape()[1] as f64;
    Ok(o.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / d)
}

/// `½(‖z1 − z2‖² + max(0, Δ − ‖z2 − z3‖)²)`.
pub fn contrastive_loss(z1: &[f64], z2: &[f64], z3: &[f64], margin: f64) -> f64 {
    let pos: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum();
    let neg = z2
        .iter()
        .zip(z3)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let h = (margin - neg).max(0.0);
    0.5 * (pos + h * h)
}

/// `‖N_s(y) − N_s(o)‖²` where `o` is the decoder output conditioned on
/// `N_s(y)`, teacher-forced or free-running per `pass`. Uses running
/// batch-norm statistics.
pub fn cycle_loss(
    model: &LoopModel,
    encoder: &SpeakerEncoder,
    y: &VocoderFrameSequence,
    s: &PhonemeSequence,
    pass: CyclePass,
) -> Result<f64> {
    let batch = SeqBatch::new(vec![s.ids().to_vec()], &[y])?;
    let mut tape = Tape::new();
    let weights = LossWeights {
        cycle_pass: pass,
        ..LossWeights::default()
    };
    let vars = batch_losses(
        &mut tape,
        model,
        encoder,
        &batch,
        None,
        None,
        &weights,
        BnMode::Eval,
    )?;
    Ok(tape.value(vars.cycle).item())
}

pub fn total_loss(
    mse: f64,
    contrast: f64,
    cycle: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown {
        mse,
        contrast,
        cycle,
        total: mse + weights.alpha * contrast + weights.beta * cycle,
        alpha: weights.alpha,
        beta: weights.beta,
    })
}

/// Tape handles of one batch objective.
pub struct LossVars {
    pub mse: Var,
    pub contrast: Var,
    pub cycle: Var,
    pub total: Var,
    /// Batch-norm statistics of the encoder pass over the targets.
    pub stats: Vec<BnStats>,
    /// Bound parameters of the decoder and the encoder.
    pub model_params: Vec<Var>,
    pub encoder_params: Vec<Var>,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, weights: &LossWeights) -> LossBreakdown {
        LossBreakdown {
            mse: tape.value(self.mse).item(),
            contrast: tape.value(self.contrast).item(),
            cycle: tape.value(self.cycle).item(),
            total: tape.value(self.total).item(),
            alpha: weights.alpha,
            beta: weights.beta,
        }
    }
}

/// Records the full objective for `batch` on `tape`.
///
/// In embedded mode the encoder embeds the targets, the decoder is
/// teacher-forced with those embeddings, and the encoder re-embeds the
/// outputs (or a free-running rollout, per `weights.cycle_pass`) for the
/// cycle term. `encoder_input` replaces the targets as
/// the encoder's input when given. `triples` index batch rows; without them
/// the contrastive term is zero. All three terms are computed even when
/// their weight is zero so that they can be logged; only weighted terms
/// reach the total. The agnostic model trains on MSE alone.
#[allow(clippy::too_many_arguments)]
pub fn batch_losses(
    tape: &mut Tape,
    model: &LoopModel,
    encoder: &SpeakerEncoder,
    batch: &SeqBatch,
    encoder_input: Option<&Tensor>,
    triples: Option<&[(usize, usize, usize)]>,
    weights: &LossWeights,
    bn: BnMode,
) -> Result<LossVars> {
    weights.validate()?;
    if let Some(x) = encoder_input {
        if x.shape() != batch.targets.shape() {
            return Err(Error::arg(
                "encoder input must match the target batch shape",
            ));
        }
    }
    if batch.dim() != model.config.d_o {
        return Err(Error::arg("batch feature dimension differs from the model"));
    }
    let model_params = model.params.bind(tape);
    let encoder_params = encoder.params.bind(tape);
    let (b, t, d) = (batch.batch_size(), batch.max_len(), batch.dim());
    let zero = |tape: &mut Tape| tape.leaf(Tensor::scalar(0.0));

    if model.mode() == ModelMode::Agnostic {
        let o = model.teacher_forced_tape(tape, &model_params, batch, None);
        let mse = mse_var(tape, o, batch);
        let (contrast, cycle) = (zero(tape), zero(tape));
        return Ok(LossVars {
            mse,
            contrast,
            cycle,
            total: mse,
            stats: Vec::new(),
            model_params,
            encoder_params,
        });
    }

    let y = tape.leaf(encoder_input.unwrap_or(&batch.targets).clone());
    let enc_y = encoder.forward_tape(tape, &encoder_params, y, &batch.lens, bn);
    let o = model.teacher_forced_tape(tape, &model_params, batch, Some(enc_y.z));
    let mse = mse_var(tape, o, batch);
    let contrast = match triples {
        Some(tr) if !tr.is_empty() => tape.contrastive(enc_y.z, tr, weights.margin),
        _ => zero(tape),
    };
    let cycled = match weights.cycle_pass {
        CyclePass::TeacherForced => o,
        CyclePass::FreeRunning => {
            model.free_running_tape(tape, &model_params, batch, Some(enc_y.z))
        }
    };
    let o3 = tape.reshape(cycled, &[b, t, d]);
    let enc_o = encoder.forward_tape(tape, &encoder_params, o3, &batch.lens, bn);
    let diff = tape.sub(enc_y.z, enc_o.z);
    let per = tape.row_sq_norm(diff);
    let cycle = tape.mean_all(per);

    let mut total = mse;
    if weights.alpha > 0.0 {
        let c = tape.scale(contrast, weights.alpha);
        total = tape.add(total, c);
    }
    if weights.beta > 0.0 {
        let c = tape.scale(cycle, weights.beta);
        total = tape.add(total, c);
    }
    Ok(LossVars {
        mse,
        contrast,
        cycle,
        total,
        stats: enc_y.stats,
        model_params,
        encoder_params,
    })
}

pub(crate) fn mse_var(tape: &mut Tape, o: Var, batch: &SeqBatch) -> Var {
    let sq = tape.seq_sq_err(o, &batch.targets, &batch.lens);
    let m = tape.mean_all(sq);
    tape.scale(m, 1.0 / batch.dim() as f64)
}
