//! The shifting-buffer decoder.
//!
//! Each step reads attention parameters from the buffer, forms the context
//! vector, computes a new buffer entry `u_t` with `N_u`, pushes it, and
//! emits `o_t` from the new buffer with `N_o`. A speaker embedding `z`
//! enters through `F_u` (added to the context) and `F_o` (concatenated to
//! the buffer); the agnostic variant has neither.
//!
//! Every forward pass is recorded on a [`Tape`]. The single-sample
//! functions build a short tape per call; training uses the batched
//! [`LoopModel::teacher_forced_tape`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionMode, AttentionNet, AttentionState};
use crate::error::{Error, Result};
use crate::features::{PhonemeSequence, VocoderFrameSequence};
use crate::nn::{glorot, Linear, Mlp, ParamSet};
use crate::tape::{argmax, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_PRIMER_FRAMES: usize = 300;

/// `k` slots of width `d_b`, newest first, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer {
    k: usize,
    d_b: usize,
    slots: Vec<f64>,
}

impl MemoryBuffer {
    pub fn zeros(k: usize, d_b: usize) -> Self {
        assert!(
            k >= 1 && d_b >= 1,
            "buffer needs at least one slot of width 1"
        );
        MemoryBuffer {
            k,
            d_b,
            slots: vec![0.0; k * d_b],
        }
    }

    pub fn from_slots(k: usize, d_b: usize, slots: Vec<f64>) -> Result<Self> {
        if k == 0 || d_b == 0 || slots.len() != k * d_b {
            return Err(Error::arg(format!(
                "{} values do not fill {k} slots of width {d_b}",
                slots.len()
            )));
        }
        Ok(MemoryBuffer { k, d_b, slots })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn width(&self) -> usize {
        self.d_b
    }

    /// Slot `i`, zero-based; slot 0 is the newest.
    pub fn slot(&self, i: usize) -> &[f64] {
        &self.slots[i * self.d_b..(i + 1) * self.d_b]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.slots
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|v| v.is_finite())
    }
}

pub fn buffer_push(s: &MemoryBuffer, u: &[f64]) -> Result<MemoryBuffer> {
    if u.len() != s.d_b {
        return Err(Error::arg(format!(
            "pushing a vector of length {} into a buffer of width {}",
            u.len(),
            s.d_b
        )));
    }
    let mut slots = Vec::with_capacity(s.slots.len());
    slots.extend_from_slice(u);
    slots.extend_from_slice(&s.slots[..(s.k - 1) * s.d_b]);
    Ok(MemoryBuffer {
        k: s.k,
        d_b: s.d_b,
        slots,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopState {
    pub buffer: MemoryBuffer,
    pub attention: AttentionState,
    pub prev_output: Vec<f64>,
    pub t: usize,
    /// Steps whose attention fell back to a one-hot.
    pub fallbacks: usize,
}

impl LoopState {
    pub fn initial(config: &ModelConfig) -> Self {
        LoopState {
            buffer: MemoryBuffer::zeros(config.k, config.d_b),
            attention: AttentionState::zeros(config.n_components),
            prev_output: vec![0.0; config.d_o],
            t: 0,
            fallbacks: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Embedded,
    Agnostic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub phoneme_inventory: usize,
    pub k: usize,
    pub d_b: usize,
    pub d_p: usize,
    pub d_o: usize,
    pub d_z: usize,
    pub n_components: usize,
    /// Hidden width of `N_u`, `N_a` and `N_o`.
    pub hidden: usize,
    /// Multiplier on `exp(tanh(·))` mean shifts, in phonemes per frame.
    pub shift_scale: f64,
    pub mode: ModelMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            phoneme_inventory: 20,
            k: 100,
            d_b: 256,
            d_p: 128,
            d_o: 63,
            d_z: 256,
            n_components: 10,
            hidden: 256,
            shift_scale: 0.05,
            mode: ModelMode::Embedded,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            k: 10,
            d_b: 32,
            d_p: 16,
            d_z: 16,
            hidden: 32,
            ..ModelConfig::default()
        }
    }

    /// Smallest configuration used by gradient checks.
    pub fn miniature() -> Self {
        ModelConfig {
            phoneme_inventory: 4,
            k: 4,
            d_b: 8,
            d_p: 6,
            d_o: 5,
            d_z: 4,
            n_components: 2,
            hidden: 7,
            shift_scale: 0.5,
            mode: ModelMode::Embedded,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("phoneme_inventory", self.phoneme_inventory),
            ("k", self.k),
            ("d_b", self.d_b),
            ("d_p", self.d_p),
            ("d_o", self.d_o),
            ("d_z", self.d_z),
            ("n_components", self.n_components),
            ("hidden", self.hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.shift_scale > 0.0 && self.shift_scale.is_finite()) {
            return Err(Error::Config("shift_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Projections of `z` for one batch, computed once per sequence.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    pub into_u: Var,
    pub into_o: Var,
}

/// A padded batch of aligned phoneme strings and frame targets.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub phonemes: Vec<Vec<usize>>,
    /// `B × T × d_o`, zero past each sample's length.
    pub targets: Tensor,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    pub fn new(phonemes: Vec<Vec<usize>>, frames: &[&VocoderFrameSequence]) -> Result<Self> {
        if phonemes.len() != frames.len() || frames.is_empty() {
            return Err(Error::arg(
                "batch needs matching, non-empty phoneme and frame lists",
            ));
        }
        let d = frames[0].dim();
        let t = frames.iter().map(|f| f.len()).max().unwrap();
        let mut data = vec![0.0; frames.len() * t * d];
        for (b, f) in frames.iter().enumerate() {
            if f.dim() != d {
                return Err(Error::arg("frames in one batch differ in dimension"));
            }
            if f.is_empty() || phonemes[b].is_empty() {
                return Err(Error::arg("empty sample in batch"));
            }
            for (dst, src) in data[b * t * d..].iter_mut().zip(f.as_slice()) {
                *dst = *src as f64;
            }
        }
        Ok(SeqBatch {
            lens: frames.iter().map(|f| f.len()).collect(),
            phonemes,
            targets: Tensor::from_vec(&[frames.len(), t, d], data),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn max_len(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.targets.shape()[2]
    }

    /// `B × T` mask broadcast over the feature axis, 1 on valid frames.
    pub fn frame_mask(&self) -> Tensor {
        let (b, t, d) = (self.batch_size(), self.max_len(), self.dim());
        let mut m = vec![0.0; b * t * d];
        for (bi, &l) in self.lens.iter().enumerate() {
            m[bi * t * d..(bi * t + l) * d].fill(1.0);
        }
        Tensor::from_vec(&[b, t, d], m)
    }
}

/// Output of [`LoopModel::prime_and_generate`].
#[derive(Clone, Debug)]
pub struct PrimedGeneration {
    pub frames: VocoderFrameSequence,
    /// Buffer after the last teacher-forced primer step.
    pub primed_buffer: MemoryBuffer,
    /// Buffer fed to the first free-running step.
    pub first_step_buffer: MemoryBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    lut: usize,
    n_u: Mlp,
    n_a: AttentionNet,
    n_o: Mlp,
    f_u: Option<Linear>,
    f_o: Option<Linear>,
}

impl LoopModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = &config;
        let flat = c.k * c.d_b;
        let lut = params.add("lut_p", glorot(&mut rng, c.phoneme_inventory, c.d_p, 1.0));
        let n_a = AttentionNet::new(
            &mut params,
            &mut rng,
            flat,
            c.hidden,
            c.n_components,
            c.shift_scale,
        );
        let n_u = Mlp::new(
            &mut params,
            &mut rng,
            "n_u",
            flat + c.d_p + c.d_o,
            c.hidden,
            c.d_b,
            1.0,
        );
        let embedded = c.mode == ModelMode::Embedded;
        let o_in = flat + if embedded { c.d_b } else { 0 };
        let n_o = Mlp::new(&mut params, &mut rng, "n_o", o_in, c.hidden, c.d_o, 1.0);
        let (f_u, f_o) = if embedded {
            (
                Some(Linear::new(
                    &mut params,
                    &mut rng,
                    "f_u",
                    c.d_z,
                    c.d_p,
                    false,
                )),
                Some(Linear::new(
                    &mut params,
                    &mut rng,
                    "f_o",
                    c.d_z,
                    c.d_b,
                    false,
                )),
            )
        } else {
            (None, None)
        };
        Ok(LoopModel {
            config,
            params,
            lut,
            n_u,
            n_a,
            n_o,
            f_u,
            f_o,
        })
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    pub fn attention_net(&self) -> &AttentionNet {
        &self.n_a
    }

    fn check_z(&self, z: Option<&[f64]>) -> Result<()> {
        match (self.config.mode, z) {
            (ModelMode::Embedded, None) => Err(Error::Usage(
                "embedded model needs a speaker embedding".into(),
            )),
            (ModelMode::Agnostic, Some(_)) => Err(Error::Usage(
                "agnostic model takes no speaker embedding".into(),
            )),
            (ModelMode::Embedded, Some(z)) if z.len() != self.config.d_z => {
                Err(Error::arg(format!(
                    "embedding has {} entries, model expects {}",
                    z.len(),
                    self.config.d_z
                )))
            }
            _ => Ok(()),
        }
    }

    /// `E`: column `j` is the embedding of phoneme `s_j`.
    pub fn embed_phonemes(&self, s: &PhonemeSequence) -> Result<Tensor> {
        let (p, d) = (self.config.phoneme_inventory, self.config.d_p);
        if let Some(bad) = s.ids().iter().find(|&&i| i >= p) {
            return Err(Error::arg(format!(
                "phoneme id {bad} outside inventory of size {p}"
            )));
        }
        let lut = self.params.get(self.lut).data();
        let l = s.len();
        let mut e = vec![0.0; d * l];
        for (j, &id) in s.ids().iter().enumerate() {
            for r in 0..d {
                e[r * l + j] = lut[id * d + r];
            }
        }
        Ok(Tensor::from_vec(&[d, l], e))
    }

    /// `F_u z` and `F_o z` on the tape, for `z: B × d_z`.
    pub fn conditioning(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        z: Option<Var>,
    ) -> Option<Conditioning> {
        match (z, self.f_u, self.f_o) {
            (Some(z), Some(fu), Some(fo)) => Some(Conditioning {
                into_u: fu.forward(tape, bound, z),
                into_o: fo.forward(tape, bound, z),
            }),
            _ => None,
        }
    }

    /// Padded `B × L × d_p` phoneme embeddings.
    pub fn embed_batch(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        phonemes: &[Vec<usize>],
    ) -> (Var, Vec<usize>, usize) {
        let lmax = phonemes.iter().map(Vec::len).max().unwrap_or(1);
        let ids: Vec<Option<usize>> = phonemes
            .iter()
            .flat_map(|p| (0..lmax).map(move |j| p.get(j).copied()))
            .collect();
        let rows = tape.gather_rows(bound[self.lut], &ids);
        let emb = tape.reshape(rows, &[phonemes.len(), lmax, self.config.d_p]);
        (emb, phonemes.iter().map(Vec::len).collect(), lmax)
    }

    pub(crate) fn u_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        buf: Var,
        ctx: Var,
        cond: Option<&Conditioning>,
        prev: Var,
    ) -> Var {
        let ctx = match cond {
            Some(c) => tape.add(ctx, c.into_u),
            None => ctx,
        };
        let x = tape.concat_cols(&[buf, ctx, prev]);
        self.n_u.forward(tape, bound, x)
    }

    pub(crate) fn o_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        buf: Var,
        cond: Option<&Conditioning>,
    ) -> Var {
        let x = match cond {
            Some(c) => tape.concat_cols(&[buf, c.into_o]),
            None => buf,
        };
        self.n_o.forward(tape, bound, x)
    }

    /// One batched decoder step. Returns `(o_t, S_t, μ_t, priors)`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        buf: Var,
        means: Var,
        prev: Var,
        emb: Var,
        phon_lens: &[usize],
        lmax: usize,
        cond: Option<&Conditioning>,
        mode: AttentionMode,
    ) -> (Var, Var, Var, Var) {
        let (priors, shifts, log_vars) = self.n_a.forward(tape, bound, buf);
        let shift = match mode {
            AttentionMode::Train => shifts,
            AttentionMode::Inference => {
                let (b, m) = tape.value(priors).dims2();
                let choice: Vec<usize> = (0..b)
                    .map(|bi| argmax(&tape.value(priors).data()[bi * m..(bi + 1) * m]))
                    .collect();
                tape.select_shift(shifts, &choice)
            }
        };
        let new_means = tape.add(means, shift);
        let w = tape.gmm_weights(priors, new_means, log_vars, phon_lens, lmax);
        let ctx = tape.context(w, emb);
        let u = self.u_tape(tape, bound, buf, ctx, cond, prev);
        let flat = self.config.k * self.config.d_b;
        let new_buf = if self.config.k > 1 {
            let kept = tape.slice_cols(buf, 0, flat - self.config.d_b);
            tape.concat_cols(&[u, kept])
        } else {
            u
        };
        let o = self.o_tape(tape, bound, new_buf, cond);
        (o, new_buf, new_means, priors)
    }

    /// Teacher-forced rollout of a whole batch; returns `B × T × d_o`.
    ///
    /// Step `t` consumes target frame `t − 1` (zeros at `t = 0`).
    pub fn teacher_forced_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        batch: &SeqBatch,
        z: Option<Var>,
    ) -> Var {
        let (b, t_max, d) = (batch.batch_size(), batch.max_len(), batch.dim());
        assert_eq!(
            d, self.config.d_o,
            "target dimension differs from model d_o"
        );
        let cond = self.conditioning(tape, bound, z);
        let (emb, phon_lens, lmax) = self.embed_batch(tape, bound, &batch.phonemes);
        let mut buf = tape.leaf(Tensor::zeros(&[b, self.config.k * self.config.d_b]));
        let mut means = tape.leaf(Tensor::zeros(&[b, self.config.n_components]));
        let y = batch.targets.data();
        let mut outs = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut prev = vec![0.0; b * d];
            if t > 0 {
                for bi in 0..b {
                    let src = (bi * t_max + t - 1) * d;
                    prev[bi * d..(bi + 1) * d].copy_from_slice(&y[src..src + d]);
                }
            }
            let prev = tape.leaf(Tensor::from_vec(&[b, d], prev));
            let (o, nb, nm, _) = self.step_tape(
                tape,
                bound,
                buf,
                means,
                prev,
                emb,
                &phon_lens,
                lmax,
                cond.as_ref(),
                AttentionMode::Train,
            );
            outs.push(o);
            buf = nb;
            means = nm;
        }
        tape.stack_time(&outs)
    }

    /// Free-running rollout of `batch.max_len()` steps per row, each step
    /// fed the previous output and advanced with inference attention;
    /// returns `B × T × d_o`. The targets only set the shape.
    pub fn free_running_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        batch: &SeqBatch,
        z: Option<Var>,
    ) -> Var {
        let (b, t_max, d) = (batch.batch_size(), batch.max_len(), batch.dim());
        assert_eq!(
            d, self.config.d_o,
            "target dimension differs from model d_o"
        );
        let cond = self.conditioning(tape, bound, z);
        let (emb, phon_lens, lmax) = self.embed_batch(tape, bound, &batch.phonemes);
        let mut buf = tape.leaf(Tensor::zeros(&[b, self.config.k * self.config.d_b]));
        let mut means = tape.leaf(Tensor::zeros(&[b, self.config.n_components]));
        let mut prev = tape.leaf(Tensor::zeros(&[b, d]));
        let mut outs = Vec::with_capacity(t_max);
        for _ in 0..t_max {
            let (o, nb, nm, _) = self.step_tape(
                tape,
                bound,
                buf,
                means,
                prev,
                emb,
                &phon_lens,
                lmax,
                cond.as_ref(),
                AttentionMode::Inference,
            );
            outs.push(o);
            buf = nb;
            means = nm;
            prev = o;
        }
        tape.stack_time(&outs)
    }

    pub fn compute_u(
        &self,
        s_prev: &MemoryBuffer,
        c: &[f64],
        z: Option<&[f64]>,
        o_prev: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_z(z)?;
        self.check_buffer(s_prev)?;
        if c.len() != self.config.d_p || o_prev.len() != self.config.d_o {
            return Err(Error::arg(
                "context or previous output has the wrong length",
            ));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let zv = z.map(|z| tape.leaf(Tensor::from_vec(&[1, z.len()], z.to_vec())));
        let cond = self.conditioning(&mut tape, &bound, zv);
        let buf = tape.leaf(row(s_prev.as_slice()));
        let cv = tape.leaf(row(c));
        let pv = tape.leaf(row(o_prev));
        let u = self.u_tape(&mut tape, &bound, buf, cv, cond.as_ref(), pv);
        Ok(tape.value(u).data().to_vec())
    }

    pub fn compute_o(&self, s_t: &MemoryBuffer, z: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_z(z)?;
        self.check_buffer(s_t)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let zv = z.map(|z| tape.leaf(Tensor::from_vec(&[1, z.len()], z.to_vec())));
        let cond = self.conditioning(&mut tape, &bound, zv);
        let buf = tape.leaf(row(s_t.as_slice()));
        let o = self.o_tape(&mut tape, &bound, buf, cond.as_ref());
        Ok(tape.value(o).data().to_vec())
    }

    fn check_buffer(&self, s: &MemoryBuffer) -> Result<()> {
        if s.k() != self.config.k || s.width() != self.config.d_b {
            return Err(Error::arg(format!(
                "buffer is {}×{}, model expects {}×{}",
                s.k(),
                s.width(),
                self.config.k,
                self.config.d_b
            )));
        }
        Ok(())
    }

    /// One decoder step for a single sequence. With a teacher frame the
    /// step is teacher-forced (training attention); without, it feeds back
    /// its own previous output (inference attention).
    pub fn step(
        &self,
        state: &LoopState,
        e: &Tensor,
        z: Option<&[f64]>,
        teacher_frame: Option<&[f64]>,
    ) -> Result<(Vec<f64>, LoopState)> {
        self.check_z(z)?;
        self.check_buffer(&state.buffer)?;
        let (dp, l) = e.dims2();
        if dp != self.config.d_p || l == 0 {
            return Err(Error::arg("phoneme embedding matrix has the wrong shape"));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let zv = z.map(|z| tape.leaf(Tensor::from_vec(&[1, z.len()], z.to_vec())));
        let cond = self.conditioning(&mut tape, &bound, zv);
        let mut emb = vec![0.0; l * dp];
        for j in 0..l {
            for r in 0..dp {
                emb[j * dp + r] = e.data()[r * l + j];
            }
        }
        let emb = tape.leaf(Tensor::from_vec(&[1, l, dp], emb));
        let buf = tape.leaf(row(state.buffer.as_slice()));
        let means = tape.leaf(row(&state.attention.means));
        let prev_in = teacher_frame.unwrap_or(&state.prev_output);
        if prev_in.len() != self.config.d_o {
            return Err(Error::arg("teacher frame has the wrong length"));
        }
        let prev = tape.leaf(row(prev_in));
        let mode = if teacher_frame.is_some() {
            AttentionMode::Train
        } else {
            AttentionMode::Inference
        };
        let (o, nb, nm, _) = self.step_tape(
            &mut tape,
            &bound,
            buf,
            means,
            prev,
            emb,
            &[l],
            l,
            cond.as_ref(),
            mode,
        );
        let o = tape.value(o).data().to_vec();
        let buffer = MemoryBuffer::from_slots(
            self.config.k,
            self.config.d_b,
            tape.value(nb).data().to_vec(),
        )?;
        let means = tape.value(nm).data().to_vec();
        if !(o.iter().all(|v| v.is_finite())
            && buffer.all_finite()
            && means.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Numeric {
                step: Some(state.t),
                message: "non-finite decoder state".into(),
            });
        }
        let next = LoopState {
            buffer,
            attention: AttentionState { means },
            prev_output: match teacher_frame {
                Some(y) => y.to_vec(),
                None => o.clone(),
            },
            t: state.t + 1,
            fallbacks: state.fallbacks + tape.gmm_fallbacks(),
        };
        Ok((o, next))
    }

    /// Teacher-forced outputs `o_1 … o_l` for one sample.
    pub fn teacher_forced_pass(
        &self,
        s: &PhonemeSequence,
        y: &VocoderFrameSequence,
        z: Option<&[f64]>,
    ) -> Result<VocoderFrameSequence> {
        let (out, _) = self.teacher_force_from(LoopState::initial(&self.config), s, y, z)?;
        Ok(out)
    }

    fn teacher_force_from(
        &self,
        mut state: LoopState,
        s: &PhonemeSequence,
        y: &VocoderFrameSequence,
        z: Option<&[f64]>,
    ) -> Result<(VocoderFrameSequence, LoopState)> {
        if y.is_empty() {
            return Err(Error::arg("teacher forcing needs at least one frame"));
        }
        if y.dim() != self.config.d_o {
            return Err(Error::arg(format!(
                "frames have dimension {}, model expects {}",
                y.dim(),
                self.config.d_o
            )));
        }
        let e = self.embed_phonemes(s)?;
        let yf = y.to_f64();
        let d = self.config.d_o;
        let zero = vec![0.0; d];
        let mut out = Vec::with_capacity(yf.len());
        for t in 0..y.len() {
            let teacher = if t == 0 {
                &zero[..]
            } else {
                &yf[(t - 1) * d..t * d]
            };
            let (o, next) = self.step(&state, &e, z, Some(teacher))?;
            out.extend(o);
            state = next;
        }
        Ok((VocoderFrameSequence::from_f64(d, &out)?, state))
    }

    /// Autoregressive synthesis from a zero state.
    pub fn free_run(
        &self,
        s: &PhonemeSequence,
        z: Option<&[f64]>,
        max_frames: usize,
    ) -> Result<VocoderFrameSequence> {
        self.free_run_from(LoopState::initial(&self.config), s, z, max_frames)
            .map(|(f, _)| f)
    }

    fn free_run_from(
        &self,
        mut state: LoopState,
        s: &PhonemeSequence,
        z: Option<&[f64]>,
        max_frames: usize,
    ) -> Result<(VocoderFrameSequence, LoopState)> {
        if max_frames == 0 {
            return Err(Error::arg("max_frames must be at least 1"));
        }
        let e = self.embed_phonemes(s)?;
        let n = self.attention_net();
        let limit = s.len() as f64 + 1.0;
        let mut out = Vec::new();
        for _ in 0..max_frames {
            let params = crate::attention::attention_params(&state.buffer, n, &self.params)?;
            let dominant = argmax(&params.priors);
            let (o, next) = self.step(&state, &e, z, None)?;
            out.extend(o);
            state = next;
            if state.attention.means[dominant] > limit {
                break;
            }
        }
        Ok((
            VocoderFrameSequence::from_f64(self.config.d_o, &out)?,
            state,
        ))
    }

    /// Loads the buffer by teacher-forcing the first `primer_frames` of
    /// `primer_y`, then free-runs `new_s` with fresh attention and the
    /// primed buffer.
    pub fn prime_and_generate(
        &self,
        primer_y: &VocoderFrameSequence,
        primer_s: &PhonemeSequence,
        new_s: &PhonemeSequence,
        primer_frames: usize,
        max_frames: usize,
    ) -> Result<PrimedGeneration> {
        if self.config.mode != ModelMode::Agnostic {
            return Err(Error::Usage(
                "priming needs a speaker-agnostic model".into(),
            ));
        }
        if primer_frames > primer_y.len() {
            return Err(Error::arg(format!(
                "primer has {} frames, {primer_frames} requested",
                primer_y.len()
            )));
        }
        let mut state = LoopState::initial(&self.config);
        if primer_frames > 0 {
            let window = primer_y.window(0, primer_frames);
            let (_, primed) = self.teacher_force_from(state, primer_s, &window, None)?;
            state = primed;
            // the last primer frame has not been fed yet; it becomes o_{t-1}
            state.prev_output = window
                .frame(primer_frames - 1)
                .iter()
                .map(|v| *v as f64)
                .collect();
            state.attention = AttentionState::zeros(self.config.n_components);
        }
        let primed_buffer = state.buffer.clone();
        let first_step_buffer = state.buffer.clone();
        let (frames, _) = self.free_run_from(state, new_s, None, max_frames)?;
        Ok(PrimedGeneration {
            frames,
            primed_buffer,
            first_step_buffer,
        })
    }

    /// Zeroes `F_u` and `F_o`; used to compare against the agnostic model.
    pub fn zero_projections(&mut self) {
        for lin in [self.f_u, self.f_o].into_iter().flatten() {
            self.params.get_mut(lin.weight).data_mut().fill(0.0);
        }
    }
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_vec(&[1, v.len()], v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{advance_means, attention_params, context, position_weights};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::VecDeque;

    fn mini(mode: ModelMode) -> LoopModel {
        LoopModel::new(
            ModelConfig {
                mode,
                ..ModelConfig::miniature()
            },
            3,
        )
        .unwrap()
    }

    fn rand_frames(rng: &mut ChaCha8Rng, l: usize, d: usize) -> VocoderFrameSequence {
        VocoderFrameSequence::from_f64(
            d,
            &(0..l * d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn fifo_trace_and_eviction() {
        let mut s = MemoryBuffer::zeros(3, 2);
        let orig = s.clone();
        for i in 1..=3 {
            s = buffer_push(&s, &[i as f64, -(i as f64)]).unwrap();
        }
        assert_eq!(s.slot(0), &[3.0, -3.0]);
        assert_eq!(s.slot(1), &[2.0, -2.0]);
        assert_eq!(s.slot(2), &[1.0, -1.0]);
        assert_eq!(orig, MemoryBuffer::zeros(3, 2));
        assert!(buffer_push(&s, &[1.0]).is_err());
    }

    fn queue_oracle(k: usize, pushes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let mut s = MemoryBuffer::zeros(k, d);
        let mut q: VecDeque<Vec<f64>> = (0..k).map(|_| vec![0.0; d]).collect();
        for _ in 0..pushes {
            let u: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            s = buffer_push(&s, &u).unwrap();
            q.push_front(u);
            q.truncate(k);
        }
        for (i, want) in q.iter().enumerate() {
            assert_eq!(s.slot(i), &want[..]);
        }
    }

    #[test]
    fn buffer_matches_queue_oracle() {
        queue_oracle(7, 100, 1);
        queue_oracle(1, 10, 2);
    }

    #[test]
    fn embed_phonemes_is_a_row_lookup() {
        let m = mini(ModelMode::Embedded);
        let s = PhonemeSequence::new(vec![2, 0, 2, 3], 4).unwrap();
        let e = m.embed_phonemes(&s).unwrap();
        let lut = m.params.get(m.lut);
        for (j, &id) in s.ids().iter().enumerate() {
            for r in 0..m.config.d_p {
                assert_eq!(e.data()[r * 4 + j], lut.data()[id * m.config.d_p + r]);
            }
        }
        assert!(m
            .embed_phonemes(&PhonemeSequence::new(vec![9], 10).unwrap())
            .is_err());
    }

    #[test]
    fn mode_and_embedding_must_agree() {
        let m = mini(ModelMode::Agnostic);
        let buf = MemoryBuffer::zeros(4, 8);
        assert!(matches!(
            m.compute_o(&buf, Some(&[0.0; 4])),
            Err(Error::Usage(_))
        ));
        let e = mini(ModelMode::Embedded);
        assert!(matches!(e.compute_o(&buf, None), Err(Error::Usage(_))));
        assert_eq!(e.compute_o(&buf, Some(&[0.5; 4])).unwrap().len(), 5);
        assert_eq!(
            e.compute_u(&buf, &[0.1; 6], Some(&[0.5; 4]), &[0.0; 5])
                .unwrap()
                .len(),
            8
        );
    }

    /// Embedded model with both projections zeroed, sharing all other
    /// parameters with an agnostic model.
    fn zeroed_pair() -> (LoopModel, LoopModel) {
        let mut emb = mini(ModelMode::Embedded);
        emb.zero_projections();
        let mut agn = mini(ModelMode::Agnostic);
        for (i, name) in agn.params.names().to_vec().iter().enumerate() {
            let src = emb.params.index_of(name).unwrap();
            if name.starts_with("n_o.0.weight") {
                // agnostic N_o lacks the F_o rows at the end
                let rows = agn.params.get(i).shape()[0];
                let cols = agn.params.get(i).shape()[1];
                let data = emb.params.get(src).data()[..rows * cols].to_vec();
                *agn.params.get_mut(i) = Tensor::from_vec(&[rows, cols], data);
            } else {
                *agn.params.get_mut(i) = emb.params.get(src).clone();
            }
        }
        (emb, agn)
    }

    #[test]
    fn zero_projection_matches_agnostic() {
        let (emb, agn) = zeroed_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let buf =
            MemoryBuffer::from_slots(4, 8, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let z = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(
            emb.compute_o(&buf, Some(&z)).unwrap(),
            agn.compute_o(&buf, None).unwrap()
        );
        let c: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let o: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        assert_eq!(
            emb.compute_u(&buf, &c, Some(&z), &o).unwrap(),
            agn.compute_u(&buf, &c, None, &o).unwrap()
        );
        let s = PhonemeSequence::new(vec![1, 2, 3], 4).unwrap();
        let y = rand_frames(&mut rng, 6, 5);
        assert_eq!(
            emb.teacher_forced_pass(&s, &y, Some(&z)).unwrap(),
            agn.teacher_forced_pass(&s, &y, None).unwrap()
        );
    }

    #[test]
    fn step_matches_stage_by_stage_composition() {
        let m = mini(ModelMode::Embedded);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = PhonemeSequence::new(vec![0, 3, 1], 4).unwrap();
        let e = m.embed_phonemes(&s).unwrap();
        let z = [0.5, 0.5, -0.5, 0.5];
        let mut state = LoopState::initial(&m.config);
        state.buffer =
            MemoryBuffer::from_slots(4, 8, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        state.attention.means = vec![0.4, 1.1];
        let teacher: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let (o, next) = m.step(&state, &e, Some(&z), Some(&teacher)).unwrap();

        let p = attention_params(&state.buffer, m.attention_net(), &m.params).unwrap();
        let att = advance_means(&state.attention, &p, AttentionMode::Train);
        let w = position_weights(&att, &p, 3).unwrap().weights;
        let c = context(&w, &e).unwrap();
        let u = m.compute_u(&state.buffer, &c, Some(&z), &teacher).unwrap();
        let buf = buffer_push(&state.buffer, &u).unwrap();
        let o2 = m.compute_o(&buf, Some(&z)).unwrap();
        for (a, b) in o.iter().zip(&o2) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in next.buffer.as_slice().iter().zip(buf.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(next.t, 1);
        assert_eq!(next.prev_output, teacher);
    }

    #[test]
    fn zero_model_step_is_finite() {
        let mut m = mini(ModelMode::Agnostic);
        for v in m.params.values_mut() {
            v.data_mut().fill(0.0);
        }
        let s = PhonemeSequence::new(vec![0, 1], 4).unwrap();
        let e = m.embed_phonemes(&s).unwrap();
        let (o, st) = m
            .step(&LoopState::initial(&m.config), &e, None, None)
            .unwrap();
        assert_eq!(o, vec![0.0; 5]);
        assert_eq!(st.prev_output, o);
    }

    #[test]
    fn teacher_forced_length_and_causality() {
        let m = mini(ModelMode::Embedded);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = PhonemeSequence::new(vec![0, 1, 2], 4).unwrap();
        let z = [0.5; 4];
        let y = rand_frames(&mut rng, 7, 5);
        let out = m.teacher_forced_pass(&s, &y, Some(&z)).unwrap();
        assert_eq!(out.len(), 7);
        assert_eq!(out, m.teacher_forced_pass(&s, &y, Some(&z)).unwrap());
        for t in 0..7 {
            let mut yf = y.to_f64();
            for v in &mut yf[t * 5..(t + 1) * 5] {
                *v += 10.0;
            }
            let y2 = VocoderFrameSequence::from_f64(5, &yf).unwrap();
            let out2 = m.teacher_forced_pass(&s, &y2, Some(&z)).unwrap();
            for tp in 0..=t {
                assert_eq!(out.frame(tp), out2.frame(tp));
            }
            if t + 1 < 7 {
                assert_ne!(out.frame(t + 1), out2.frame(t + 1));
            }
        }
    }

    #[test]
    fn batched_tape_matches_single_sample_passes() {
        let m = mini(ModelMode::Embedded);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ya = rand_frames(&mut rng, 6, 5);
        let yb = rand_frames(&mut rng, 3, 5);
        let pa = vec![0, 1, 2, 3];
        let pb = vec![2, 1];
        let za = [0.5, -0.5, 0.5, 0.5];
        let zb = [0.1, 0.2, 0.3, 0.9];
        let batch = SeqBatch::new(vec![pa.clone(), pb.clone()], &[&ya, &yb]).unwrap();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let z = tape.leaf(Tensor::from_vec(&[2, 4], [za, zb].concat()));
        let out = m.teacher_forced_tape(&mut tape, &bound, &batch, Some(z));
        let out = tape.value(out);
        for (bi, (p, y, zz)) in [(pa, &ya, za), (pb, &yb, zb)].into_iter().enumerate() {
            let solo = m
                .teacher_forced_pass(&PhonemeSequence::new(p, 4).unwrap(), y, Some(&zz))
                .unwrap();
            for t in 0..y.len() {
                for k in 0..5 {
                    let a = out.data()[(bi * 6 + t) * 5 + k];
                    assert!((a - solo.frame(t)[k] as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn batched_free_running_tape_matches_stepwise_rollout() {
        let m = mini(ModelMode::Embedded);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ya = rand_frames(&mut rng, 6, 5);
        let yb = rand_frames(&mut rng, 3, 5);
        let pa = vec![0, 1, 2, 3];
        let pb = vec![2, 1];
        let za = [0.5, -0.5, 0.5, 0.5];
        let zb = [0.1, 0.2, 0.3, 0.9];
        let batch = SeqBatch::new(vec![pa.clone(), pb.clone()], &[&ya, &yb]).unwrap();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let z = tape.leaf(Tensor::from_vec(&[2, 4], [za, zb].concat()));
        let out = m.free_running_tape(&mut tape, &bound, &batch, Some(z));
        let out = tape.value(out);
        assert_eq!(out.shape(), &[2, 6, 5]);
        for (bi, (p, zz)) in [(pa, za), (pb, zb)].into_iter().enumerate() {
            let e = m
                .embed_phonemes(&PhonemeSequence::new(p, 4).unwrap())
                .unwrap();
            let mut st = LoopState::initial(&m.config);
            for t in 0..6 {
                let (o, next) = m.step(&st, &e, Some(&zz), None).unwrap();
                for k in 0..5 {
                    let a = out.data()[(bi * 6 + t) * 5 + k];
                    assert!(
                        (a - o[k]).abs() <= 1e-12 * o[k].abs().max(1.0),
                        "row {bi} t {t}"
                    );
                }
                st = next;
            }
        }
    }

    #[test]
    fn free_run_terminates_with_monotone_means() {
        let m = mini(ModelMode::Agnostic);
        let s = PhonemeSequence::new(vec![1, 2], 4).unwrap();
        let out = m.free_run(&s, None, 25).unwrap();
        assert!(!out.is_empty() && out.len() <= 25);
        let e = m.embed_phonemes(&s).unwrap();
        let mut st = LoopState::initial(&m.config);
        for _ in 0..10 {
            let (_, next) = m.step(&st, &e, None, None).unwrap();
            for (a, b) in next.attention.means.iter().zip(&st.attention.means) {
                assert!(a > b);
            }
            st = next;
        }
        assert!(m.free_run(&s, None, 0).is_err());
    }

    #[test]
    fn priming_keeps_buffer_and_degenerates_to_free_run() {
        let m = mini(ModelMode::Agnostic);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let primer = rand_frames(&mut rng, 9, 5);
        let ps = PhonemeSequence::new(vec![0, 1, 2], 4).unwrap();
        let ns = PhonemeSequence::new(vec![3, 2], 4).unwrap();
        let g = m.prime_and_generate(&primer, &ps, &ns, 8, 30).unwrap();
        assert_eq!(g.primed_buffer, g.first_step_buffer);
        assert_ne!(g.primed_buffer, MemoryBuffer::zeros(4, 8));
        let g0 = m.prime_and_generate(&primer, &ps, &ns, 0, 30).unwrap();
        assert_eq!(g0.frames, m.free_run(&ns, None, 30).unwrap());
        assert!(m.prime_and_generate(&primer, &ps, &ns, 10, 30).is_err());
        let e = mini(ModelMode::Embedded);
        assert!(matches!(
            e.prime_and_generate(&primer, &ps, &ns, 8, 30),
            Err(Error::Usage(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn buffer_is_last_k_pushes_reversed(k in 1usize..12, pushes in 0usize..40, seed in any::<u64>()) {
            queue_oracle(k, pushes, seed);
        }
    }
}
