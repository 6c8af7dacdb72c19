//! The fitting network `N_s`: untranscribed frames in, unit-norm speaker
//! embedding out.
//!
//! The input is treated as a one-channel `m × d_o` image. Five same-padded
//! 3×3 convolutions, each followed by batch normalisation and ReLU, are
//! averaged over time; two fully connected layers and an affine map to
//! `d_z` follow, then L2 normalisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::VocoderFrameSequence;
use crate::nn::{glorot, Linear, ParamSet};
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_o: usize,
    pub n_conv_layers: usize,
    pub kernel: usize,
    pub channels: usize,
    pub fc_width: usize,
    pub fc_layers: usize,
    pub d_z: usize,
    /// Weight of the newest batch in the running statistics.
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_o: 63,
            n_conv_layers: 5,
            kernel: 3,
            channels: 32,
            fc_width: 256,
            fc_layers: 2,
            d_z: 256,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            channels: 4,
            fc_width: 32,
            d_z: 16,
            ..EncoderConfig::default()
        }
    }

    pub fn miniature() -> Self {
        EncoderConfig {
            d_o: 5,
            channels: 2,
            fc_width: 6,
            d_z: 4,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(
                "encoder kernel must be odd for same padding".into(),
            ));
        }
        for (name, v) in [
            ("d_o", self.d_o),
            ("n_conv_layers", self.n_conv_layers),
            ("channels", self.channels),
            ("fc_width", self.fc_width),
            ("d_z", self.d_z),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Batch-normalisation statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch.
    Train,
    /// Accumulated running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    z: Vec<f64>,
}

impl SpeakerEmbedding {
    /// Wraps a vector that must already have unit norm.
    pub fn new(z: Vec<f64>) -> Result<Self> {
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(Error::numeric(format!(
                "speaker embedding norm is {n}, expected 1"
            )));
        }
        Ok(SpeakerEmbedding { z })
    }

    /// Normalises `v` to unit length.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::numeric(
                "cannot normalise a zero or non-finite embedding",
            ));
        }
        Ok(SpeakerEmbedding {
            z: v.iter().map(|x| x / n).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    /// One value per line after a `# speaker embedding` header.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# speaker embedding\n");
        for v in &self.z {
            s.push_str(&format!("{v:e}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let z = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|_| Error::arg(format!("bad embedding value {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if z.is_empty() {
            return Err(Error::arg("embedding file holds no values"));
        }
        Self::new(z)
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Tape outputs of one encoder pass.
pub struct EncoderOutput {
    /// Unit-norm embeddings, `B × d_z`.
    pub z: Var,
    /// Affine output before normalisation, `B × d_z`.
    pub pre_norm: Var,
    /// Batch statistics per layer (training mode only).
    pub stats: Vec<BnStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEncoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub running: Vec<BnRunning>,
    convs: Vec<usize>,
    norms: Vec<(usize, usize)>,
    fcs: Vec<Linear>,
    proj: Linear,
}

impl SpeakerEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (c, k) = (config.channels, config.kernel);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut running = Vec::new();
        for i in 0..config.n_conv_layers {
            let cin = if i == 0 { 1 } else { c };
            let w = glorot(&mut rng, cin * k * k, c, 2f64.sqrt());
            convs.push(params.add(format!("n_s.conv{i}.weight"), w.reshaped(&[c, cin, k, k])));
            norms.push((
                params.add(
                    format!("n_s.bn{i}.gamma"),
                    Tensor::from_vec(&[c], vec![1.0; c]),
                ),
                params.add(format!("n_s.bn{i}.beta"), Tensor::zeros(&[c])),
            ));
            running.push(BnRunning {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            });
        }
        let mut fcs = Vec::new();
        let mut width = c * config.d_o;
        for i in 0..config.fc_layers {
            fcs.push(Linear::with_gain(
                &mut params,
                &mut rng,
                &format!("n_s.fc{i}"),
                width,
                config.fc_width,
                true,
                2f64.sqrt(),
            ));
            width = config.fc_width;
        }
        let proj = Linear::new(&mut params, &mut rng, "n_s.proj", width, config.d_z, true);
        Ok(SpeakerEncoder {
            config,
            params,
            running,
            convs,
            norms,
            fcs,
            proj,
        })
    }

    /// Encodes `x: B × T × d_o`; frames at or past `lens[b]` are masked
    /// to zero first.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        lens: &[usize],
        mode: BnMode,
    ) -> EncoderOutput {
        let s = tape.value(x).shape().to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        assert_eq!(d, self.config.d_o, "encoder input dimension mismatch");
        assert_eq!(lens.len(), b);
        let x = if lens.iter().all(|&l| l == t) {
            x
        } else {
            let mut m = vec![0.0; b * t * d];
            for (bi, &l) in lens.iter().enumerate() {
                m[bi * t * d..(bi * t + l) * d].fill(1.0);
            }
            let mask = tape.leaf(Tensor::from_vec(&[b, t, d], m));
            tape.mul(x, mask)
        };
        let mut h = tape.reshape(x, &[b, 1, t, d]);
        let mut stats = Vec::new();
        for (i, (&w, &(g, be))) in self.convs.iter().zip(&self.norms).enumerate() {
            let c = tape.conv2d(h, bound[w]);
            let running = match mode {
                BnMode::Train => None,
                BnMode::Eval => Some((&self.running[i].mean[..], &self.running[i].var[..])),
            };
            let (n, st) = tape.batch_norm(c, bound[g], bound[be], lens, running);
            stats.extend(st);
            h = tape.relu(n);
        }
        let mut f = tape.masked_time_mean(h, lens);
        for fc in &self.fcs {
            let y = fc.forward(tape, bound, f);
            f = tape.relu(y);
        }
        let pre_norm = self.proj.forward(tape, bound, f);
        let z = tape.l2_normalize(pre_norm);
        EncoderOutput { z, pre_norm, stats }
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BnStats]) {
        assert_eq!(stats.len(), self.running.len());
        let m = self.config.bn_momentum;
        for (r, s) in self.running.iter_mut().zip(stats) {
            for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                *a = (1.0 - m) * *a + m * b;
            }
            for (a, b) in r.var.iter_mut().zip(&s.var) {
                *a = (1.0 - m) * *a + m * b;
            }
        }
    }

    fn check_inputs(&self, ys: &[&VocoderFrameSequence]) -> Result<()> {
        if ys.is_empty() {
            return Err(Error::arg("no sequences to embed"));
        }
        for y in ys {
            if y.is_empty() {
                return Err(Error::arg("cannot embed an empty frame sequence"));
            }
            if y.dim() != self.config.d_o {
                return Err(Error::arg(format!(
                    "frames have dimension {}, encoder expects {}",
                    y.dim(),
                    self.config.d_o
                )));
            }
        }
        Ok(())
    }

    /// Runs a padded eval-mode batch and returns `(pre_norm rows, z rows)`.
    fn run_eval(&self, ys: &[&VocoderFrameSequence]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_inputs(ys)?;
        let d = self.config.d_o;
        let t = ys.iter().map(|y| y.len()).max().unwrap();
        let mut data = vec![0.0; ys.len() * t * d];
        for (bi, y) in ys.iter().enumerate() {
            for (dst, src) in data[bi * t * d..].iter_mut().zip(y.as_slice()) {
                *dst = *src as f64;
            }
        }
        let lens: Vec<usize> = ys.iter().map(|y| y.len()).collect();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.leaf(Tensor::from_vec(&[ys.len(), t, d], data));
        let out = self.forward_tape(&mut tape, &bound, x, &lens, BnMode::Eval);
        let dz = self.config.d_z;
        let rows = |v: Var| -> Vec<Vec<f64>> {
            tape.value(v)
                .data()
                .chunks(dz)
                .map(<[f64]>::to_vec)
                .collect()
        };
        Ok((rows(out.pre_norm), rows(out.z)))
    }

    pub fn embed(&self, y: &VocoderFrameSequence) -> Result<SpeakerEmbedding> {
        Ok(self.embed_batch(&[y])?.remove(0))
    }

    pub fn embed_batch(&self, ys: &[&VocoderFrameSequence]) -> Result<Vec<SpeakerEmbedding>> {
        let (pre, _) = self.run_eval(ys)?;
        pre.iter().map(|p| SpeakerEmbedding::normalize(p)).collect()
    }

    /// Pre-normalisation affine outputs (eval mode).
    pub fn activations(&self, ys: &[&VocoderFrameSequence]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run_eval(ys)?.0)
    }
}
