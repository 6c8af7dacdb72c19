//! Objective evaluation: MCD after DTW alignment, a speaker-identification
//! network with the encoder's architecture, top-1 accuracy, same/not-same
//! verification by cosine distance with ROC and AUC, and quality-based
//! speaker stratification.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{BnMode, EncoderConfig, SpeakerEncoder};
use crate::error::{Error, Result};
use crate::features::{crop, VocoderFrameSequence};
use crate::nn::{Linear, ParamSet};
use crate::seed::derive_seed;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{round_tensor, OptimizerConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq)]
pub struct DtwResult {
    /// Zero-based `(i, j)` pairs from `(0, 0)` to `(l_a − 1, l_b − 1)`.
    pub path: Vec<(usize, usize)>,
    /// Sum of Euclidean frame distances along the path.
    pub cost: f64,
}

fn check_pair(a: &VocoderFrameSequence, b: &VocoderFrameSequence, dims: &[usize]) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::arg(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("DTW needs non-empty sequences"));
    }
    if dims.is_empty() || dims.iter().any(|&d| d >= a.dim()) {
        return Err(Error::arg(
            "dimension subset must be non-empty and within the feature dimension",
        ));
    }
    Ok(())
}

fn frame_dist(a: &[f32], b: &[f32], dims: &[usize]) -> f64 {
    dims.iter()
        .map(|&d| {
            let x = a[d] as f64 - b[d] as f64;
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Minimal-cost monotone alignment with steps (1,1), (1,0), (0,1) over all
/// feature dimensions.
pub fn dtw_align(a: &VocoderFrameSequence, b: &VocoderFrameSequence) -> Result<DtwResult> {
    let dims: Vec<usize> = (0..a.dim()).collect();
    dtw_align_dims(a, b, &dims)
}

/// [`dtw_align`] with distances restricted to `dims`. Among equal-cost
/// predecessors the diagonal wins, then the step that advanced `a`.
pub fn dtw_align_dims(
    a: &VocoderFrameSequence,
    b: &VocoderFrameSequence,
    dims: &[usize],
) -> Result<DtwResult> {
    check_pair(a, b, dims)?;
    let (la, lb) = (a.len(), b.len());
    let mut acc = vec![f64::INFINITY; la * lb];
    let at = |i: usize, j: usize| i * lb + j;
    for i in 0..la {
        for j in 0..lb {
            let d = frame_dist(a.frame(i), b.frame(j), dims);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[at(i - 1, j - 1)]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 {
                    acc[at(i - 1, j)]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    acc[at(i, j - 1)]
                } else {
                    f64::INFINITY
                };
                diag.min(up).min(left)
            };
            acc[at(i, j)] = best + d;
        }
    }
    let mut path = vec![(la - 1, lb - 1)];
    let (mut i, mut j) = (la - 1, lb - 1);
    while (i, j) != (0, 0) {
        let diag = if i > 0 && j > 0 {
            acc[at(i - 1, j - 1)]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 {
            acc[at(i - 1, j)]
        } else {
            f64::INFINITY
        };
        let left = if j > 0 {
            acc[at(i, j - 1)]
        } else {
            f64::INFINITY
        };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        path,
        cost: acc[at(la - 1, lb - 1)],
    })
}

/// `(10 / ln 10) · mean over aligned pairs of √(2 Σ_{d∈dims} (a_d − b_d)²)`.
pub fn mcd_dtw(a: &VocoderFrameSequence, b: &VocoderFrameSequence, dims: &[usize]) -> Result<f64> {
    let r = dtw_align_dims(a, b, dims)?;
    let k = 10.0 / std::f64::consts::LN_10;
    let sum: f64 = r
        .path
        .iter()
        .map(|&(i, j)| (2.0f64).sqrt() * frame_dist(a.frame(i), b.frame(j), dims))
        .sum();
    Ok(k * sum / r.path.len() as f64)
}

/// `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(
            "cosine distance of vectors with different lengths",
        ));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::numeric(
            "cosine distance of a zero or non-finite vector",
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(false-positive rate, true-positive rate)` with increasing
    /// acceptance threshold, from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            let _ = writeln!(s, "{f},{t}");
        }
        s
    }
}

/// ROC of "same speaker" decisions `distance ≤ threshold`. The AUC is the
/// probability that a random same pair has a smaller distance than a
/// random not-same pair, ties counting one half.
pub fn verification_auc(same: &[f64], notsame: &[f64]) -> Result<RocCurve> {
    if same.is_empty() || notsame.is_empty() {
        return Err(Error::arg(
            "verification needs both same and not-same pairs",
        ));
    }
    if same.iter().chain(notsame).any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite verification score"));
    }
    let mut all: Vec<(f64, bool)> = same
        .iter()
        .map(|&v| (v, true))
        .chain(notsame.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (np, nn) = (same.len() as f64, notsame.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < all.len() {
        // all pairs sharing one score move together
        let (mut dtp, mut dfp) = (0usize, 0usize);
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        // not-same pairs at this score beat every same pair already accepted
        // and tie with the same pairs at this score
        auc += dfp as f64 * (tp as f64 + 0.5 * dtp as f64);
        tp += dtp;
        fp += dfp;
        points.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(RocCurve {
        points,
        auc: auc / (np * nn),
    })
}

/// Fraction of `predicted[i] == labels[i]`.
pub fn top1_accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::arg(
            "accuracy needs equal, non-empty prediction and label lists",
        ));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Speakers whose mean distance to other speakers' samples exceeds
/// `threshold` times the mean distance among their own samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Stratification {
    pub kept: Vec<String>,
    /// `(speaker, inter / intra)` for every speaker with enough samples.
    pub ratios: Vec<(String, f64)>,
    /// Speakers skipped for having fewer than two samples.
    pub skipped: Vec<String>,
}

pub fn quality_stratify(
    speakers: &[(String, Vec<Vec<f64>>)],
    threshold: f64,
) -> Result<Stratification> {
    if !(threshold >= 0.0) {
        return Err(Error::arg("stratification threshold must be non-negative"));
    }
    if speakers.len() < 2 {
        return Err(Error::arg("stratification needs at least two speakers"));
    }
    let mut out = Stratification {
        kept: Vec::new(),
        ratios: Vec::new(),
        skipped: Vec::new(),
    };
    for (si, (name, acts)) in speakers.iter().enumerate() {
        if acts.len() < 2 {
            out.skipped.push(name.clone());
            continue;
        }
        let mut intra = (0.0, 0usize);
        for i in 0..acts.len() {
            for j in i + 1..acts.len() {
                intra.0 += cosine_distance(&acts[i], &acts[j])?;
                intra.1 += 1;
            }
        }
        let mut inter = (0.0, 0usize);
        for (oi, (_, others)) in speakers.iter().enumerate() {
            if oi == si {
                continue;
            }
            for a in acts {
                for o in others {
                    inter.0 += cosine_distance(a, o)?;
                    inter.1 += 1;
                }
            }
        }
        let intra = intra.0 / intra.1 as f64;
        let inter = inter.0 / inter.1.max(1) as f64;
        let ratio = if intra > 0.0 {
            inter / intra
        } else {
            f64::INFINITY
        };
        out.ratios.push((name.clone(), ratio));
        if ratio > threshold {
            out.kept.push(name.clone());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training samples are cropped to random windows of this length.
    pub max_len: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 20,
            batch_size: 16,
            max_len: 100,
            optimizer: OptimizerConfig {
                lr: 3e-3,
                ..OptimizerConfig::default()
            },
            seed: 0,
        }
    }
}

/// Speaker-identification network: an encoder-shaped trunk and an affine
/// head over its `d_z` pre-normalisation output.
#[derive(Clone, Debug)]
pub struct SpeakerClassifier {
    pub trunk: SpeakerEncoder,
    pub head_params: ParamSet,
    head: Linear,
    pub classes: Vec<String>,
}

impl SpeakerClassifier {
    pub fn new(config: EncoderConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config(
                "speaker identification needs at least two classes".into(),
            ));
        }
        let mut trunk = SpeakerEncoder::new(config, derive_seed(seed, &[1]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
        let mut head_params = ParamSet::new();
        let head = Linear::new(
            &mut head_params,
            &mut rng,
            "head",
            trunk.config.d_z,
            classes.len(),
            true,
        );
        trunk.params.values_mut().iter_mut().for_each(round_tensor);
        head_params.values_mut().iter_mut().for_each(round_tensor);
        Ok(SpeakerClassifier {
            trunk,
            head_params,
            head,
            classes,
        })
    }

    /// Trains on `(frames, class)` samples with cross-entropy.
    pub fn train(
        config: EncoderConfig,
        classes: Vec<String>,
        samples: &[(&VocoderFrameSequence, usize)],
        cfg: &ClassifierConfig,
    ) -> Result<Self> {
        let mut c = Self::new(config, classes, cfg.seed)?;
        if samples.iter().any(|s| s.1 >= c.classes.len()) {
            return Err(Error::arg("sample label outside the class list"));
        }
        let mut present: Vec<usize> = samples.iter().map(|s| s.1).collect();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return Err(Error::Config(
                "training samples cover fewer than two classes".into(),
            ));
        }
        let shapes: Vec<Vec<usize>> = c
            .trunk
            .params
            .values()
            .iter()
            .chain(c.head_params.values())
            .map(|t| t.shape().to_vec())
            .collect();
        let mut opt = OptimizerState::new(shapes.iter().map(|s| s.as_slice()));
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, epoch as u64]));
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(2)) {
                if chunk.len() < 2 {
                    continue;
                }
                let ys = chunk
                    .iter()
                    .map(|&i| {
                        crop(
                            samples[i].0,
                            cfg.max_len,
                            derive_seed(cfg.seed, &[4, epoch as u64, i as u64]),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].1).collect();
                let refs: Vec<&VocoderFrameSequence> = ys.iter().collect();
                let (x, lens) = pad(&refs, c.trunk.config.d_o)?;
                let mut tape = Tape::new();
                let tb = c.trunk.params.bind(&mut tape);
                let hb = c.head_params.bind(&mut tape);
                let xv = tape.leaf(x);
                let out = c
                    .trunk
                    .forward_tape(&mut tape, &tb, xv, &lens, BnMode::Train);
                let logits = c.head.forward(&mut tape, &hb, out.pre_norm);
                let loss = tape.cross_entropy(logits, &labels);
                if !tape.value(loss).item().is_finite() {
                    return Err(Error::numeric("non-finite classifier loss"));
                }
                let g = tape.backward(loss);
                let grads: Vec<Option<Tensor>> = tb
                    .iter()
                    .chain(&hb)
                    .zip(&shapes)
                    .map(|(&v, s)| Some(g.get_or_zeros(v, s)))
                    .collect();
                let mut params: Vec<&mut Tensor> = c
                    .trunk
                    .params
                    .values_mut()
                    .iter_mut()
                    .chain(c.head_params.values_mut().iter_mut())
                    .collect();
                opt.apply(&cfg.optimizer, &mut params, &grads)?;
                c.trunk.update_running(&out.stats);
                for r in &mut c.trunk.running {
                    r.mean
                        .iter_mut()
                        .chain(r.var.iter_mut())
                        .for_each(|v| *v = *v as f32 as f64);
                }
            }
        }
        Ok(c)
    }

    fn forward(&self, ys: &[&VocoderFrameSequence]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut acts = Vec::new();
        let mut logits = Vec::new();
        for chunk in ys.chunks(32) {
            let (x, lens) = pad(chunk, self.trunk.config.d_o)?;
            let mut tape = Tape::new();
            let tb = self.trunk.params.bind(&mut tape);
            let hb = self.head_params.bind(&mut tape);
            let xv = tape.leaf(x);
            let out = self
                .trunk
                .forward_tape(&mut tape, &tb, xv, &lens, BnMode::Eval);
            let l = self.head.forward(&mut tape, &hb, out.pre_norm);
            let dz = self.trunk.config.d_z;
            let nc = self.classes.len();
            acts.extend(
                tape.value(out.pre_norm)
                    .data()
                    .chunks(dz)
                    .map(<[f64]>::to_vec),
            );
            logits.extend(tape.value(l).data().chunks(nc).map(<[f64]>::to_vec));
        }
        Ok((acts, logits))
    }

    /// Activations of the last layer before the classification head.
    pub fn activations(&self, ys: &[&VocoderFrameSequence]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(ys)?.0)
    }

    pub fn logits(&self, ys: &[&VocoderFrameSequence]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(ys)?.1)
    }

    pub fn predict(&self, ys: &[&VocoderFrameSequence]) -> Result<Vec<usize>> {
        Ok(self
            .logits(ys)?
            .iter()
            .map(|row| crate::tape::argmax(row))
            .collect())
    }

    pub fn top1_accuracy(&self, samples: &[(&VocoderFrameSequence, usize)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::arg("accuracy of an empty sample set"));
        }
        let ys: Vec<&VocoderFrameSequence> = samples.iter().map(|s| s.0).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.1).collect();
        top1_accuracy(&self.predict(&ys)?, &labels)
    }
}

fn pad(ys: &[&VocoderFrameSequence], d: usize) -> Result<(Tensor, Vec<usize>)> {
    if ys.is_empty() || ys.iter().any(|y| y.is_empty() || y.dim() != d) {
        return Err(Error::arg(format!(
            "expected non-empty sequences of dimension {d}"
        )));
    }
    let t = ys.iter().map(|y| y.len()).max().unwrap();
    let mut data = vec![0.0; ys.len() * t * d];
    for (b, y) in ys.iter().enumerate() {
        for (dst, src) in data[b * t * d..].iter_mut().zip(y.as_slice()) {
            *dst = *src as f64;
        }
    }
    Ok((
        Tensor::from_vec(&[ys.len(), t, d], data),
        ys.iter().map(|y| y.len()).collect(),
    ))
}

/// Same/not-same distances for generated samples.
///
/// Each generated sample `g` of speaker `s` is paired with the real samples
/// of `s` listed in `same_refs` and with real samples of other speakers in
/// `other_refs`. Activations come from `embed`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairScores {
    pub same: Vec<f64>,
    pub notsame: Vec<f64>,
}

impl PairScores {
    pub fn add(
        &mut self,
        generated: &[f64],
        same_refs: &[Vec<f64>],
        other_refs: &[Vec<f64>],
    ) -> Result<()> {
        for r in same_refs {
            self.same.push(cosine_distance(generated, r)?);
        }
        for r in other_refs {
            self.notsame.push(cosine_distance(generated, r)?);
        }
        Ok(())
    }

    pub fn roc(&self) -> Result<RocCurve> {
        verification_auc(&self.same, &self.notsame)
    }
}

/// Line-oriented `name value` report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub metrics: Vec<(String, f64)>,
}

impl Report {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.push((name.into(), value));
    }

    pub fn to_text(&self) -> String {
        self.metrics
            .iter()
            .map(|(k, v)| format!("{k} {v}\n"))
            .collect()
    }
}
