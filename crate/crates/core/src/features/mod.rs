//! Vocoder-feature and phoneme sequences, their on-disk formats, the
//! augmentation applied during training, and the synthetic corpus.

mod corpus;
mod frames_io;
mod manifest;
mod triplets;

pub use corpus::{
    generate_toy_corpus, speaker_label, Corpus, CorpusConfig, SpeakerColoring, ToyCorpus,
    MANIFEST_FILE,
};
pub use frames_io::{read_frames, read_frames_expecting, read_header, write_frames, FRAME_MAGIC};
pub use manifest::{partition_by_length, DatasetManifest, ManifestRecord, Split};
pub use triplets::{make_triplet_batch, pair_batches, TripletBatchLayout};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Frame period of every sequence in this crate, in milliseconds.
pub const FRAME_PERIOD_MS: f32 = 5.0;

/// Feature dimension of WORLD vocoder frames.
pub const DEFAULT_FEATURE_DIM: usize = 63;

/// An `l × d_o` matrix of vocoder features, stored time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VocoderFrameSequence {
    frames: Vec<f32>,
    dim: usize,
    frame_period_ms: f32,
}

impl VocoderFrameSequence {
    pub fn new(dim: usize, frames: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("feature dimension must be at least 1"));
        }
        if frames.len() % dim != 0 {
            return Err(Error::arg(format!(
                "{} values do not form whole frames of dimension {dim}",
                frames.len()
            )));
        }
        Ok(VocoderFrameSequence {
            frames,
            dim,
            frame_period_ms: FRAME_PERIOD_MS,
        })
    }

    pub fn from_f64(dim: usize, frames: &[f64]) -> Result<Self> {
        Self::new(dim, frames.iter().map(|v| *v as f32).collect())
    }

    pub(crate) fn with_period(mut self, frame_period_ms: f32) -> Self {
        self.frame_period_ms = frame_period_ms;
        self
    }

    /// Number of frames `l`.
    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Feature dimension `d_o`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_period_ms(&self) -> f32 {
        self.frame_period_ms
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.frames
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.frames.iter().map(|v| *v as f64).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.frames.iter().all(|v| v.is_finite())
    }

    /// Frames `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Self {
        VocoderFrameSequence {
            frames: self.frames[start * self.dim..end * self.dim].to_vec(),
            dim: self.dim,
            frame_period_ms: self.frame_period_ms,
        }
    }

    /// Appends the frames of `other` (same dimension).
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::arg(format!(
                "cannot join sequences of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        let mut frames = self.frames.clone();
        frames.extend_from_slice(&other.frames);
        Ok(VocoderFrameSequence {
            frames,
            dim: self.dim,
            frame_period_ms: self.frame_period_ms,
        })
    }

    /// Per-dimension mean over time.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for t in 0..self.len() {
            for (acc, v) in m.iter_mut().zip(self.frame(t)) {
                *acc += *v as f64;
            }
        }
        let l = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= l);
        m
    }
}

/// A non-empty sequence of phoneme ids over an inventory of size `P`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    ids: Vec<usize>,
    inventory: usize,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, inventory: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::arg("phoneme sequence is empty"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= inventory) {
            return Err(Error::arg(format!(
                "phoneme id {bad} outside inventory of size {inventory}"
            )));
        }
        Ok(PhonemeSequence { ids, inventory })
    }

    /// Parses comma-separated integer ids, e.g. `"3,1,4"`.
    pub fn parse(text: &str, inventory: usize) -> Result<Self> {
        let ids = text
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::arg(format!("bad phoneme id {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, inventory)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn inventory(&self) -> usize {
        self.inventory
    }

    pub fn concat(&self, other: &Self) -> Self {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        PhonemeSequence {
            ids,
            inventory: self.inventory.max(other.inventory),
        }
    }

    pub fn to_text(&self) -> String {
        self.ids
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Readable phoneme names. The file lists one `name id` pair per line;
/// `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PhonemeMap {
    names: std::collections::BTreeMap<String, usize>,
}

impl PhonemeMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = std::collections::BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(name), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::arg(format!(
                    "phoneme map line {}: expected `name id`",
                    n + 1
                )));
            };
            let id = id
                .parse::<usize>()
                .map_err(|_| Error::arg(format!("phoneme map line {}: bad id {id:?}", n + 1)))?;
            if name.parse::<usize>().is_ok() || name.contains(',') {
                return Err(Error::arg(format!(
                    "phoneme map line {}: name {name:?} is not a word",
                    n + 1
                )));
            }
            if names.insert(name.to_string(), id).is_some() {
                return Err(Error::arg(format!(
                    "phoneme map line {}: duplicate name {name:?}",
                    n + 1
                )));
            }
        }
        Ok(PhonemeMap { names })
    }

    /// Parses a comma-separated list whose entries are names or integer ids.
    pub fn sequence(&self, text: &str, inventory: usize) -> Result<PhonemeSequence> {
        let ids = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s.parse::<usize>() {
                Ok(i) => Ok(i),
                Err(_) => self
                    .names
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::arg(format!("unknown phoneme {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        PhonemeSequence::new(ids, inventory)
    }
}

/// Adds i.i.d. Gaussian noise with standard deviation `sd`.
///
/// The perturbation is `sd · ε` with `ε` drawn from a standard normal stream
/// seeded by `seed`, so the same seed yields proportional perturbations at
/// different noise levels.
pub fn add_noise(seq: &VocoderFrameSequence, sd: f64, seed: u64) -> Result<VocoderFrameSequence> {
    if !(sd >= 0.0) || !sd.is_finite() {
        return Err(Error::arg(format!(
            "noise SD must be finite and non-negative, got {sd}"
        )));
    }
    if sd == 0.0 {
        return Ok(seq.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = seq
        .frames
        .iter()
        .map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            (*v as f64 + sd * e) as f32
        })
        .collect();
    Ok(VocoderFrameSequence {
        frames,
        dim: seq.dim,
        frame_period_ms: seq.frame_period_ms,
    })
}

/// Start offset that [`crop`] uses for a sequence of `len` frames.
pub fn crop_offset(len: usize, max_len: usize, seed: u64) -> usize {
    if len <= max_len {
        return 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.random_range(0..=len - max_len)
}

/// Returns a random contiguous window of at most `max_len` frames.
pub fn crop(seq: &VocoderFrameSequence, max_len: usize, seed: u64) -> Result<VocoderFrameSequence> {
    if max_len == 0 {
        return Err(Error::arg("crop length must be at least 1"));
    }
    let l = seq.len();
    if l <= max_len {
        return Ok(seq.clone());
    }
    let start = crop_offset(l, max_len, seed);
    Ok(seq.window(start, start + max_len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phoneme_map_accepts_names_and_ids() {
        let m = PhonemeMap::parse("# toy names\naa 0\nbe 3 # vowel\n").unwrap();
        assert_eq!(m.sequence("aa, 2,be", 4).unwrap().ids(), &[0, 2, 3]);
        assert!(m.sequence("zz", 4).is_err());
        assert!(m.sequence("be", 3).is_err());
        assert!(PhonemeMap::parse("aa 0\naa 1").is_err());
        assert!(PhonemeMap::parse("aa").is_err());
        assert!(PhonemeMap::parse("7 1").is_err());
    }
    use proptest::prelude::*;

    fn ramp(l: usize, d: usize) -> VocoderFrameSequence {
        VocoderFrameSequence::new(d, (0..l * d).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = ramp(5, 3);
        assert_eq!(add_noise(&s, 0.0, 9).unwrap(), s);
    }

    #[test]
    fn noise_is_deterministic_and_leaves_input_alone() {
        let s = ramp(5, 3);
        let before = s.clone();
        let a = add_noise(&s, 1.5, 42).unwrap();
        let b = add_noise(&s, 1.5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, before);
        assert_ne!(a, s);
    }

    #[test]
    fn negative_noise_rejected() {
        assert!(matches!(
            add_noise(&ramp(2, 2), -1.0, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn noise_statistics_at_sd_four() {
        let n = 1_000_000;
        let s = VocoderFrameSequence::new(100, vec![0.0; n]).unwrap();
        let noisy = add_noise(&s, 4.0, 7).unwrap();
        let vals: Vec<f64> = noisy.as_slice().iter().map(|v| *v as f64).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * 4.0 / 1e3, "mean {mean}");
        assert!((var.sqrt() - 4.0).abs() < 0.04, "sd {}", var.sqrt());
    }

    #[test]
    fn larger_sd_gives_larger_perturbation() {
        let s = VocoderFrameSequence::new(10, vec![0.5; 100_000]).unwrap();
        let msp = |sd: f64| {
            let n = add_noise(&s, sd, 3).unwrap();
            n.as_slice()
                .iter()
                .zip(s.as_slice())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
        };
        assert!(msp(1.0) < msp(1.1));
        assert!(msp(0.5) < msp(4.0));
    }

    #[test]
    fn crop_short_sequence_is_unchanged() {
        let s = ramp(50, 2);
        assert_eq!(crop(&s, 100, 1).unwrap(), s);
    }

    #[test]
    fn crop_long_sequence_has_exact_length_and_reproducible_offset() {
        let s = ramp(150, 2);
        let a = crop(&s, 100, 11).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, crop(&s, 100, 11).unwrap());
        let off = crop_offset(150, 100, 11);
        assert!(off <= 50);
        assert_eq!(a.frame(0), s.frame(off));
    }

    #[test]
    fn crop_rejects_zero_length() {
        assert!(crop(&ramp(3, 1), 0, 0).is_err());
    }

    #[test]
    fn phoneme_parse_and_validation() {
        let p = PhonemeSequence::parse("3, 1,4", 5).unwrap();
        assert_eq!(p.ids(), &[3, 1, 4]);
        assert_eq!(p.to_text(), "3,1,4");
        assert!(PhonemeSequence::parse("3,9", 5).is_err());
        assert!(PhonemeSequence::parse("", 5).is_err());
        assert!(PhonemeSequence::parse("a", 5).is_err());
    }

    proptest! {
        #[test]
        fn crop_is_a_contiguous_window(l in 1usize..300, max_len in 1usize..200, seed in any::<u64>()) {
            let s = ramp(l, 3);
            let c = crop(&s, max_len, seed).unwrap();
            prop_assert_eq!(c.dim(), 3);
            prop_assert_eq!(c.len(), l.min(max_len));
            let start = crop_offset(l, max_len, seed);
            for t in 0..c.len() {
                prop_assert_eq!(c.frame(t), s.frame(start + t));
            }
        }
    }
}
