//! Deterministic synthetic corpus.
//!
//! Every phoneme owns a smooth block of frames; every speaker colours those
//! blocks with a per-dimension gain and offset. Speaker identity is thus a
//! linear colouring of shared content, which a small encoder can learn and a
//! nearest-centroid rule can verify.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::frames_io::{read_frames_expecting, write_frames};
use super::manifest::{DatasetManifest, ManifestRecord, Split};
use super::{PhonemeSequence, VocoderFrameSequence, DEFAULT_FEATURE_DIM};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub phoneme_inventory: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// SD of the per-frame Gaussian jitter; zero disables it.
    pub jitter_sd: f64,
    /// Phoneme durations are drawn per phoneme from this inclusive range.
    pub duration_range: (usize, usize),
    /// Utterance lengths in phonemes, inclusive.
    pub phonemes_per_utterance: (usize, usize),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 12,
            utterances_per_speaker: 40,
            phoneme_inventory: 20,
            feature_dim: DEFAULT_FEATURE_DIM,
            seed: 0,
            jitter_sd: 0.05,
            duration_range: (8, 20),
            phonemes_per_utterance: (5, 15),
        }
    }
}

impl CorpusConfig {
    /// Shorter phoneme durations so desk-scale training fits in minutes.
    pub fn desk() -> Self {
        CorpusConfig {
            duration_range: (3, 8),
            ..CorpusConfig::default()
        }
    }
}

/// Per-dimension gain and offset of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerColoring {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

/// A generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub config: CorpusConfig,
    pub manifest: DatasetManifest,
    pub sequences: Vec<VocoderFrameSequence>,
    pub speakers: Vec<SpeakerColoring>,
    /// Base pattern of each phoneme, `duration × d_o`, row-major.
    pub patterns: Vec<(usize, Vec<f64>)>,
}

pub fn speaker_label(i: usize) -> String {
    format!("spk{i:02}")
}

impl ToyCorpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        if config.n_speakers < 2 {
            return Err(Error::arg("the toy corpus needs at least two speakers"));
        }
        if config.phoneme_inventory < 3 {
            return Err(Error::arg(
                "the phoneme inventory needs at least three symbols",
            ));
        }
        if config.utterances_per_speaker == 0 || config.feature_dim == 0 {
            return Err(Error::arg(
                "utterance count and feature dimension must be positive",
            ));
        }
        let (dmin, dmax) = config.duration_range;
        let (pmin, pmax) = config.phonemes_per_utterance;
        if dmin == 0 || dmin > dmax || pmin == 0 || pmin > pmax {
            return Err(Error::arg("invalid duration or utterance-length range"));
        }
        let d = config.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

        // each phoneme: linear glide between two random frames
        let patterns: Vec<(usize, Vec<f64>)> = (0..config.phoneme_inventory)
            .map(|_| {
                let dur = rng.random_range(dmin..=dmax);
                let start: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let end: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let mut block = Vec::with_capacity(dur * d);
                for t in 0..dur {
                    let a = if dur > 1 {
                        t as f64 / (dur - 1) as f64
                    } else {
                        0.0
                    };
                    block.extend(start.iter().zip(&end).map(|(s, e)| s + a * (e - s)));
                }
                (dur, block)
            })
            .collect();

        let speakers: Vec<SpeakerColoring> = (0..config.n_speakers)
            .map(|_| SpeakerColoring {
                gain: (0..d).map(|_| rng.random_range(0.5..=1.5)).collect(),
                offset: (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            })
            .collect();

        let n_test = if config.utterances_per_speaker >= 2 {
            (config.utterances_per_speaker / 10).max(1)
        } else {
            0
        };
        let mut records = Vec::new();
        let mut sequences = Vec::new();
        for (si, spk) in speakers.iter().enumerate() {
            for ui in 0..config.utterances_per_speaker {
                let n_ph = rng.random_range(pmin..=pmax);
                let ids: Vec<usize> = (0..n_ph)
                    .map(|_| rng.random_range(0..config.phoneme_inventory))
                    .collect();
                let seq = render(&patterns, spk, &ids, config.jitter_sd, &mut rng, d)?;
                let id = format!("{}_u{ui:03}", speaker_label(si));
                records.push(ManifestRecord {
                    frame_path: PathBuf::from("frames").join(format!("{id}.vlf")),
                    utterance_id: id,
                    speaker: speaker_label(si),
                    phoneme_ids: ids,
                    n_frames: seq.len(),
                    split: if ui >= config.utterances_per_speaker - n_test {
                        Split::Test
                    } else {
                        Split::Train
                    },
                });
                sequences.push(seq);
            }
        }
        Ok(ToyCorpus {
            config: config.clone(),
            manifest: DatasetManifest::new(records)?,
            sequences,
            speakers,
            patterns,
        })
    }

    /// Renders `ids` in the voice of speaker `speaker` without jitter.
    pub fn render_clean(&self, speaker: usize, ids: &[usize]) -> Result<VocoderFrameSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        render(
            &self.patterns,
            &self.speakers[speaker],
            ids,
            0.0,
            &mut rng,
            self.config.feature_dim,
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        for (r, s) in self.manifest.records.iter().zip(&self.sequences) {
            write_frames(s, &dir.join(&r.frame_path))?;
        }
        self.manifest.save(&dir.join(MANIFEST_FILE))
    }
}

fn render(
    patterns: &[(usize, Vec<f64>)],
    spk: &SpeakerColoring,
    ids: &[usize],
    jitter_sd: f64,
    rng: &mut ChaCha8Rng,
    d: usize,
) -> Result<VocoderFrameSequence> {
    let mut frames = Vec::new();
    for &p in ids {
        let (dur, block) = &patterns[p];
        for t in 0..*dur {
            for k in 0..d {
                let mut v = spk.gain[k] * block[t * d + k] + spk.offset[k];
                if jitter_sd > 0.0 {
                    let e: f64 = rng.sample(StandardNormal);
                    v += jitter_sd * e;
                }
                frames.push(v as f32);
            }
        }
    }
    VocoderFrameSequence::new(d, frames)
}

/// Generates the corpus and writes `manifest.tsv` plus `frames/*.vlf`
/// under `dir`.
pub fn generate_toy_corpus(config: &CorpusConfig, dir: &Path) -> Result<DatasetManifest> {
    let corpus = ToyCorpus::generate(config)?;
    corpus.write(dir)?;
    Ok(corpus.manifest)
}

/// A corpus loaded from disk: manifest plus every sequence in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub sequences: Vec<VocoderFrameSequence>,
    pub phonemes: Vec<PhonemeSequence>,
    pub feature_dim: usize,
    pub phoneme_inventory: usize,
}

impl Corpus {
    /// Loads `dir/manifest.tsv`. The phoneme inventory is one more than the
    /// largest id seen unless `inventory` is given.
    pub fn load(dir: &Path, inventory: Option<usize>) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
        if manifest.is_empty() {
            return Err(Error::Corpus(format!(
                "{} lists no utterances",
                dir.display()
            )));
        }
        let first = manifest.resolve(dir, &manifest.records[0]);
        let dim = super::frames_io::read_header(&first)?.0;
        let sequences = manifest
            .records
            .iter()
            .map(|r| read_frames_expecting(&manifest.resolve(dir, r), dim))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, sequences, inventory)
    }

    pub fn from_parts(
        manifest: DatasetManifest,
        sequences: Vec<VocoderFrameSequence>,
        inventory: Option<usize>,
    ) -> Result<Self> {
        let max_id = manifest
            .records
            .iter()
            .flat_map(|r| r.phoneme_ids.iter().copied())
            .max()
            .unwrap_or(0);
        let inv = inventory.unwrap_or(max_id + 1);
        let phonemes = manifest
            .records
            .iter()
            .map(|r| PhonemeSequence::new(r.phoneme_ids.clone(), inv))
            .collect::<Result<Vec<_>>>()?;
        let feature_dim = sequences.first().map(|s| s.dim()).unwrap_or(0);
        if sequences.iter().any(|s| s.dim() != feature_dim) {
            return Err(Error::Corpus(
                "sequences disagree on feature dimension".into(),
            ));
        }
        Ok(Corpus {
            manifest,
            sequences,
            phonemes,
            feature_dim,
            phoneme_inventory: inv,
        })
    }

    pub fn from_toy(toy: &ToyCorpus) -> Result<Self> {
        Self::from_parts(
            toy.manifest.clone(),
            toy.sequences.clone(),
            Some(toy.config.phoneme_inventory),
        )
    }

    pub fn speakers(&self) -> Vec<String> {
        self.manifest.speakers()
    }

    /// Indices of records matching `keep`.
    pub fn indices(&self, keep: impl Fn(&ManifestRecord) -> bool) -> Vec<usize> {
        (0..self.manifest.len())
            .filter(|&i| keep(&self.manifest.records[i]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_speakers: 4,
            utterances_per_speaker: 10,
            phoneme_inventory: 6,
            feature_dim: 8,
            seed: 5,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_byte_identical_for_equal_arguments() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_toy_corpus(&small(), a.path()).unwrap();
        generate_toy_corpus(&small(), b.path()).unwrap();
        let ma = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, fs::read(b.path().join(MANIFEST_FILE)).unwrap());
        let m = DatasetManifest::parse(std::str::from_utf8(&ma).unwrap()).unwrap();
        for r in &m.records {
            assert_eq!(
                fs::read(a.path().join(&r.frame_path)).unwrap(),
                fs::read(b.path().join(&r.frame_path)).unwrap()
            );
        }
    }

    #[test]
    fn loaded_corpus_matches_generated() {
        let dir = tempfile::tempdir().unwrap();
        let toy = ToyCorpus::generate(&small()).unwrap();
        toy.write(dir.path()).unwrap();
        let c = Corpus::load(dir.path(), Some(6)).unwrap();
        assert_eq!(c.sequences, toy.sequences);
        assert_eq!(c.feature_dim, 8);
    }

    #[test]
    fn shape_of_generated_data() {
        let toy = ToyCorpus::generate(&small()).unwrap();
        assert_eq!(toy.manifest.len(), 40);
        for (r, s) in toy.manifest.records.iter().zip(&toy.sequences) {
            assert!((5..=15).contains(&r.phoneme_ids.len()));
            let want: usize = r.phoneme_ids.iter().map(|&p| toy.patterns[p].0).sum();
            assert_eq!(s.len(), want);
            assert_eq!(r.n_frames, want);
        }
        for (dur, _) in &toy.patterns {
            assert!((8..=20).contains(dur));
        }
        for spk in &toy.speakers {
            assert!(spk.gain.iter().all(|g| (0.5..=1.5).contains(g)));
            assert!(spk.offset.iter().all(|o| (-1.0..=1.0).contains(o)));
        }
        let test_per_speaker = toy
            .manifest
            .records
            .iter()
            .filter(|r| r.speaker == "spk00" && r.split == Split::Test)
            .count();
        assert_eq!(test_per_speaker, 1);
    }

    #[test]
    fn different_speakers_same_text_differ() {
        let toy = ToyCorpus::generate(&small()).unwrap();
        let ids = [0, 1, 2];
        assert_ne!(
            toy.render_clean(0, &ids).unwrap(),
            toy.render_clean(1, &ids).unwrap()
        );
    }

    #[test]
    fn jitter_free_speakers_are_separable_by_nearest_centroid() {
        let cfg = CorpusConfig {
            jitter_sd: 0.0,
            n_speakers: 6,
            utterances_per_speaker: 12,
            ..small()
        };
        let toy = ToyCorpus::generate(&cfg).unwrap();
        let labels: Vec<usize> = toy
            .manifest
            .records
            .iter()
            .map(|r| r.speaker[3..].parse().unwrap())
            .collect();
        let means: Vec<Vec<f64>> = toy.sequences.iter().map(|s| s.mean_frame()).collect();
        let d = cfg.feature_dim;
        let mut centroids = vec![vec![0.0; d]; cfg.n_speakers];
        let mut counts = vec![0usize; cfg.n_speakers];
        for (i, m) in means.iter().enumerate() {
            if toy.manifest.records[i].split == Split::Train {
                for k in 0..d {
                    centroids[labels[i]][k] += m[k];
                }
                counts[labels[i]] += 1;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let mut correct = 0;
        for (i, m) in means.iter().enumerate() {
            let best = (0..cfg.n_speakers)
                .min_by(|&a, &b| {
                    let da: f64 = m
                        .iter()
                        .zip(&centroids[a])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    let db: f64 = m
                        .iter()
                        .zip(&centroids[b])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += usize::from(best == labels[i]);
        }
        assert_eq!(correct, means.len());
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(ToyCorpus::generate(&CorpusConfig {
            n_speakers: 1,
            ..small()
        })
        .is_err());
        assert!(ToyCorpus::generate(&CorpusConfig {
            phoneme_inventory: 2,
            ..small()
        })
        .is_err());
    }
}
