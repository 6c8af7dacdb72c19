//! Speaker-fitting benchmarks over a corpus: a speaker-identification
//! network trained on ground truth, identification of free-running output,
//! same/not-same verification of output fitted to held-out speakers, and
//! the same verification for buffer priming.
//!
//! Every speaker needs at least two test-split utterances. The fitting
//! sample for test utterance `k` is test utterance `k + 1`, so output is
//! never conditioned on the recording whose text it speaks.

use crate::encoder::SpeakerEncoder;
use crate::error::{Error, Result};
use crate::evaluation::{top1_accuracy, ClassifierConfig, PairScores, RocCurve, SpeakerClassifier};
use crate::features::{Corpus, PhonemeSequence, Split, VocoderFrameSequence};
use crate::loop_core::LoopModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchmarkConfig {
    /// Free-running output is capped at this many frames per phoneme.
    pub max_frames_per_phoneme: usize,
    /// Real samples per speaker used as verification references.
    pub references_per_speaker: usize,
    pub primer_frames: usize,
    pub classifier: ClassifierConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            max_frames_per_phoneme: 40,
            references_per_speaker: 8,
            primer_frames: 300,
            classifier: ClassifierConfig::default(),
        }
    }
}

/// Per-speaker utterance indices split by role.
struct SpeakerUtterances {
    test: Vec<usize>,
    train: Vec<usize>,
}

pub struct Benchmark<'a> {
    pub corpus: &'a Corpus,
    pub config: BenchmarkConfig,
    pub classifier: SpeakerClassifier,
    speakers: Vec<String>,
    utterances: Vec<SpeakerUtterances>,
}

impl<'a> Benchmark<'a> {
    /// Trains the identification network on the train split of every speaker.
    pub fn new(
        corpus: &'a Corpus,
        encoder: crate::encoder::EncoderConfig,
        config: BenchmarkConfig,
    ) -> Result<Self> {
        let speakers = corpus.speakers();
        let utterances: Vec<SpeakerUtterances> = speakers
            .iter()
            .map(|s| SpeakerUtterances {
                test: corpus.indices(|r| &r.speaker == s && r.split == Split::Test),
                train: corpus.indices(|r| &r.speaker == s && r.split == Split::Train),
            })
            .collect();
        if let Some((s, _)) = speakers
            .iter()
            .zip(&utterances)
            .find(|(_, u)| u.test.len() < 2 || u.train.is_empty())
        {
            return Err(Error::Config(format!(
                "speaker {s} needs at least two test and one train utterance for benchmarking"
            )));
        }
        let samples: Vec<(&VocoderFrameSequence, usize)> = utterances
            .iter()
            .enumerate()
            .flat_map(|(c, u)| u.train.iter().map(move |&i| (&corpus.sequences[i], c)))
            .collect();
        let encoder = crate::encoder::EncoderConfig {
            d_o: corpus.feature_dim,
            ..encoder
        };
        let classifier =
            SpeakerClassifier::train(encoder, speakers.clone(), &samples, &config.classifier)?;
        Ok(Benchmark {
            corpus,
            config,
            classifier,
            speakers,
            utterances,
        })
    }

    fn class_of(&self, speaker: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == speaker)
            .ok_or_else(|| Error::arg(format!("speaker {speaker} is not in the corpus")))
    }

    fn max_frames(&self, s: &PhonemeSequence) -> usize {
        (s.len() * self.config.max_frames_per_phoneme).max(1)
    }

    /// Top-1 accuracy on the ground-truth test split.
    pub fn ground_truth_accuracy(&self) -> Result<f64> {
        let samples: Vec<(&VocoderFrameSequence, usize)> = self
            .utterances
            .iter()
            .enumerate()
            .flat_map(|(c, u)| u.test.iter().map(move |&i| (&self.corpus.sequences[i], c)))
            .collect();
        self.classifier.top1_accuracy(&samples)
    }

    /// Identification-network activations of every speaker's test split.
    pub fn test_activations(&self) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
        self.speakers
            .iter()
            .zip(&self.utterances)
            .map(|(s, u)| {
                let ys: Vec<&VocoderFrameSequence> =
                    u.test.iter().map(|&i| &self.corpus.sequences[i]).collect();
                Ok((s.clone(), self.classifier.activations(&ys)?))
            })
            .collect()
    }

    /// `(fit, text)` corpus index pairs for one speaker's test split.
    fn fit_text_pairs(&self, class: usize) -> Vec<(usize, usize)> {
        let t = &self.utterances[class].test;
        (0..t.len()).map(|k| (t[(k + 1) % t.len()], t[k])).collect()
    }

    fn fitted_output(
        &self,
        model: &LoopModel,
        encoder: &SpeakerEncoder,
        fit: usize,
        text: usize,
    ) -> Result<VocoderFrameSequence> {
        let s = &self.corpus.phonemes[text];
        let z = encoder.embed(&self.corpus.sequences[fit])?;
        model.free_run(s, Some(z.as_slice()), self.max_frames(s))
    }

    /// Identification accuracy of output fitted to each listed speaker and
    /// speaking that speaker's test texts.
    pub fn free_run_accuracy(
        &self,
        model: &LoopModel,
        encoder: &SpeakerEncoder,
        speakers: &[String],
    ) -> Result<f64> {
        let mut outputs = Vec::new();
        let mut labels = Vec::new();
        for s in speakers {
            let c = self.class_of(s)?;
            for (fit, text) in self.fit_text_pairs(c) {
                outputs.push(self.fitted_output(model, encoder, fit, text)?);
                labels.push(c);
            }
        }
        let refs: Vec<&VocoderFrameSequence> = outputs.iter().collect();
        top1_accuracy(&self.classifier.predict(&refs)?, &labels)
    }

    /// Reference activations: the first train-split utterances per speaker.
    fn references(&self, classes: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
        classes
            .iter()
            .map(|&c| {
                let ys: Vec<&VocoderFrameSequence> = self.utterances[c]
                    .train
                    .iter()
                    .take(self.config.references_per_speaker)
                    .map(|&i| &self.corpus.sequences[i])
                    .collect();
                self.classifier.activations(&ys)
            })
            .collect()
    }

    fn score(
        &self,
        generated: Vec<(usize, VocoderFrameSequence)>,
        classes: &[usize],
    ) -> Result<PairScores> {
        if classes.len() < 2 {
            return Err(Error::Config(
                "verification needs at least two speakers".into(),
            ));
        }
        let refs = self.references(classes)?;
        let ys: Vec<&VocoderFrameSequence> = generated.iter().map(|g| &g.1).collect();
        let acts = self.classifier.activations(&ys)?;
        let mut scores = PairScores::default();
        for ((owner, _), act) in generated.iter().zip(&acts) {
            let others: Vec<Vec<f64>> = refs
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != *owner)
                .flat_map(|(_, r)| r.iter().cloned())
                .collect();
            scores.add(act, &refs[*owner], &others)?;
        }
        Ok(scores)
    }

    /// Same/not-same verification of output fitted by the encoder to each
    /// listed speaker. Same pairs join the output with real samples of its
    /// speaker; not-same pairs with real samples of the other listed speakers.
    pub fn fitting_verification(
        &self,
        model: &LoopModel,
        encoder: &SpeakerEncoder,
        speakers: &[String],
    ) -> Result<RocCurve> {
        let classes = speakers
            .iter()
            .map(|s| self.class_of(s))
            .collect::<Result<Vec<_>>>()?;
        let mut generated = Vec::new();
        for (k, &c) in classes.iter().enumerate() {
            for (fit, text) in self.fit_text_pairs(c) {
                generated.push((k, self.fitted_output(model, encoder, fit, text)?));
            }
        }
        self.score(generated, &classes)?.roc()
    }

    /// Concatenates one speaker's train-split utterances, skipping those used
    /// as references, until the primer is long enough.
    fn primer(
        &self,
        class: usize,
        rotate: usize,
    ) -> Result<(VocoderFrameSequence, PhonemeSequence)> {
        let pool: Vec<usize> = self.utterances[class]
            .train
            .iter()
            .skip(self.config.references_per_speaker)
            .copied()
            .collect();
        let pool = if pool.is_empty() {
            self.utterances[class].train.clone()
        } else {
            pool
        };
        let mut y: Option<VocoderFrameSequence> = None;
        let mut s: Option<PhonemeSequence> = None;
        for k in 0..pool.len() {
            let i = pool[(k + rotate) % pool.len()];
            y = Some(match y {
                None => self.corpus.sequences[i].clone(),
                Some(p) => p.concat(&self.corpus.sequences[i])?,
            });
            s = Some(match s {
                None => self.corpus.phonemes[i].clone(),
                Some(p) => p.concat(&self.corpus.phonemes[i]),
            });
            if y.as_ref().unwrap().len() >= self.config.primer_frames {
                break;
            }
        }
        let y = y.unwrap();
        if y.len() < self.config.primer_frames {
            return Err(Error::Config(format!(
                "speaker {} has only {} train frames, primer needs {}",
                self.speakers[class],
                y.len(),
                self.config.primer_frames
            )));
        }
        Ok((y, s.unwrap()))
    }

    /// Verification of a speaker-agnostic model primed with each listed
    /// speaker's recordings. The flag reports whether every run started
    /// free-running from exactly the primed buffer.
    pub fn priming_verification(
        &self,
        model: &LoopModel,
        speakers: &[String],
    ) -> Result<(RocCurve, bool)> {
        let classes = speakers
            .iter()
            .map(|s| self.class_of(s))
            .collect::<Result<Vec<_>>>()?;
        let mut generated = Vec::new();
        let mut continuous = true;
        for (k, &c) in classes.iter().enumerate() {
            for (rotate, (_, text)) in self.fit_text_pairs(c).into_iter().enumerate() {
                let (py, ps) = self.primer(c, rotate)?;
                let s = &self.corpus.phonemes[text];
                let g = model.prime_and_generate(
                    &py,
                    &ps,
                    s,
                    self.config.primer_frames,
                    self.max_frames(s),
                )?;
                continuous &= g.first_step_buffer == g.primed_buffer;
                generated.push((k, g.frames));
            }
        }
        Ok((self.score(generated, &classes)?.roc()?, continuous))
    }
}
