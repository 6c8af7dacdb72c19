//! Line-oriented dataset manifests and length bucketing.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::frames_io::read_header;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker: String,
    pub phoneme_ids: Vec<usize>,
    /// Relative to the manifest's directory unless absolute.
    pub frame_path: PathBuf,
    pub n_frames: usize,
    pub split: Split,
}

impl ManifestRecord {
    fn to_line(&self) -> String {
        let ph = self
            .phoneme_ids
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.utterance_id,
            self.speaker,
            ph,
            self.frame_path.display(),
            self.n_frames,
            self.split
        )
    }

    fn from_line(line: &str, lineno: usize) -> Result<Self> {
        let bad = |what: &str| Error::Corpus(format!("manifest line {lineno}: {what}"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad(&format!(
                "expected 6 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let phoneme_ids = fields[2]
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| bad(&format!("bad phoneme id {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n_frames = fields[4]
            .parse::<usize>()
            .map_err(|_| bad(&format!("bad frame count {:?}", fields[4])))?;
        Ok(ManifestRecord {
            utterance_id: fields[0].to_string(),
            speaker: fields[1].to_string(),
            phoneme_ids,
            frame_path: PathBuf::from(fields[3]),
            n_frames,
            split: fields[5].parse().map_err(|_| bad("bad split"))?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(Error::Corpus(format!(
                    "duplicate utterance id {}",
                    r.utterance_id
                )));
            }
        }
        Ok(DatasetManifest { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Speaker labels in first-appearance order.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.speaker) {
                out.push(r.speaker.clone());
            }
        }
        out
    }

    pub fn filter(&self, keep: impl Fn(&ManifestRecord) -> bool) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| ManifestRecord::from_line(l, i + 1))
            .collect::<Result<Vec<_>>>()?;
        Self::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest and checks that every frame file exists and agrees
    /// with its recorded frame count.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(&text)?;
        let root = path.parent().unwrap_or(Path::new("."));
        for r in &m.records {
            let fp = m.resolve(root, r);
            let (_, n) = read_header(&fp)?;
            if n != r.n_frames {
                return Err(Error::Corpus(format!(
                    "{}: manifest says {} frames, file header says {n}",
                    r.utterance_id, r.n_frames
                )));
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, root: &Path, r: &ManifestRecord) -> PathBuf {
        if r.frame_path.is_absolute() {
            r.frame_path.clone()
        } else {
            root.join(&r.frame_path)
        }
    }
}

/// Splits records into `n_parts` contiguous runs of the length-sorted order
/// (ties broken by utterance id); run sizes differ by at most one.
pub fn partition_by_length(
    manifest: &DatasetManifest,
    n_parts: usize,
) -> Result<Vec<DatasetManifest>> {
    if n_parts == 0 {
        return Err(Error::arg("number of partitions must be at least 1"));
    }
    if manifest.len() < n_parts {
        return Err(Error::arg(format!(
            "cannot split {} records into {n_parts} partitions",
            manifest.len()
        )));
    }
    let mut sorted = manifest.records.clone();
    sorted.sort_by(|a, b| {
        a.n_frames
            .cmp(&b.n_frames)
            .then_with(|| a.utterance_id.cmp(&b.utterance_id))
    });
    let base = sorted.len() / n_parts;
    let extra = sorted.len() % n_parts;
    let mut out = Vec::with_capacity(n_parts);
    let mut it = sorted.into_iter();
    for i in 0..n_parts {
        let take = base + usize::from(i < extra);
        out.push(DatasetManifest {
            records: it.by_ref().take(take).collect(),
        });
    }
    Ok(out)
}
