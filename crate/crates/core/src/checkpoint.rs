//! `VLCK` checkpoint files.
//!
//! Layout: magic, `u32` version, `u32` length and UTF-8 text (the run
//! configuration followed by `state.*` lines), `u32` tensor count, then per
//! tensor a `u32` name length, the name, `u32` rank, `u64` dims and the
//! values as little-endian `f32`.

use std::fs;
use std::path::Path;

use crate::config::{parse_entries, RunConfig};
use crate::encoder::SpeakerEncoder;
use crate::error::{Error, Result};
use crate::loop_core::LoopModel;
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::training::{round_tensor, OptimizerState, TrainRunState, ENCODER_STREAM, MODEL_STREAM};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue training or to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: LoopModel,
    pub encoder: SpeakerEncoder,
    pub optimizer: OptimizerState,
    pub run: TrainRunState,
}

impl Checkpoint {
    /// Freshly initialised networks for `config`, with parameters rounded to
    /// `f32` storage precision.
    pub fn fresh(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut model = LoopModel::new(
            config.model.clone(),
            derive_seed(config.seed, &[MODEL_STREAM]),
        )?;
        let mut encoder = SpeakerEncoder::new(
            config.encoder_config(),
            derive_seed(config.seed, &[ENCODER_STREAM]),
        )?;
        model.params.values_mut().iter_mut().for_each(round_tensor);
        encoder
            .params
            .values_mut()
            .iter_mut()
            .for_each(round_tensor);
        let optimizer = OptimizerState::new(
            model
                .params
                .values()
                .iter()
                .chain(encoder.params.values())
                .map(|t| t.shape()),
        );
        let run = TrainRunState::new(config.seed);
        Ok(Checkpoint {
            config,
            model,
            encoder,
            optimizer,
            run,
        })
    }

    fn state_text(&self) -> String {
        let r = &self.run;
        let lines = [
            ("state.phase", r.phase.to_string()),
            ("state.epoch", r.epoch.to_string()),
            ("state.total_epochs", r.total_epochs.to_string()),
            ("state.global_step", r.global_step.to_string()),
            ("state.seed", r.seed.to_string()),
            ("state.best_val", r.best_val.to_string()),
            ("state.phase_best", r.phase_best.to_string()),
            ("state.since_best", r.since_best.to_string()),
            ("state.initial_val", r.initial_val.to_string()),
            ("state.last_val", r.last_val.to_string()),
            ("state.optimizer_step", self.optimizer.step.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self
            .model
            .params
            .names()
            .iter()
            .zip(self.model.params.values())
        {
            out.push((format!("model/{n}"), t));
        }
        for (n, t) in self
            .encoder
            .params
            .names()
            .iter()
            .zip(self.encoder.params.values())
        {
            out.push((format!("encoder/{n}"), t));
        }
        for (i, (m, v)) in self.optimizer.m.iter().zip(&self.optimizer.v).enumerate() {
            out.push((format!("adam_m/{i}"), m));
            out.push((format!("adam_v/{i}"), v));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = format!("{}{}", self.config.to_text(), self.state_text());
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(text.len() as u32).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        let running: Vec<(String, Tensor)> = self
            .encoder
            .running
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                [
                    (
                        format!("bn_running/{i}/mean"),
                        Tensor::from_vec(&[r.mean.len()], r.mean.clone()),
                    ),
                    (
                        format!("bn_running/{i}/var"),
                        Tensor::from_vec(&[r.var.len()], r.var.clone()),
                    ),
                ]
            })
            .collect();
        let mut all = self.tensors();
        all.extend(running.iter().map(|(n, t)| (n.clone(), t)));
        b.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in all {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                b.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Parses checkpoint bytes; `path` is only used in error messages.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            path,
            bytes,
            pos: 0,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err(0, "missing VLCK magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(4, format!("unsupported checkpoint version {version}")));
        }
        let text_len = r.u32()? as usize;
        let text_at = r.pos;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| r.err(text_at, "header text is not UTF-8"))?;
        let entries = parse_entries(text).map_err(|e| r.err(text_at, e.to_string()))?;
        let (state, cfg): (Vec<_>, Vec<_>) = entries
            .into_iter()
            .partition(|(k, _)| k.starts_with("state."));
        let cfg_text: String = cfg.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let config = RunConfig::from_text(&cfg_text).map_err(|e| r.err(text_at, e.to_string()))?;
        let mut ck = Checkpoint::fresh(config).map_err(|e| r.err(text_at, e.to_string()))?;

        let get = |key: &str| -> Result<&str> {
            state
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    offset: text_at as u64,
                    message: format!("missing {key}"),
                })
        };
        fn num<T: std::str::FromStr>(path: &Path, at: usize, key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset: at as u64,
                message: format!("bad value {v:?} for {key}"),
            })
        }
        macro_rules! field {
            ($key:literal) => {
                num(path, text_at, $key, get($key)?)?
            };
        }
        ck.run = TrainRunState {
            phase: field!("state.phase"),
            epoch: field!("state.epoch"),
            total_epochs: field!("state.total_epochs"),
            global_step: field!("state.global_step"),
            seed: field!("state.seed"),
            best_val: field!("state.best_val"),
            phase_best: field!("state.phase_best"),
            since_best: field!("state.since_best"),
            initial_val: field!("state.initial_val"),
            last_val: field!("state.last_val"),
        };
        ck.optimizer.step = field!("state.optimizer_step");

        let count = r.u32()? as usize;
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let at = r.pos;
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| r.err(at, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| r.err(at, "tensor too large"))?,
            )?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let target: &mut [f64] = match ck.slot(&name) {
                Some(Slot::Tensor(t)) if t.shape() == shape.as_slice() => t.data_mut(),
                Some(Slot::Running(v)) if shape == [v.len()] => v.as_mut_slice(),
                Some(_) => {
                    return Err(r.err(
                        at,
                        format!("tensor {name:?} has an unexpected shape {shape:?}"),
                    ))
                }
                None => return Err(r.err(at, format!("unexpected tensor {name:?}"))),
            };
            target.copy_from_slice(&data);
            seen.insert(name);
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after the last tensor"));
        }
        let expected = ck.tensors().len() + 2 * ck.encoder.running.len();
        if seen.len() != expected {
            return Err(r.err(
                r.pos,
                format!("expected {expected} tensors, found {}", seen.len()),
            ));
        }
        Ok(ck)
    }

    /// Storage for a named tensor while loading.
    fn slot(&mut self, name: &str) -> Option<Slot<'_>> {
        if let Some(n) = name.strip_prefix("model/") {
            let i = self.model.params.index_of(n)?;
            return Some(Slot::Tensor(self.model.params.get_mut(i)));
        }
        if let Some(n) = name.strip_prefix("encoder/") {
            let i = self.encoder.params.index_of(n)?;
            return Some(Slot::Tensor(self.encoder.params.get_mut(i)));
        }
        if let Some(i) = name.strip_prefix("adam_m/") {
            return self
                .optimizer
                .m
                .get_mut(i.parse::<usize>().ok()?)
                .map(Slot::Tensor);
        }
        if let Some(i) = name.strip_prefix("adam_v/") {
            return self
                .optimizer
                .v
                .get_mut(i.parse::<usize>().ok()?)
                .map(Slot::Tensor);
        }
        let (i, which) = name.strip_prefix("bn_running/")?.split_once('/')?;
        let r = self.encoder.running.get_mut(i.parse::<usize>().ok()?)?;
        match which {
            "mean" => Some(Slot::Running(&mut r.mean)),
            "var" => Some(Slot::Running(&mut r.var)),
            _ => None,
        }
    }
}

enum Slot<'a> {
    Tensor(&'a mut Tensor),
    Running(&'a mut Vec<f64>),
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.bytes.len(), "file is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
