//! Run configuration: a flat `key = value` schema covering model sizes,
//! losses, optimiser, both training phases and data paths.
//!
//! Resolution order, lowest precedence first: preset defaults, the
//! `LOOPFIT_SEED` environment variable, the config file, command-line
//! overrides. Unknown keys are errors.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loop_core::{ModelConfig, ModelMode};
use crate::losses::{CyclePass, LossWeights};

pub const SEED_ENV: &str = "LOOPFIT_SEED";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpochRule {
    Fixed(usize),
    /// Stop once validation MSE has failed to improve by `tolerance`
    /// (relative) for `patience` consecutive epochs, or at `max_epochs`.
    UntilConverged {
        max_epochs: usize,
        tolerance: f64,
        patience: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseConfig {
    pub noise_sd: f64,
    /// Crop length for longer samples.
    pub max_len: usize,
    pub batch_size: usize,
    pub epochs: EpochRule,
}

impl PhaseConfig {
    pub fn first() -> Self {
        PhaseConfig {
            noise_sd: 4.0,
            max_len: 100,
            batch_size: 256,
            epochs: EpochRule::Fixed(90),
        }
    }

    pub fn second() -> Self {
        PhaseConfig {
            noise_sd: 2.0,
            max_len: 1000,
            batch_size: 30,
            epochs: EpochRule::UntilConverged {
                max_epochs: 1000,
                tolerance: 0.005,
                patience: 10,
            },
        }
    }

    pub fn max_epochs(&self) -> usize {
        match self.epochs {
            EpochRule::Fixed(n) => n,
            EpochRule::UntilConverged { max_epochs, .. } => max_epochs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
    /// Tiny dimensions for gradient checks and smoke tests.
    Miniature,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            "miniature" => Ok(Preset::Miniature),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected paper, desk or miniature)"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
            Preset::Miniature => "miniature",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    /// The first `train_speakers` speakers of the manifest are trained on;
    /// zero means all of them.
    pub train_speakers: usize,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub phases: [PhaseConfig; 2],
    pub buckets: usize,
    /// Add the phase noise to the encoder input as well as the targets.
    pub encoder_noise: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => RunConfig {
                preset: p,
                seed: 0,
                data_dir: None,
                train_speakers: 0,
                model: ModelConfig::default(),
                encoder: EncoderConfig::default(),
                weights: LossWeights::default(),
                optimizer: OptimizerConfig::default(),
                phases: [PhaseConfig::first(), PhaseConfig::second()],
                buckets: 4,
                encoder_noise: true,
            },
            Preset::Desk => RunConfig {
                preset: p,
                train_speakers: 8,
                model: ModelConfig::desk(),
                encoder: EncoderConfig::desk(),
                optimizer: OptimizerConfig {
                    lr: 3e-3,
                    clip_norm: 1.0,
                    ..OptimizerConfig::default()
                },
                phases: [
                    PhaseConfig {
                        noise_sd: 0.5,
                        max_len: 100,
                        batch_size: 16,
                        epochs: EpochRule::Fixed(30),
                    },
                    PhaseConfig {
                        noise_sd: 0.25,
                        max_len: 1000,
                        batch_size: 16,
                        epochs: EpochRule::UntilConverged {
                            max_epochs: 50,
                            tolerance: 0.005,
                            patience: 10,
                        },
                    },
                ],
                ..Self::preset(Preset::Paper)
            },
            Preset::Miniature => RunConfig {
                preset: p,
                train_speakers: 2,
                model: ModelConfig::miniature(),
                encoder: EncoderConfig::miniature(),
                phases: [
                    PhaseConfig {
                        noise_sd: 0.1,
                        max_len: 20,
                        batch_size: 4,
                        epochs: EpochRule::Fixed(1),
                    },
                    PhaseConfig {
                        noise_sd: 0.05,
                        max_len: 1000,
                        batch_size: 4,
                        epochs: EpochRule::UntilConverged {
                            max_epochs: 1,
                            tolerance: 0.005,
                            patience: 10,
                        },
                    },
                ],
                buckets: 1,
                ..Self::preset(Preset::Desk)
            },
        }
    }

    /// Encoder settings with the dimensions it shares with the decoder.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_o: self.model.d_o,
            d_z: self.model.d_z,
            ..self.encoder.clone()
        }
    }

    /// The same settings with the decoder's sizes (buffer, phoneme and
    /// output widths, mixture components, inventory) cut to the miniature
    /// ones, for finite-difference checks. At full desk width the encoder's
    /// convolutions put so many ReLU kinks within a 1e-5 step that central
    /// differences stop being informative.
    pub fn gradient_check_config(&self) -> RunConfig {
        let m = ModelConfig::miniature();
        let mut c = self.clone();
        c.model = ModelConfig {
            phoneme_inventory: m.phoneme_inventory,
            k: m.k,
            d_b: m.d_b,
            d_p: m.d_p,
            d_o: m.d_o,
            n_components: m.n_components,
            ..self.model.clone()
        };
        c.encoder = c.encoder_config();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.encoder_config().validate()?;
        self.weights.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.clip_norm < 0.0 {
            return Err(Error::Config(
                "optimizer.lr must be positive and clip_norm non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite())
                || p.max_len == 0
                || p.batch_size < 4
                || p.max_epochs() == 0
            {
                return Err(Error::Config(format!(
                    "phase{}: noise_sd must be non-negative, max_len and epochs positive, batch_size at least 4",
                    i + 1
                )));
            }
        }
        if self.buckets == 0 {
            return Err(Error::Config("train.buckets must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let e = &self.encoder;
        let o = &self.optimizer;
        let mut v: Vec<(&'static str, String)> = vec![
            ("preset", self.preset.to_string()),
            ("seed", self.seed.to_string()),
            (
                "data.dir",
                self.data_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("data.train_speakers", self.train_speakers.to_string()),
            (
                "model.mode",
                match m.mode {
                    ModelMode::Embedded => "embedded",
                    ModelMode::Agnostic => "agnostic",
                }
                .into(),
            ),
            ("model.phoneme_inventory", m.phoneme_inventory.to_string()),
            ("model.k", m.k.to_string()),
            ("model.d_b", m.d_b.to_string()),
            ("model.d_p", m.d_p.to_string()),
            ("model.d_o", m.d_o.to_string()),
            ("model.d_z", m.d_z.to_string()),
            ("model.components", m.n_components.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.shift_scale", m.shift_scale.to_string()),
            ("encoder.conv_layers", e.n_conv_layers.to_string()),
            ("encoder.kernel", e.kernel.to_string()),
            ("encoder.channels", e.channels.to_string()),
            ("encoder.fc_width", e.fc_width.to_string()),
            ("encoder.fc_layers", e.fc_layers.to_string()),
            ("encoder.bn_momentum", e.bn_momentum.to_string()),
            ("loss.alpha", self.weights.alpha.to_string()),
            ("loss.beta", self.weights.beta.to_string()),
            ("loss.margin", self.weights.margin.to_string()),
            (
                "loss.cycle_pass",
                match self.weights.cycle_pass {
                    CyclePass::TeacherForced => "teacher",
                    CyclePass::FreeRunning => "free",
                }
                .into(),
            ),
            (
                "optimizer.kind",
                match o.kind {
                    OptimizerKind::Adam => "adam",
                    OptimizerKind::Sgd => "sgd",
                }
                .into(),
            ),
            ("optimizer.lr", o.lr.to_string()),
            ("optimizer.beta1", o.beta1.to_string()),
            ("optimizer.beta2", o.beta2.to_string()),
            ("optimizer.eps", o.eps.to_string()),
            ("optimizer.clip_norm", o.clip_norm.to_string()),
        ];
        for (i, p) in self.phases.iter().enumerate() {
            let k = |s: &'static str, t: &'static str| if i == 0 { s } else { t };
            v.push((
                k("phase1.noise_sd", "phase2.noise_sd"),
                p.noise_sd.to_string(),
            ));
            v.push((k("phase1.max_len", "phase2.max_len"), p.max_len.to_string()));
            v.push((
                k("phase1.batch_size", "phase2.batch_size"),
                p.batch_size.to_string(),
            ));
            match p.epochs {
                EpochRule::Fixed(n) => v.push((k("phase1.epochs", "phase2.epochs"), n.to_string())),
                EpochRule::UntilConverged {
                    max_epochs,
                    tolerance,
                    patience,
                } => {
                    v.push((
                        k("phase1.max_epochs", "phase2.max_epochs"),
                        max_epochs.to_string(),
                    ));
                    v.push((
                        k("phase1.tolerance", "phase2.tolerance"),
                        tolerance.to_string(),
                    ));
                    v.push((
                        k("phase1.patience", "phase2.patience"),
                        patience.to_string(),
                    ));
                }
            }
        }
        v.push(("train.buckets", self.buckets.to_string()));
        v.push(("train.encoder_noise", self.encoder_noise.to_string()));
        v
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Sets one key. `preset` is not accepted here; see [`RunConfig::resolve`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: Display,
        {
            v.parse::<T>()
                .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
        }
        let phase = key.split_once('.').and_then(|(p, rest)| match p {
            "phase1" => Some((0, rest)),
            "phase2" => Some((1, rest)),
            _ => None,
        });
        if let Some((i, field)) = phase {
            let p = &mut self.phases[i];
            let conv = |p: &mut PhaseConfig| -> (usize, f64, usize) {
                match p.epochs {
                    EpochRule::UntilConverged {
                        max_epochs,
                        tolerance,
                        patience,
                    } => (max_epochs, tolerance, patience),
                    EpochRule::Fixed(n) => (n, 0.005, 10),
                }
            };
            match field {
                "noise_sd" => p.noise_sd = num(key, value)?,
                "max_len" => p.max_len = num(key, value)?,
                "batch_size" => p.batch_size = num(key, value)?,
                "epochs" => p.epochs = EpochRule::Fixed(num(key, value)?),
                "max_epochs" => {
                    let (_, t, pa) = conv(p);
                    p.epochs = EpochRule::UntilConverged {
                        max_epochs: num(key, value)?,
                        tolerance: t,
                        patience: pa,
                    }
                }
                "tolerance" => {
                    let (m, _, pa) = conv(p);
                    p.epochs = EpochRule::UntilConverged {
                        max_epochs: m,
                        tolerance: num(key, value)?,
                        patience: pa,
                    }
                }
                "patience" => {
                    let (m, t, _) = conv(p);
                    p.epochs = EpochRule::UntilConverged {
                        max_epochs: m,
                        tolerance: t,
                        patience: num(key, value)?,
                    }
                }
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
            return Ok(());
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "data.dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.train_speakers" => self.train_speakers = num(key, value)?,
            "model.mode" => {
                self.model.mode = match value {
                    "embedded" => ModelMode::Embedded,
                    "agnostic" => ModelMode::Agnostic,
                    _ => {
                        return Err(Error::Config(format!(
                            "model.mode: expected embedded or agnostic, got {value:?}"
                        )))
                    }
                }
            }
            "model.phoneme_inventory" => self.model.phoneme_inventory = num(key, value)?,
            "model.k" => self.model.k = num(key, value)?,
            "model.d_b" => self.model.d_b = num(key, value)?,
            "model.d_p" => self.model.d_p = num(key, value)?,
            "model.d_o" => self.model.d_o = num(key, value)?,
            "model.d_z" => self.model.d_z = num(key, value)?,
            "model.components" => self.model.n_components = num(key, value)?,
            "model.hidden" => self.model.hidden = num(key, value)?,
            "model.shift_scale" => self.model.shift_scale = num(key, value)?,
            "encoder.conv_layers" => self.encoder.n_conv_layers = num(key, value)?,
            "encoder.kernel" => self.encoder.kernel = num(key, value)?,
            "encoder.channels" => self.encoder.channels = num(key, value)?,
            "encoder.fc_width" => self.encoder.fc_width = num(key, value)?,
            "encoder.fc_layers" => self.encoder.fc_layers = num(key, value)?,
            "encoder.bn_momentum" => self.encoder.bn_momentum = num(key, value)?,
            "loss.alpha" => self.weights.alpha = num(key, value)?,
            "loss.beta" => self.weights.beta = num(key, value)?,
            "loss.margin" => self.weights.margin = num(key, value)?,
            "loss.cycle_pass" => {
                self.weights.cycle_pass = match value {
                    "teacher" => CyclePass::TeacherForced,
                    "free" => CyclePass::FreeRunning,
                    _ => {
                        return Err(Error::Config(format!(
                            "loss.cycle_pass: expected teacher or free, got {value:?}"
                        )))
                    }
                }
            }
            "optimizer.kind" => {
                self.optimizer.kind = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => {
                        return Err(Error::Config(format!(
                            "optimizer.kind: expected adam or sgd, got {value:?}"
                        )))
                    }
                }
            }
            "optimizer.lr" => self.optimizer.lr = num(key, value)?,
            "optimizer.beta1" => self.optimizer.beta1 = num(key, value)?,
            "optimizer.beta2" => self.optimizer.beta2 = num(key, value)?,
            "optimizer.eps" => self.optimizer.eps = num(key, value)?,
            "optimizer.clip_norm" => self.optimizer.clip_norm = num(key, value)?,
            "train.buckets" => self.buckets = num(key, value)?,
            "train.encoder_noise" => self.encoder_noise = num(key, value)?,
            "preset" => {
                return Err(Error::Config(
                    "preset may only be chosen once, at the start".into(),
                ))
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Merges every layer into a validated configuration. `env_seed` is the
    /// value of `LOOPFIT_SEED`, if set.
    pub fn resolve(
        file_text: Option<&str>,
        env_seed: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let entries = match file_text {
            Some(t) => parse_entries(t)?,
            None => Vec::new(),
        };
        let preset = match entries.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Paper,
        };
        let mut cfg = RunConfig::preset(preset);
        if let Some(s) = env_seed {
            cfg.seed = s.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV} is not an unsigned integer: {s:?}"))
            })?;
        }
        for (k, v) in entries.iter().chain(overrides) {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.encoder = cfg.encoder_config();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(Some(&text), env.as_deref(), overrides)
    }

    /// Parses text produced by [`RunConfig::to_text`] with no other layers.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::resolve(Some(text), None, &[])
    }
}

/// `key = value` lines; `#` starts a comment; blank lines are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
        })?;
        let k = k.trim().to_string();
        if !seen.insert(k.clone()) {
            return Err(Error::Config(format!(
                "line {}: key {k:?} given twice",
                i + 1
            )));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}
