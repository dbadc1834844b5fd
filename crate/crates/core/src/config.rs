//! Run configuration: INI-style `key = value` text, one section per module.
//!
//! Key names are unique across sections, so any key can be overridden on
//! its own (the CLI maps `--key value` flags onto [`RunConfig::set`]).

use std::fmt::Write as _;
use std::str::FromStr;

use crate::chemmetrics::FingerprintParams;
use crate::error::{Error, Result};
use crate::hashing::fnv1a64;
use crate::model::ModelConfig;
use crate::molio::{GraphConfig, Vocab, DEFAULT_NOISE_SCALE};
use crate::objectives::{DEFAULT_LAMBDA, DEFAULT_TEMPERATURE};
use crate::trainer::TrainConfig;

/// Every key, grouped by section, in the order written by
/// [`RunConfig::to_text`].
pub const KEYS: &[(&str, &[&str])] = &[
    (
        "molio",
        &["vocab", "max_atoms", "bond_channels", "noise_scale"],
    ),
    ("flow", &["coupling_blocks", "bond_hidden", "atom_hidden"]),
    ("encoder", &["kmer", "encoder_hidden", "max_seq_len"]),
    (
        "objective",
        &[
            "lambda",
            "temperature",
            "align_weight",
            "unif_weight",
            "logdet_weight",
        ],
    ),
    (
        "train",
        &[
            "lr",
            "batch_size",
            "epochs",
            "seed",
            "clip_norm",
            "freeze_encoder",
            "threads",
        ],
    ),
    ("metrics", &["fp_radius", "fp_width"]),
    ("generate", &["samples", "gen_lambda", "correction"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub vocab: Vocab,
    pub max_atoms: usize,
    pub bond_channels: usize,
    pub noise_scale: f64,
    pub coupling_blocks: usize,
    pub bond_hidden: usize,
    pub atom_hidden: usize,
    pub kmer: usize,
    pub encoder_hidden: usize,
    pub max_seq_len: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub align_weight: f64,
    pub unif_weight: f64,
    pub logdet_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub freeze_encoder: bool,
    /// 0 means one worker per core.
    pub threads: usize,
    pub fp_radius: usize,
    pub fp_width: usize,
    pub samples: usize,
    /// `None` means the trained λ.
    pub gen_lambda: Option<f64>,
    pub correction: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let fp = FingerprintParams::default();
        Self {
            vocab: model.graph.vocab.clone(),
            max_atoms: model.graph.max_atoms,
            bond_channels: model.graph.bond_channels,
            noise_scale: DEFAULT_NOISE_SCALE,
            coupling_blocks: model.coupling_blocks,
            bond_hidden: model.bond_hidden,
            atom_hidden: model.atom_hidden,
            kmer: model.kmer,
            encoder_hidden: model.encoder_hidden,
            max_seq_len: model.max_seq_len,
            lambda: DEFAULT_LAMBDA,
            temperature: DEFAULT_TEMPERATURE,
            align_weight: train.align_weight,
            unif_weight: train.unif_weight,
            logdet_weight: train.logdet_weight,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            seed: train.seed,
            clip_norm: train.clip_norm,
            freeze_encoder: train.freeze_encoder,
            threads: 0,
            fp_radius: fp.radius,
            fp_width: fp.width,
            samples: 10,
            gen_lambda: None,
            correction: true,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got '{value}'"
        ))),
    }
}

pub fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(s, _)| *s)
}

impl RunConfig {
    /// Parses config text on top of the defaults. Unknown sections or keys,
    /// keys in the wrong section and duplicates are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", no + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header '{line}'")))?
                    .trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let expected = section_of(key).ok_or_else(|| at(format!("unknown key '{key}'")))?;
            match &section {
                Some(s) if s == expected => {}
                _ => return Err(at(format!("key '{key}' belongs in section [{expected}]"))),
            }
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key '{key}'")));
            }
            cfg.set(key, value).map_err(|e| at(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab" => self.vocab = Vocab::parse(value)?,
            "max_atoms" => self.max_atoms = parse_num(key, value)?,
            "bond_channels" => self.bond_channels = parse_num(key, value)?,
            "noise_scale" => self.noise_scale = parse_num(key, value)?,
            "coupling_blocks" => self.coupling_blocks = parse_num(key, value)?,
            "bond_hidden" => self.bond_hidden = parse_num(key, value)?,
            "atom_hidden" => self.atom_hidden = parse_num(key, value)?,
            "kmer" => self.kmer = parse_num(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse_num(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "align_weight" => self.align_weight = parse_num(key, value)?,
            "unif_weight" => self.unif_weight = parse_num(key, value)?,
            "logdet_weight" => self.logdet_weight = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "freeze_encoder" => self.freeze_encoder = parse_bool(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            "fp_radius" => self.fp_radius = parse_num(key, value)?,
            "fp_width" => self.fp_width = parse_num(key, value)?,
            "samples" => self.samples = parse_num(key, value)?,
            "gen_lambda" => {
                self.gen_lambda = match value {
                    "" | "trained" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "correction" => self.correction = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Text form of one key, as written by [`RunConfig::to_text`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "vocab" => self.vocab.to_list_string(),
            "max_atoms" => self.max_atoms.to_string(),
            "bond_channels" => self.bond_channels.to_string(),
            "noise_scale" => self.noise_scale.to_string(),
            "coupling_blocks" => self.coupling_blocks.to_string(),
            "bond_hidden" => self.bond_hidden.to_string(),
            "atom_hidden" => self.atom_hidden.to_string(),
            "kmer" => self.kmer.to_string(),
            "encoder_hidden" => self.encoder_hidden.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "lambda" => self.lambda.to_string(),
            "temperature" => self.temperature.to_string(),
            "align_weight" => self.align_weight.to_string(),
            "unif_weight" => self.unif_weight.to_string(),
            "logdet_weight" => self.logdet_weight.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "freeze_encoder" => self.freeze_encoder.to_string(),
            "threads" => self.threads.to_string(),
            "fp_radius" => self.fp_radius.to_string(),
            "fp_width" => self.fp_width.to_string(),
            "samples" => self.samples.to_string(),
            "gen_lambda" => self
                .gen_lambda
                .map_or_else(|| "trained".to_string(), |v| v.to_string()),
            "correction" => self.correction.to_string(),
            _ => return None,
        })
    }

    /// Canonical text: every key, sections in a fixed order. Parsing it
    /// gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (section, keys)) in KEYS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            writeln!(out, "[{section}]").unwrap();
            for key in *keys {
                writeln!(out, "{key} = {}", self.get(key).unwrap()).unwrap();
            }
        }
        out
    }

    /// Digest of the canonical text.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_atoms", self.max_atoms),
            ("bond_channels", self.bond_channels),
            ("kmer", self.kmer),
            ("encoder_hidden", self.encoder_hidden),
            ("max_seq_len", self.max_seq_len),
            ("bond_hidden", self.bond_hidden),
            ("atom_hidden", self.atom_hidden),
            ("epochs", self.epochs),
            ("fp_width", self.fp_width),
            ("samples", self.samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.max_atoms < 2 {
            return Err(Error::Config("max_atoms must be at least 2".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(1..=3).contains(&self.kmer) {
            return Err(Error::Config("kmer must be 1, 2 or 3".into()));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale < 1.0) {
            return Err(Error::Config("noise_scale must lie in (0, 1)".into()));
        }
        let nonneg = [
            ("lambda", self.lambda),
            ("align_weight", self.align_weight),
            ("unif_weight", self.unif_weight),
            ("logdet_weight", self.logdet_weight),
            ("lr", self.lr),
            ("gen_lambda", self.gen_lambda.unwrap_or(0.0)),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig::new(self.vocab.clone(), self.max_atoms, self.bond_channels)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            graph: self.graph_config(),
            coupling_blocks: self.coupling_blocks,
            bond_hidden: self.bond_hidden,
            atom_hidden: self.atom_hidden,
            kmer: self.kmer,
            encoder_hidden: self.encoder_hidden,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            noise_scale: self.noise_scale,
            lambda: self.lambda,
            temperature: self.temperature,
            align_weight: self.align_weight,
            unif_weight: self.unif_weight,
            logdet_weight: self.logdet_weight,
            clip_norm: self.clip_norm,
            freeze_encoder: self.freeze_encoder,
        }
    }

    pub fn fingerprint(&self) -> FingerprintParams {
        FingerprintParams {
            radius: self.fp_radius,
            width: self.fp_width,
        }
    }
}
