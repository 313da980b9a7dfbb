//! Run configuration and its `key = value` text format.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. Every key is optional.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`")]
    Value { line: usize, key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    // data
    pub train_size: usize,
    pub test_size: usize,
    pub non_overlap_mix: f64,
    pub objects_per_view: usize,
    pub covisible_fraction: f64,
    pub noise_sigma: f64,
    pub distractors: usize,
    pub distractor_similarity: f64,
    pub feature_width: usize,
    // model
    pub width: usize,
    pub heads: usize,
    pub high_layers: usize,
    pub low_layers: usize,
    pub consensus_width: usize,
    pub signature_width: usize,
    pub max_nodes: usize,
    pub position_scale: f64,
    pub tau: f64,
    // optimisation
    pub learning_rate: f64,
    pub epochs: usize,
    pub high_epochs: Option<usize>,
    pub low_epochs: Option<usize>,
    pub batch_size: usize,
    pub attn_dropout: f64,
    pub mlp_dropout: f64,
    pub train_high: bool,
    pub train_low: bool,
    // ablations
    pub use_consensus: bool,
    pub use_gating: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            seed: 7,
            train_size: 2000,
            test_size: 400,
            non_overlap_mix: 0.3,
            objects_per_view: s.objects_per_view,
            covisible_fraction: s.covisible_fraction,
            noise_sigma: s.noise_sigma,
            distractors: s.distractors,
            distractor_similarity: s.distractor_similarity,
            feature_width: s.feature_width,
            width: 256,
            heads: 4,
            high_layers: 2,
            low_layers: 4,
            consensus_width: 64,
            signature_width: 16,
            max_nodes: 64,
            position_scale: 10.0,
            tau: 0.65,
            learning_rate: 1e-3,
            epochs: 50,
            high_epochs: None,
            low_epochs: None,
            batch_size: 16,
            attn_dropout: 0.5,
            mlp_dropout: 0.2,
            train_high: true,
            train_low: true,
            use_consensus: true,
            use_gating: true,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl RunConfig {
    /// Long 150-epoch schedule.
    pub fn long_schedule() -> Self {
        Self {
            epochs: 150,
            ..Self::default()
        }
    }

    pub fn high_epochs(&self) -> usize {
        self.high_epochs.unwrap_or(self.epochs)
    }

    pub fn low_epochs(&self) -> usize {
        self.low_epochs.unwrap_or(self.epochs)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            objects_per_view: self.objects_per_view,
            covisible_fraction: self.covisible_fraction,
            noise_sigma: self.noise_sigma,
            distractors: self.distractors,
            distractor_similarity: self.distractor_similarity,
            feature_width: self.feature_width,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [
            ("width", self.width),
            ("heads", self.heads),
            ("consensus_width", self.consensus_width),
            ("signature_width", self.signature_width),
            ("max_nodes", self.max_nodes),
            ("feature_width", self.feature_width),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.width % self.heads != 0 || self.consensus_width % self.heads != 0 {
            return bad(format!("widths must be multiples of heads ({})", self.heads));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.attn_dropout) || !(0.0..1.0).contains(&self.mlp_dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.non_overlap_mix) {
            return bad("non_overlap_mix must lie in [0, 1]".into());
        }
        if self.objects_per_view > self.max_nodes {
            return bad(format!(
                "objects_per_view {} exceeds max_nodes {}",
                self.objects_per_view, self.max_nodes
            ));
        }
        if !(self.position_scale > 0.0) {
            return bad("position_scale must be positive".into());
        }
        self.synth()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "seed" => c.seed = parse(line, key, v)?,
                "train_size" => c.train_size = parse(line, key, v)?,
                "test_size" => c.test_size = parse(line, key, v)?,
                "non_overlap_mix" => c.non_overlap_mix = parse(line, key, v)?,
                "objects_per_view" => c.objects_per_view = parse(line, key, v)?,
                "covisible_fraction" => c.covisible_fraction = parse(line, key, v)?,
                "noise_sigma" => c.noise_sigma = parse(line, key, v)?,
                "distractors" => c.distractors = parse(line, key, v)?,
                "distractor_similarity" => c.distractor_similarity = parse(line, key, v)?,
                "feature_width" => c.feature_width = parse(line, key, v)?,
                "width" => c.width = parse(line, key, v)?,
                "heads" => c.heads = parse(line, key, v)?,
                "high_layers" => c.high_layers = parse(line, key, v)?,
                "low_layers" => c.low_layers = parse(line, key, v)?,
                "consensus_width" => c.consensus_width = parse(line, key, v)?,
                "signature_width" => c.signature_width = parse(line, key, v)?,
                "max_nodes" => c.max_nodes = parse(line, key, v)?,
                "position_scale" => c.position_scale = parse(line, key, v)?,
                "tau" => c.tau = parse(line, key, v)?,
                "learning_rate" => c.learning_rate = parse(line, key, v)?,
                "epochs" => c.epochs = parse(line, key, v)?,
                "high_epochs" => c.high_epochs = Some(parse(line, key, v)?),
                "low_epochs" => c.low_epochs = Some(parse(line, key, v)?),
                "batch_size" => c.batch_size = parse(line, key, v)?,
                "attn_dropout" => c.attn_dropout = parse(line, key, v)?,
                "mlp_dropout" => c.mlp_dropout = parse(line, key, v)?,
                "train_high" => c.train_high = parse(line, key, v)?,
                "train_low" => c.train_low = parse(line, key, v)?,
                "use_consensus" => c.use_consensus = parse(line, key, v)?,
                "use_gating" => c.use_gating = parse(line, key, v)?,
                "preset" => match v {
                    "desk" => c = Self { seed: c.seed, ..Self::default() },
                    "long" => c = Self { seed: c.seed, ..Self::long_schedule() },
                    _ => {
                        return Err(ConfigError::Value {
                            line,
                            key: key.into(),
                            value: v.into(),
                        })
                    }
                },
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Text form accepted by [`RunConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("train_size", self.train_size.to_string());
        kv("test_size", self.test_size.to_string());
        kv("non_overlap_mix", self.non_overlap_mix.to_string());
        kv("objects_per_view", self.objects_per_view.to_string());
        kv("covisible_fraction", self.covisible_fraction.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("distractors", self.distractors.to_string());
        kv("distractor_similarity", self.distractor_similarity.to_string());
        kv("feature_width", self.feature_width.to_string());
        kv("width", self.width.to_string());
        kv("heads", self.heads.to_string());
        kv("high_layers", self.high_layers.to_string());
        kv("low_layers", self.low_layers.to_string());
        kv("consensus_width", self.consensus_width.to_string());
        kv("signature_width", self.signature_width.to_string());
        kv("max_nodes", self.max_nodes.to_string());
        kv("position_scale", self.position_scale.to_string());
        kv("tau", self.tau.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("epochs", self.epochs.to_string());
        if let Some(e) = self.high_epochs {
            kv("high_epochs", e.to_string());
        }
        if let Some(e) = self.low_epochs {
            kv("low_epochs", e.to_string());
        }
        kv("batch_size", self.batch_size.to_string());
        kv("attn_dropout", self.attn_dropout.to_string());
        kv("mlp_dropout", self.mlp_dropout.to_string());
        kv("train_high", self.train_high.to_string());
        kv("train_low", self.train_low.to_string());
        kv("use_consensus", self.use_consensus.to_string());
        kv("use_gating", self.use_gating.to_string());
        s
    }
}
