//! Run configuration: one flat key=value file describing a whole
//! training run, with defaults matching the reference hyperparameters.
//! Command-line flags override file values; the effective config is
//! printed as a run header so every run records its provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::segmatch::{AdversaryConfig, SegmatchTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Segmatch,
    Audio2vecC,
    Audio2vecU,
}

impl FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmatch" => Ok(Model::Segmatch),
            "audio2vec-c" => Ok(Model::Audio2vecC),
            "audio2vec-u" => Ok(Model::Audio2vecU),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected segmatch, audio2vec-c or audio2vec-u)"
            ))),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Segmatch => "segmatch",
            Model::Audio2vecC => "audio2vec-c",
            Model::Audio2vecU => "audio2vec-u",
        })
    }
}

/// The single source of truth for training hyperparameters. The numeric
/// defaults below are the reference values; they appear nowhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Model,
    pub input_dim: usize,
    pub conv_len: usize,
    pub conv_channels: usize,
    pub conv_stride: usize,
    pub gru_layers: usize,
    pub hidden: usize,
    pub attn_hidden: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub clip: f64,
    pub margin: f64,
    pub erased_frames: usize,
    pub batch_size: usize,
    pub speaker_blocked: bool,
    pub adversary_enabled: bool,
    pub adversary_lambda: f64,
    pub adversary_weight: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        RunConfig {
            model: Model::Segmatch,
            input_dim: enc.input_dim,
            conv_len: enc.conv_len,
            conv_channels: enc.conv_channels,
            conv_stride: enc.conv_stride,
            gru_layers: enc.gru_layers,
            hidden: enc.hidden,
            attn_hidden: enc.attn_hidden,
            lr: 0.0002,
            max_epochs: 15,
            clip: 2.0,
            margin: 0.2,
            erased_frames: 30,
            batch_size: 16,
            speaker_blocked: false,
            adversary_enabled: false,
            adversary_lambda: 1.0,
            adversary_weight: 1.0,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value '{value}' for key '{key}' (expected true/false)"
        ))),
    }
}

impl RunConfig {
    /// Applies key=value pairs on top of `self`. Used for both config
    /// files and command-line overrides, in that order, so flags win.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = value.parse()?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "conv_len" => self.conv_len = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse(key, value)?,
            "conv_stride" => self.conv_stride = parse(key, value)?,
            "gru_layers" => self.gru_layers = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "attn_hidden" => self.attn_hidden = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "erased_frames" => self.erased_frames = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "speaker_blocked" => self.speaker_blocked = parse_bool(key, value)?,
            "adversary_enabled" => self.adversary_enabled = parse_bool(key, value)?,
            "adversary_lambda" => self.adversary_lambda = parse(key, value)?,
            "adversary_weight" => self.adversary_weight = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("conv_len", self.conv_len),
            ("conv_channels", self.conv_channels),
            ("conv_stride", self.conv_stride),
            ("gru_layers", self.gru_layers),
            ("hidden", self.hidden),
            ("attn_hidden", self.attn_hidden),
            ("input_dim", self.input_dim),
            ("max_epochs", self.max_epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        Ok(())
    }

    /// Parses a key=value config file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.apply(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(cfg)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.input_dim,
            conv_len: self.conv_len,
            conv_channels: self.conv_channels,
            conv_stride: self.conv_stride,
            gru_layers: self.gru_layers,
            hidden: self.hidden,
            attn_hidden: self.attn_hidden,
        }
    }

    /// SegMatch training view of the config. `num_speakers` comes from
    /// the training split at run time.
    pub fn segmatch_config(&self, num_speakers: usize) -> SegmatchTrainConfig {
        SegmatchTrainConfig {
            encoder: self.encoder_config(),
            margin: self.margin,
            erased_frames: self.erased_frames,
            lr: self.lr,
            max_epochs: self.max_epochs,
            clip: self.clip,
            batch_size: self.batch_size,
            speaker_blocked: self.speaker_blocked,
            adversary: if self.adversary_enabled {
                Some(AdversaryConfig {
                    hidden: 512,
                    num_speakers,
                    lambda: self.adversary_lambda,
                    weight: self.adversary_weight,
                })
            } else {
                None
            },
            seed: self.seed,
        }
    }

    /// Full effective configuration, one key=value per line; parsing it
    /// back reproduces `self`. Also used as the checkpoint meta string
    /// and printed as the run header.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        push("model", self.model.to_string());
        push("input_dim", self.input_dim.to_string());
        push("conv_len", self.conv_len.to_string());
        push("conv_channels", self.conv_channels.to_string());
        push("conv_stride", self.conv_stride.to_string());
        push("gru_layers", self.gru_layers.to_string());
        push("hidden", self.hidden.to_string());
        push("attn_hidden", self.attn_hidden.to_string());
        push("lr", self.lr.to_string());
        push("max_epochs", self.max_epochs.to_string());
        push("clip", self.clip.to_string());
        push("margin", self.margin.to_string());
        push("erased_frames", self.erased_frames.to_string());
        push("batch_size", self.batch_size.to_string());
        push("speaker_blocked", self.speaker_blocked.to_string());
        push("adversary_enabled", self.adversary_enabled.to_string());
        push("adversary_lambda", self.adversary_lambda.to_string());
        push("adversary_weight", self.adversary_weight.to_string());
        push("seed", self.seed.to_string());
        out
    }

    /// Parses the output of [`to_text`] (e.g. a checkpoint meta string).
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

/// Parses `key=value` override arguments as passed on the command line.
pub fn parse_overrides(pairs: &[String]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{p}' is not key=value")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr, 0.0002);
        assert_eq!(cfg.max_epochs, 15);
        assert_eq!(cfg.clip, 2.0);
        assert_eq!(cfg.margin, 0.2);
        assert_eq!(cfg.erased_frames, 30);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.conv_len, 6);
        assert_eq!(cfg.conv_channels, 64);
        assert_eq!(cfg.conv_stride, 3);
        assert_eq!(cfg.gru_layers, 5);
        assert_eq!(cfg.hidden, 512);
        assert_eq!(cfg.attn_hidden, 512);
        assert!(!cfg.speaker_blocked);
        assert!(!cfg.adversary_enabled);
    }

    #[test]
    fn file_parsing_with_comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# a run\nmodel = audio2vec-u\nhidden = 64  # small\n\nseed=9\n",
        )
        .unwrap();
        let mut cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.model, Model::Audio2vecU);
        assert_eq!(cfg.hidden, 64);
        assert_eq!(cfg.seed, 9);
        // flag overrides win over the file value
        cfg.apply("hidden", "32").unwrap();
        assert_eq!(cfg.hidden, 32);
        // untouched keys keep defaults
        assert_eq!(cfg.lr, 0.0002);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply("model", "lstm"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply("lr", "fast"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply("lr", "0"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply("hidden", "0"), Err(Error::Config(_))));
        assert!(matches!(
            cfg.apply("speaker_blocked", "yes"),
            Err(Error::Config(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "margin\n").unwrap();
        assert!(matches!(RunConfig::from_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip_reproduces_config() {
        let mut cfg = RunConfig::default();
        cfg.apply("model", "segmatch").unwrap();
        cfg.apply("adversary_enabled", "true").unwrap();
        cfg.apply("adversary_lambda", "0.5").unwrap();
        cfg.apply("seed", "1234").unwrap();
        cfg.apply("hidden", "64").unwrap();
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
    }
}
