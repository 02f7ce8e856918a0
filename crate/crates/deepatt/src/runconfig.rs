//! Plain-text `key=value` run configuration: model shape, schedule, data
//! paths, seed, decode mode and numeric width in one file.

use crate::attention::ScaleMode;
use crate::encoder::{InitStdMode, ModelConfig, PosEncoding};
use crate::error::{Error, Result};
use crate::sublayers::SublayerKind;
use crate::training::TrainSchedule;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    #[default]
    Argmax,
    Constrained,
}

impl DecodeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::Argmax => "argmax",
            DecodeMode::Constrained => "constrained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(DecodeMode::Argmax),
            "constrained" => Ok(DecodeMode::Constrained),
            other => Err(Error::Config(format!("unknown decode mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub train_path: Option<String>,
    pub dev_path: Option<String>,
    pub test_path: Option<String>,
    pub embeddings_path: Option<String>,
    pub checkpoint_dir: Option<String>,
    pub seed: u64,
    pub decode: DecodeMode,
    pub use_f64: bool,
    /// Evaluate on dev every this many steps during training (0 = off).
    pub eval_every: usize,
    /// Minimum corpus frequency for a vocabulary entry.
    pub min_count: usize,
    pub score_verb: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            train_path: None,
            dev_path: None,
            test_path: None,
            embeddings_path: None,
            checkpoint_dir: None,
            seed: 0,
            decode: DecodeMode::Argmax,
            use_f64: false,
            eval_every: 0,
            min_count: 1,
            score_verb: false,
        }
    }
}

pub fn model_config_pairs(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("depth".into(), cfg.depth.to_string()),
        ("width".into(), cfg.width.to_string()),
        ("heads".into(), cfg.heads.to_string()),
        ("ffn_width".into(), cfg.ffn_width.to_string()),
        ("sublayer".into(), cfg.sublayer.as_str().into()),
        ("pos_enc".into(), cfg.pos_enc.as_str().into()),
        ("word_dim".into(), cfg.word_dim.to_string()),
        ("mask_dim".into(), cfg.mask_dim.to_string()),
        ("conv_width".into(), cfg.conv_width.to_string()),
        ("residual_keep".into(), cfg.residual_keep.to_string()),
        ("attention_keep".into(), cfg.attention_keep.to_string()),
        ("relu_keep".into(), cfg.relu_keep.to_string()),
        ("label_smoothing".into(), cfg.label_smoothing.to_string()),
        ("scale_mode".into(), cfg.scale_mode.as_str().into()),
        ("init_std_mode".into(), cfg.init_std_mode.as_str().into()),
    ]
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

pub fn apply_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "depth" => cfg.depth = parse_num(key, value)?,
        "width" => cfg.width = parse_num(key, value)?,
        "heads" => cfg.heads = parse_num(key, value)?,
        "ffn_width" => cfg.ffn_width = parse_num(key, value)?,
        "sublayer" => cfg.sublayer = SublayerKind::parse(value)?,
        "pos_enc" => cfg.pos_enc = PosEncoding::parse(value)?,
        "word_dim" => cfg.word_dim = parse_num(key, value)?,
        "mask_dim" => cfg.mask_dim = parse_num(key, value)?,
        "conv_width" => cfg.conv_width = parse_num(key, value)?,
        "residual_keep" => cfg.residual_keep = parse_num(key, value)?,
        "attention_keep" => cfg.attention_keep = parse_num(key, value)?,
        "relu_keep" => cfg.relu_keep = parse_num(key, value)?,
        "label_smoothing" => cfg.label_smoothing = parse_num(key, value)?,
        "scale_mode" => cfg.scale_mode = ScaleMode::parse(value)?,
        "init_std_mode" => cfg.init_std_mode = InitStdMode::parse(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn schedule_pairs(s: &TrainSchedule) -> Vec<(String, String)> {
    vec![
        ("base_lr".into(), s.base_lr.to_string()),
        ("plateau_steps".into(), s.plateau_steps.to_string()),
        ("halving_interval".into(), s.halving_interval.to_string()),
        ("total_steps".into(), s.total_steps.to_string()),
        ("clip_norm".into(), s.clip_norm.to_string()),
        ("token_budget".into(), s.token_budget.to_string()),
    ]
}

fn apply_schedule_key(s: &mut TrainSchedule, key: &str, value: &str) -> Result<bool> {
    match key {
        "base_lr" => s.base_lr = parse_num(key, value)?,
        "plateau_steps" => s.plateau_steps = parse_num(key, value)?,
        "halving_interval" => s.halving_interval = parse_num(key, value)?,
        "total_steps" => s.total_steps = parse_num(key, value)?,
        "clip_norm" => s.clip_norm = parse_num(key, value)?,
        "token_budget" => s.token_budget = parse_num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in model_config_pairs(&self.model)
            .into_iter()
            .chain(schedule_pairs(&self.schedule))
        {
            let _ = writeln!(out, "{k}={v}");
        }
        for (k, v) in [
            ("train_path", &self.train_path),
            ("dev_path", &self.dev_path),
            ("test_path", &self.test_path),
            ("embeddings_path", &self.embeddings_path),
            ("checkpoint_dir", &self.checkpoint_dir),
        ] {
            if let Some(p) = v {
                let _ = writeln!(out, "{k}={p}");
            }
        }
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "decode={}", self.decode.as_str());
        let _ = writeln!(out, "numeric_width={}", if self.use_f64 { "f64" } else { "f32" });
        let _ = writeln!(out, "eval_every={}", self.eval_every);
        let _ = writeln!(out, "min_count={}", self.min_count);
        let _ = writeln!(out, "score_verb={}", self.score_verb);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), i + 1).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key '{key}'"),
                });
            }
            if apply_model_key(&mut cfg.model, key, value)?
                || apply_schedule_key(&mut cfg.schedule, key, value)?
            {
                continue;
            }
            match key {
                "train_path" => cfg.train_path = Some(value.to_string()),
                "dev_path" => cfg.dev_path = Some(value.to_string()),
                "test_path" => cfg.test_path = Some(value.to_string()),
                "embeddings_path" => cfg.embeddings_path = Some(value.to_string()),
                "checkpoint_dir" => cfg.checkpoint_dir = Some(value.to_string()),
                "seed" => cfg.seed = parse_num(key, value)?,
                "decode" => cfg.decode = DecodeMode::parse(value)?,
                "numeric_width" => {
                    cfg.use_f64 = match value {
                        "f64" => true,
                        "f32" => false,
                        other => {
                            return Err(Error::Config(format!(
                                "numeric_width must be f32 or f64, got '{other}'"
                            )))
                        }
                    }
                }
                "eval_every" => cfg.eval_every = parse_num(key, value)?,
                "min_count" => cfg.min_count = parse_num(key, value)?,
                "score_verb" => cfg.score_verb = parse_num(key, value)?,
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("unknown key '{other}'"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
