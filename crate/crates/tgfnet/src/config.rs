//! Flat key=value run configuration.
//!
//! One `key = value` pair per line, `#` starts a comment. Every key has a
//! default; unknown keys are a hard error. The full effective config can
//! be rendered back out, which the commands use to echo provenance into
//! their output directories.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::{ExpertInput, ModelConfig, Variant};
use crate::synthvqa::GenConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key \"{0}\"")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Optimization and loop controls.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Learning rate. Desk-scale default; the full-scale setup uses 1e-5.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs over the training split. The full-scale setup runs 100.
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    /// Evaluate on the validation split every this many epochs; 0 skips
    /// mid-training evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 3,
            max_steps: 0,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got \"{raw}\""),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::UnknownKey(k),
                other => ConfigError::Parse {
                    line: i + 1,
                    msg: other.to_string(),
                },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::Invalid(msg);
        macro_rules! num {
            ($t:ty) => {
                value
                    .parse::<$t>()
                    .map_err(|_| bad(format!("key {key}: cannot parse \"{value}\"")))?
            };
        }
        match key {
            "variant" => {
                self.model.variant = Variant::parse(value)
                    .ok_or_else(|| bad(format!("unknown variant \"{value}\"")))?;
            }
            "expert_input" => {
                self.model.expert_input = match value {
                    "enhanced" => ExpertInput::Enhanced,
                    "raw" => ExpertInput::Raw,
                    _ => return Err(bad(format!("expert_input must be enhanced|raw, got {value}"))),
                };
            }
            "dim" => self.model.dim = num!(usize),
            "heads" => self.model.heads = num!(usize),
            "rqaf_heads" => self.model.rqaf_heads = num!(usize),
            "n_tokens" => self.model.n_tokens = num!(usize),
            "grid" => {
                self.model.grid = num!(usize);
                self.gen.grid = self.model.grid;
            }
            "regions" => self.model.regions = num!(usize),
            "region_patches" => self.model.region_patches = num!(usize),
            "route_k" => self.model.route_k = num!(usize),
            "rqaf_r" => self.model.rqaf_r = num!(usize),
            "classes" => self.model.classes = num!(usize),
            "mlp_hidden" => self.model.mlp_hidden = num!(usize),
            "head_hidden" => self.model.head_hidden = num!(usize),
            "vocab" => self.model.vocab = num!(usize),
            "lambda1" => self.model.lambda[0] = num!(f64),
            "lambda2" => self.model.lambda[1] = num!(f64),
            "lambda3" => self.model.lambda[2] = num!(f64),
            "lambda4" => self.model.lambda[3] = num!(f64),
            "batch" => self.model.batch = num!(usize),
            "lr" => self.train.lr = num!(f64),
            "beta1" => self.train.beta1 = num!(f64),
            "beta2" => self.train.beta2 = num!(f64),
            "adam_eps" => self.train.adam_eps = num!(f64),
            "epochs" => self.train.epochs = num!(usize),
            "max_steps" => self.train.max_steps = num!(usize),
            "eval_every" => self.train.eval_every = num!(usize),
            "max_objects" => self.gen.max_objects = num!(usize),
            "degrade_prob" => self.gen.degrade_prob = num!(f64),
            "question_cap" => self.gen.question_cap = num!(usize),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.lr <= 0.0 {
            return Err(ConfigError::Invalid("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return Err(ConfigError::Invalid("betas must lie in [0,1)".into()));
        }
        if self.gen.max_objects > 9 {
            return Err(ConfigError::Invalid(
                "max_objects above 9 breaks the digit answers".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gen.degrade_prob) {
            return Err(ConfigError::Invalid("degrade_prob outside [0,1]".into()));
        }
        Ok(())
    }

    /// Render every key with its effective value, sorted, parseable by
    /// [`RunConfig::from_str_contents`].
    pub fn render(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        let ei = match self.model.expert_input {
            ExpertInput::Enhanced => "enhanced",
            ExpertInput::Raw => "raw",
        };
        let mut pairs: Vec<(&str, String)> = vec![
            ("adam_eps", format!("{:e}", self.train.adam_eps)),
            ("batch", self.model.batch.to_string()),
            ("beta1", self.train.beta1.to_string()),
            ("beta2", self.train.beta2.to_string()),
            ("classes", self.model.classes.to_string()),
            ("degrade_prob", self.gen.degrade_prob.to_string()),
            ("dim", self.model.dim.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("eval_every", self.train.eval_every.to_string()),
            ("expert_input", ei.to_string()),
            ("grid", self.model.grid.to_string()),
            ("head_hidden", self.model.head_hidden.to_string()),
            ("heads", self.model.heads.to_string()),
            ("lambda1", self.model.lambda[0].to_string()),
            ("lambda2", self.model.lambda[1].to_string()),
            ("lambda3", self.model.lambda[2].to_string()),
            ("lambda4", self.model.lambda[3].to_string()),
            ("lr", self.train.lr.to_string()),
            ("max_objects", self.gen.max_objects.to_string()),
            ("max_steps", self.train.max_steps.to_string()),
            ("mlp_hidden", self.model.mlp_hidden.to_string()),
            ("n_tokens", self.model.n_tokens.to_string()),
            ("question_cap", self.gen.question_cap.to_string()),
            ("region_patches", self.model.region_patches.to_string()),
            ("regions", self.model.regions.to_string()),
            ("route_k", self.model.route_k.to_string()),
            ("rqaf_heads", self.model.rqaf_heads.to_string()),
            ("rqaf_r", self.model.rqaf_r.to_string()),
            ("vocab", self.model.vocab.to_string()),
            ("variant", self.model.variant.name().to_string()),
        ];
        pairs.sort_by_key(|(k, _)| *k);
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
