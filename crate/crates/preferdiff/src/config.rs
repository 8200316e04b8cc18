//! Run configuration: defaults, file parsing, and override resolution.
//!
//! Config files are line-oriented `key = value` text with `#` comments.
//! Resolution precedence, lowest to highest: built-in defaults, the
//! `PREFERDIFF_SEED` environment variable (seed only), the config file,
//! command-line overrides. Every numeric key is range-checked and unknown
//! keys are rejected with the nearest valid name.

use crate::model::EncoderKind;
use crate::objective::{LossConfig, MeasureKind};
use crate::sampler::SamplerConfig;
use crate::trainer::{OptimizerConfig, TrainerConfig};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {key:?}; closest valid key is {suggestion:?}")]
    UnknownKey { key: String, suggestion: String },
    #[error("config key {key:?}: value {value:?} rejected: {requirement}")]
    BadValue {
        key: String,
        value: String,
        requirement: String,
    },
    #[error("config line {line}: expected 'key = value', got {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn bad(key: &str, value: &str, requirement: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        requirement: requirement.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// Trainable id embeddings, standard-normal initialized.
    Id,
    /// Frozen embeddings imported from a text file.
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub encoder: EncoderKind,
    pub max_len: usize,
    pub lambda: f64,
    pub measure: MeasureKind,
    pub negatives: usize,
    pub ddim_steps: usize,
    /// Reduced step count for the per-epoch validation pass.
    pub valid_ddim_steps: usize,
    pub guidance_w: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub p_uncond: f64,
    pub data_path: Option<String>,
    pub embeddings_path: Option<String>,
    pub embedding_mode: EmbeddingMode,
    pub min_count: usize,
    pub split: (u32, u32, u32),
    /// Expand every training prefix into its own example instead of keeping
    /// only each user's final interaction.
    pub train_windows: bool,
    pub mask_history: bool,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_clusters: usize,
    pub synth_latent_dim: usize,
    pub synth_noise: f64,
    pub synth_min_len: usize,
    pub synth_max_len: usize,
    /// Worker cap for parallel evaluation; 0 leaves the library default.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t_max: 2000,
            beta_start: 1e-4,
            beta_end: 0.02,
            dim: 64,
            cond_dim: 64,
            time_dim: 64,
            encoder: EncoderKind::Gru,
            max_len: 10,
            lambda: 0.4,
            measure: MeasureKind::Cosine,
            negatives: 8,
            ddim_steps: 20,
            valid_ddim_steps: 4,
            guidance_w: 2.0,
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 50,
            patience: 20,
            seed: 42,
            p_uncond: 0.1,
            data_path: None,
            embeddings_path: None,
            embedding_mode: EmbeddingMode::Id,
            min_count: 5,
            split: (8, 1, 1),
            train_windows: false,
            mask_history: false,
            synth_users: 2000,
            synth_items: 200,
            synth_clusters: 8,
            synth_latent_dim: 64,
            synth_noise: 0.2,
            synth_min_len: 5,
            synth_max_len: 15,
            threads: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "t_max",
    "beta_start",
    "beta_end",
    "dim",
    "cond_dim",
    "time_dim",
    "encoder",
    "max_len",
    "lambda",
    "measure",
    "negatives",
    "ddim_steps",
    "valid_ddim_steps",
    "guidance_w",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "patience",
    "seed",
    "p_uncond",
    "data_path",
    "embeddings_path",
    "embedding_mode",
    "min_count",
    "split",
    "train_windows",
    "mask_history",
    "synth_users",
    "synth_items",
    "synth_clusters",
    "synth_latent_dim",
    "synth_noise",
    "synth_min_len",
    "synth_max_len",
    "threads",
];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nearest_key(key: &str) -> &'static str {
    KEYS.iter()
        .min_by_key(|k| levenshtein(key, k))
        .expect("key list is not empty")
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn parse_positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    let n: usize = parse_num(key, value, "must be a positive integer")?;
    if n == 0 {
        return Err(bad(key, value, "must be a positive integer"));
    }
    Ok(n)
}

fn parse_unit_interval(key: &str, value: &str) -> Result<f64, ConfigError> {
    let x: f64 = parse_num(key, value, "must be a number in [0, 1]")?;
    if !(0.0..=1.0).contains(&x) {
        return Err(bad(key, value, "must lie in [0, 1]"));
    }
    Ok(x)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "must be true or false")),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment with per-key validation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "t_max" => self.t_max = parse_positive(key, value)?,
            "beta_start" => {
                let x: f64 = parse_num(key, value, "must be a number in (0, 1)")?;
                if !(x > 0.0 && x < 1.0) {
                    return Err(bad(key, value, "must lie strictly inside (0, 1)"));
                }
                self.beta_start = x;
            }
            "beta_end" => {
                let x: f64 = parse_num(key, value, "must be a number in (0, 1)")?;
                if !(x > 0.0 && x < 1.0) {
                    return Err(bad(key, value, "must lie strictly inside (0, 1)"));
                }
                self.beta_end = x;
            }
            "dim" => self.dim = parse_positive(key, value)?,
            "cond_dim" => self.cond_dim = parse_positive(key, value)?,
            "time_dim" => self.time_dim = parse_positive(key, value)?,
            "encoder" => {
                self.encoder = match value {
                    "gru" => EncoderKind::Gru,
                    "transformer" => EncoderKind::Transformer,
                    _ => return Err(bad(key, value, "must be gru or transformer")),
                }
            }
            "max_len" => self.max_len = parse_positive(key, value)?,
            "lambda" => self.lambda = parse_unit_interval(key, value)?,
            "measure" => {
                self.measure = value
                    .parse()
                    .map_err(|_| bad(key, value, "must be l1, l2, huber, or cosine"))?
            }
            "negatives" => {
                self.negatives = parse_num(key, value, "must be a non-negative integer")?
            }
            "ddim_steps" => self.ddim_steps = parse_positive(key, value)?,
            "valid_ddim_steps" => self.valid_ddim_steps = parse_positive(key, value)?,
            "guidance_w" => {
                let x: f64 = parse_num(key, value, "must be a finite number")?;
                if !x.is_finite() {
                    return Err(bad(key, value, "must be a finite number"));
                }
                self.guidance_w = x;
            }
            "lr" => {
                let x: f64 = parse_num(key, value, "must be a positive number")?;
                if !(x > 0.0 && x.is_finite()) {
                    return Err(bad(key, value, "must be a positive number"));
                }
                self.lr = x;
            }
            "weight_decay" => {
                let x: f64 = parse_num(key, value, "must be a non-negative number")?;
                if !(x >= 0.0 && x.is_finite()) {
                    return Err(bad(key, value, "must be a non-negative number"));
                }
                self.weight_decay = x;
            }
            "batch_size" => self.batch_size = parse_positive(key, value)?,
            "epochs" => self.epochs = parse_positive(key, value)?,
            "patience" => self.patience = parse_positive(key, value)?,
            "seed" => self.seed = parse_num(key, value, "must be an unsigned integer")?,
            "p_uncond" => self.p_uncond = parse_unit_interval(key, value)?,
            "data_path" => self.data_path = Some(value.to_string()),
            "embeddings_path" => self.embeddings_path = Some(value.to_string()),
            "embedding_mode" => {
                self.embedding_mode = match value {
                    "id" => EmbeddingMode::Id,
                    "text" => EmbeddingMode::Text,
                    _ => return Err(bad(key, value, "must be id or text")),
                }
            }
            "min_count" => {
                self.min_count = parse_num(key, value, "must be a non-negative integer")?
            }
            "split" => {
                let parts: Vec<&str> = value.split(':').collect();
                let parsed: Option<Vec<u32>> = parts
                    .iter()
                    .map(|p| p.parse::<u32>().ok().filter(|&n| n > 0))
                    .collect();
                match parsed.as_deref() {
                    Some([a, b, c]) => self.split = (*a, *b, *c),
                    _ => {
                        return Err(bad(
                            key,
                            value,
                            "must be three positive integers like 8:1:1",
                        ))
                    }
                }
            }
            "train_windows" => self.train_windows = parse_bool(key, value)?,
            "mask_history" => self.mask_history = parse_bool(key, value)?,
            "synth_users" => self.synth_users = parse_positive(key, value)?,
            "synth_items" => self.synth_items = parse_positive(key, value)?,
            "synth_clusters" => self.synth_clusters = parse_positive(key, value)?,
            "synth_latent_dim" => self.synth_latent_dim = parse_positive(key, value)?,
            "synth_noise" => self.synth_noise = parse_unit_interval(key, value)?,
            "synth_min_len" => self.synth_min_len = parse_positive(key, value)?,
            "synth_max_len" => self.synth_max_len = parse_positive(key, value)?,
            "threads" => self.threads = parse_num(key, value, "must be a non-negative integer")?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    suggestion: nearest_key(key).to_string(),
                })
            }
        }
        Ok(())
    }

    /// Cross-key checks that individual assignments cannot see.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.beta_start > self.beta_end {
            return Err(bad(
                "beta_start",
                &self.beta_start.to_string(),
                format!("must not exceed beta_end = {}", self.beta_end),
            ));
        }
        if self.ddim_steps > self.t_max {
            return Err(bad(
                "ddim_steps",
                &self.ddim_steps.to_string(),
                format!("must not exceed t_max = {}", self.t_max),
            ));
        }
        if self.valid_ddim_steps > self.t_max {
            return Err(bad(
                "valid_ddim_steps",
                &self.valid_ddim_steps.to_string(),
                format!("must not exceed t_max = {}", self.t_max),
            ));
        }
        if self.synth_min_len > self.synth_max_len {
            return Err(bad(
                "synth_min_len",
                &self.synth_min_len.to_string(),
                format!("must not exceed synth_max_len = {}", self.synth_max_len),
            ));
        }
        if self.synth_clusters > self.synth_items {
            return Err(bad(
                "synth_clusters",
                &self.synth_clusters.to_string(),
                format!("must not exceed synth_items = {}", self.synth_items),
            ));
        }
        if self.encoder == EncoderKind::Transformer && self.cond_dim % 2 != 0 {
            return Err(bad(
                "cond_dim",
                &self.cond_dim.to_string(),
                "must be even for the two-head transformer encoder",
            ));
        }
        Ok(())
    }

    /// Parses config file text into `self`, later lines overriding earlier.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::MalformedLine {
                    line: idx + 1,
                    text: raw.to_string(),
                })?;
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::MalformedLine {
                    line: idx + 1,
                    text: raw.to_string(),
                });
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Full resolution: defaults, then the seed environment variable, then
    /// file text, then overrides; cross-validated at the end.
    pub fn resolve_with_env(
        file_text: Option<&str>,
        overrides: &[(String, String)],
        env_seed: Option<&str>,
    ) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(seed) = env_seed {
            cfg.set("seed", seed).map_err(|_| {
                bad(
                    "seed",
                    seed,
                    "environment variable PREFERDIFF_SEED must be an unsigned integer",
                )
            })?;
        }
        if let Some(text) = file_text {
            cfg.apply_file_text(text)?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`resolve_with_env`] against the real process environment.
    pub fn resolve(
        file_text: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig, ConfigError> {
        let env_seed = std::env::var("PREFERDIFF_SEED").ok();
        Self::resolve_with_env(file_text, overrides, env_seed.as_deref())
    }

    /// Deterministic `key = value` rendering; parsing it back reproduces the
    /// config exactly.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let encoder = match self.encoder {
            EncoderKind::Gru => "gru",
            EncoderKind::Transformer => "transformer",
        };
        let mode = match self.embedding_mode {
            EmbeddingMode::Id => "id",
            EmbeddingMode::Text => "text",
        };
        let _ = writeln!(out, "t_max = {}", self.t_max);
        let _ = writeln!(out, "beta_start = {}", self.beta_start);
        let _ = writeln!(out, "beta_end = {}", self.beta_end);
        let _ = writeln!(out, "dim = {}", self.dim);
        let _ = writeln!(out, "cond_dim = {}", self.cond_dim);
        let _ = writeln!(out, "time_dim = {}", self.time_dim);
        let _ = writeln!(out, "encoder = {encoder}");
        let _ = writeln!(out, "max_len = {}", self.max_len);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "measure = {}", self.measure);
        let _ = writeln!(out, "negatives = {}", self.negatives);
        let _ = writeln!(out, "ddim_steps = {}", self.ddim_steps);
        let _ = writeln!(out, "valid_ddim_steps = {}", self.valid_ddim_steps);
        let _ = writeln!(out, "guidance_w = {}", self.guidance_w);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "patience = {}", self.patience);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "p_uncond = {}", self.p_uncond);
        if let Some(path) = &self.data_path {
            let _ = writeln!(out, "data_path = {path}");
        }
        if let Some(path) = &self.embeddings_path {
            let _ = writeln!(out, "embeddings_path = {path}");
        }
        let _ = writeln!(out, "embedding_mode = {mode}");
        let _ = writeln!(out, "min_count = {}", self.min_count);
        let _ = writeln!(
            out,
            "split = {}:{}:{}",
            self.split.0, self.split.1, self.split.2
        );
        let _ = writeln!(out, "train_windows = {}", self.train_windows);
        let _ = writeln!(out, "mask_history = {}", self.mask_history);
        let _ = writeln!(out, "synth_users = {}", self.synth_users);
        let _ = writeln!(out, "synth_items = {}", self.synth_items);
        let _ = writeln!(out, "synth_clusters = {}", self.synth_clusters);
        let _ = writeln!(out, "synth_latent_dim = {}", self.synth_latent_dim);
        let _ = writeln!(out, "synth_noise = {}", self.synth_noise);
        let _ = writeln!(out, "synth_min_len = {}", self.synth_min_len);
        let _ = writeln!(out, "synth_max_len = {}", self.synth_max_len);
        let _ = writeln!(out, "threads = {}", self.threads);
        out
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            measure: self.measure,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..OptimizerConfig::default()
        }
    }

    /// Sampler settings at the full configured step count (final evaluation)
    /// or the reduced count (per-epoch validation).
    pub fn sampler_config(&self, reduced: bool) -> SamplerConfig {
        SamplerConfig {
            ddim_steps: if reduced {
                self.valid_ddim_steps
            } else {
                self.ddim_steps
            },
            guidance_weight: self.guidance_w,
            seed: self.seed,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            loss: self.loss_config(),
            optimizer: self.optimizer_config(),
            p_uncond: self.p_uncond,
            batch_size: self.batch_size,
            negatives: self.negatives,
            epochs: self.epochs,
            patience: self.patience,
            start_epoch: 0,
            seed: self.seed,
            valid_sampler: self.sampler_config(true),
            mask_history: self.mask_history,
        }
    }

    pub fn synth_config(&self) -> crate::data::SynthConfig {
        crate::data::SynthConfig {
            users: self.synth_users,
            items: self.synth_items,
            clusters: self.synth_clusters,
            latent_dim: self.synth_latent_dim,
            noise: self.synth_noise,
            min_len: self.synth_min_len,
            max_len: self.synth_max_len,
            seed: self.seed,
        }
    }
}
