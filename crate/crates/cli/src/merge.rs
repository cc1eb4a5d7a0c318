//! Train configuration resolution: defaults, then config file, then flags.

use clap::Args;
use serde::Deserialize;
use std::path::Path;
use stdpgan_core::training::TrainConfig;

use crate::CliError;

/// Config-file fields; every entry optional so files can be partial.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub learning_rate: Option<f64>,
    pub k_critic: Option<usize>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    /// "inf" or a number.
    pub budget_eps: Option<EpsField>,
    pub q: Option<f64>,
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    pub clip_bound: Option<f64>,
    /// Negative or zero disables weight clipping.
    pub weight_clip: Option<f64>,
    pub seed: Option<u64>,
    pub attention_enabled: Option<bool>,
    pub account_generator_steps: Option<bool>,
    pub kernel_mean_init: Option<bool>,
    pub critic_warmup: Option<bool>,
    pub window_len: Option<usize>,
    pub horizon: Option<usize>,
    pub alpha_k: Option<f64>,
    pub beta_k: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum EpsField {
    Num(f64),
    Text(String),
}

impl EpsField {
    fn value(&self) -> Result<f64, CliError> {
        match self {
            EpsField::Num(v) => Ok(*v),
            EpsField::Text(t) if t == "inf" => Ok(f64::INFINITY),
            EpsField::Text(t) => t
                .parse()
                .map_err(|_| CliError::Validation(format!("bad budget_eps '{}'", t))),
        }
    }
}

impl FileConfig {
    pub fn parse(path: &Path, bytes: &[u8]) -> Result<FileConfig, CliError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| CliError::Validation(format!("{}: not UTF-8", path.display())))?;
        let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
        if is_json {
            serde_json::from_str(text)
                .map_err(|e| CliError::Validation(format!("{}: {}", path.display(), e)))
        } else {
            toml::from_str(text)
                .map_err(|e| CliError::Validation(format!("{}: {}", path.display(), e)))
        }
    }
}

/// Command-line overrides; every flag optional.
#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// Privacy budget epsilon; "inf" disables differential privacy.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub k_critic: Option<usize>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    /// Critic weight clip bound; 0 disables.
    #[arg(long)]
    pub weight_clip: Option<f64>,
    #[arg(long)]
    pub attention: bool,
    #[arg(long)]
    pub account_generator: bool,
    /// Force the critic warmup schedule on or off.
    #[arg(long)]
    pub critic_warmup: Option<bool>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub alpha_k: Option<f64>,
    #[arg(long)]
    pub beta_k: Option<f64>,
}

/// Fully resolved training settings.
pub struct Settings {
    pub train: TrainConfig,
    pub window_len: usize,
    pub horizon: usize,
    /// None derives the kernel width from the data (mean nearest-neighbor
    /// distance).
    pub alpha_k: Option<f64>,
    pub beta_k: f64,
}

pub fn resolve(file: FileConfig, flags: &TrainOverrides) -> Result<Settings, CliError> {
    let mut cfg = TrainConfig::default();

    if let Some(v) = file.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = file.k_critic {
        cfg.k_critic = v;
    }
    if let Some(v) = file.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = file.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = &file.budget_eps {
        cfg.budget_eps = v.value()?;
    }
    if let Some(v) = file.q {
        cfg.q = v;
    }
    if let Some(v) = file.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = file.delta {
        cfg.delta = v;
    }
    if let Some(v) = file.clip_bound {
        cfg.clip_bound = v;
    }
    if let Some(v) = file.weight_clip {
        cfg.weight_clip = if v > 0.0 { Some(v) } else { None };
    }
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.attention_enabled {
        cfg.attention_enabled = v;
    }
    if let Some(v) = file.account_generator_steps {
        cfg.account_generator_steps = v;
    }
    if let Some(v) = file.kernel_mean_init {
        cfg.kernel_mean_init = v;
    }
    if let Some(v) = file.critic_warmup {
        cfg.critic_warmup = Some(v);
    }

    if let Some(text) = &flags.eps {
        cfg.budget_eps = if text == "inf" {
            f64::INFINITY
        } else {
            text.parse()
                .map_err(|_| CliError::Validation(format!("bad --eps '{}'", text)))?
        };
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = flags.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.k_critic {
        cfg.k_critic = v;
    }
    if let Some(v) = flags.q {
        cfg.q = v;
    }
    if let Some(v) = flags.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = flags.delta {
        cfg.delta = v;
    }
    if let Some(v) = flags.clip {
        cfg.clip_bound = v;
    }
    if let Some(v) = flags.weight_clip {
        cfg.weight_clip = if v > 0.0 { Some(v) } else { None };
    }
    if flags.attention {
        cfg.attention_enabled = true;
    }
    if flags.account_generator {
        cfg.account_generator_steps = true;
    }
    if let Some(v) = flags.critic_warmup {
        cfg.critic_warmup = Some(v);
    }

    let window_len = flags.window.or(file.window_len).unwrap_or(6);
    let horizon = flags.horizon.or(file.horizon).unwrap_or(3);
    if window_len == 0 {
        return Err(CliError::Validation("window must be >= 1".into()));
    }
    Ok(Settings {
        train: cfg,
        window_len,
        horizon,
        alpha_k: flags.alpha_k.or(file.alpha_k),
        beta_k: flags.beta_k.or(file.beta_k).unwrap_or(0.05),
    })
}
