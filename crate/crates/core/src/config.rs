//! Training configuration: defaults, validation and the config-file loader.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// How the learnable prompt contexts are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextInit {
    /// Zero-mean Gaussian, standard deviation 0.02.
    #[default]
    Gaussian,
    /// Token embeddings of "a photo of a"; remaining positions fall back to Gaussian.
    Template,
}

/// A fully resolved, validated training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub context_length: usize,
    pub temperature: f64,
    pub entropy_weight: f64,
    pub kappa_lower: f64,
    pub kappa_upper: f64,
    pub kappa_known: f64,
    pub learning_rate: f64,
    pub total_iterations: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub bias_hidden: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Separate known/unknown prompt contexts. `false` shares `s` for both.
    pub separate_prompts: bool,
    /// `false` pins the domain bias to zero and never trains the bias network.
    pub use_bias_net: bool,
    pub context_init: ContextInit,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

/// Config as read from a file or assembled from flags; absent fields take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialTrainConfig {
    pub batch_size: Option<usize>,
    pub context_length: Option<usize>,
    pub temperature: Option<f64>,
    pub entropy_weight: Option<f64>,
    pub kappa_lower: Option<f64>,
    pub kappa_upper: Option<f64>,
    pub kappa_known: Option<f64>,
    pub learning_rate: Option<f64>,
    pub total_iterations: Option<usize>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    pub bias_hidden: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub separate_prompts: Option<bool>,
    pub use_bias_net: Option<bool>,
    pub context_init: Option<ContextInit>,
    pub checkpoint_every: Option<usize>,
}

/// Keys a config file must set explicitly so every experiment records them.
pub const MANDATORY_FILE_KEYS: [&str; 3] = ["kappa_lower", "kappa_upper", "kappa_known"];

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            context_length: 4,
            temperature: 0.01,
            entropy_weight: 1.0,
            kappa_lower: 0.4,
            kappa_upper: 0.6,
            kappa_known: 0.6,
            learning_rate: 1e-3,
            total_iterations: 2000,
            weight_decay: 0.01,
            seed: 0,
            bias_hidden: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            separate_prompts: true,
            use_bias_net: true,
            context_init: ContextInit::Gaussian,
            checkpoint_every: 500,
        }
    }
}

impl From<TrainConfig> for PartialTrainConfig {
    fn from(c: TrainConfig) -> Self {
        PartialTrainConfig {
            batch_size: Some(c.batch_size),
            context_length: Some(c.context_length),
            temperature: Some(c.temperature),
            entropy_weight: Some(c.entropy_weight),
            kappa_lower: Some(c.kappa_lower),
            kappa_upper: Some(c.kappa_upper),
            kappa_known: Some(c.kappa_known),
            learning_rate: Some(c.learning_rate),
            total_iterations: Some(c.total_iterations),
            weight_decay: Some(c.weight_decay),
            seed: Some(c.seed),
            bias_hidden: Some(c.bias_hidden),
            beta1: Some(c.beta1),
            beta2: Some(c.beta2),
            adam_eps: Some(c.adam_eps),
            separate_prompts: Some(c.separate_prompts),
            use_bias_net: Some(c.use_bias_net),
            context_init: Some(c.context_init),
            checkpoint_every: Some(c.checkpoint_every),
        }
    }
}

impl PartialTrainConfig {
    /// Overlays `other` on top of `self`: fields set in `other` win.
    pub fn overlay(mut self, other: PartialTrainConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            batch_size, context_length, temperature, entropy_weight, kappa_lower, kappa_upper,
            kappa_known, learning_rate, total_iterations, weight_decay, seed, bias_hidden, beta1,
            beta2, adam_eps, separate_prompts, use_bias_net, context_init, checkpoint_every
        );
        self
    }
}

/// Fills defaults and checks every invariant.
pub fn validate_config(partial: PartialTrainConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: partial.batch_size.unwrap_or(d.batch_size),
        context_length: partial.context_length.unwrap_or(d.context_length),
        temperature: partial.temperature.unwrap_or(d.temperature),
        entropy_weight: partial.entropy_weight.unwrap_or(d.entropy_weight),
        kappa_lower: partial.kappa_lower.unwrap_or(d.kappa_lower),
        kappa_upper: partial.kappa_upper.unwrap_or(d.kappa_upper),
        kappa_known: partial
            .kappa_known
            .or(partial.kappa_upper)
            .unwrap_or(d.kappa_known),
        learning_rate: partial.learning_rate.unwrap_or(d.learning_rate),
        total_iterations: partial.total_iterations.unwrap_or(d.total_iterations),
        weight_decay: partial.weight_decay.unwrap_or(d.weight_decay),
        seed: partial.seed.unwrap_or(d.seed),
        bias_hidden: partial.bias_hidden.unwrap_or(d.bias_hidden),
        beta1: partial.beta1.unwrap_or(d.beta1),
        beta2: partial.beta2.unwrap_or(d.beta2),
        adam_eps: partial.adam_eps.unwrap_or(d.adam_eps),
        separate_prompts: partial.separate_prompts.unwrap_or(d.separate_prompts),
        use_bias_net: partial.use_bias_net.unwrap_or(d.use_bias_net),
        context_init: partial.context_init.unwrap_or(d.context_init),
        checkpoint_every: partial.checkpoint_every.unwrap_or(d.checkpoint_every),
    };
    cfg.check()?;
    Ok(cfg)
}

fn finite_nonneg(name: &str, x: f64) -> Result<()> {
    if !x.is_finite() || x < 0.0 {
        return Err(validation(format!("{name} must be finite and non-negative, got {x}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(validation("batch_size must be at least 1"));
        }
        if self.context_length < 1 {
            return Err(validation("context_length must be at least 1"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        finite_nonneg("entropy_weight", self.entropy_weight)?;
        // Thresholds outside (0, 1) switch their rule off (e.g. kappa_known > 1
        // disables known pseudo-labels), so only finiteness and order are enforced.
        finite_nonneg("kappa_lower", self.kappa_lower)?;
        finite_nonneg("kappa_upper", self.kappa_upper)?;
        finite_nonneg("kappa_known", self.kappa_known)?;
        if self.kappa_lower > self.kappa_upper {
            return Err(validation(format!(
                "kappa_lower ({}) must not exceed kappa_upper ({})",
                self.kappa_lower, self.kappa_upper
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(validation("learning_rate must be positive"));
        }
        if self.total_iterations < 1 {
            return Err(validation("total_iterations must be at least 1"));
        }
        finite_nonneg("weight_decay", self.weight_decay)?;
        if self.bias_hidden < 1 {
            return Err(validation("bias_hidden must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(validation(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(validation("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// Parses TOML config text. Keys mirror [`TrainConfig`] field names.
pub fn parse_config_text(text: &str) -> Result<PartialTrainConfig> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| validation(format!("config is not valid TOML: {e}")))?;
    for key in MANDATORY_FILE_KEYS {
        if !table.contains_key(key) {
            return Err(Error::MissingKey(key.to_string()));
        }
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| validation(format!("bad config: {e}")))
}

/// Reads a config file without resolving defaults, so flags can still overlay it.
pub fn read_config_file(path: &Path) -> Result<PartialTrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}

/// Renders a resolved config in the same format the loader reads.
pub fn render_config(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}
