//! Run configuration: TOML file plus `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budget::LambdaSchedule;
use crate::data::AugmentationConfig;
use crate::error::{PvqaeError, Result};
use crate::prior::Traversal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Images are resized to `image_size × image_size`.
    pub image_size: usize,
    /// Restrict loading to these categories (empty = all).
    pub categories: Vec<String>,
    pub augmentation: AugmentationConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            categories: Vec::new(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

/// Architecture of the encoder, decoder, gate and discriminator.
///
/// The finest grid is `coarse_grid · 2^(levels-1)`; each embedding covers an
/// `(image_size / grid)²` pixel patch of the input (the "patch footprint" reading of the
/// per-resolution embedding size), carrying one `code_dim`-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub coarse_grid: usize,
    pub levels: usize,
    pub code_dim: usize,
    /// Width of the encoder trunk: `[first downsampling stage, hierarchy stages]`.
    pub encoder_channels: [usize; 2],
    /// Width of the decoder: `[finest-grid trunk, upsampling stages]`.
    pub decoder_channels: [usize; 2],
    pub disc_channels: usize,
    /// Hidden width of the routing gate; defaults to `4 · levels · code_dim`.
    pub gate_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            coarse_grid: 4,
            levels: 3,
            code_dim: 64,
            encoder_channels: [32, 64],
            decoder_channels: [64, 32],
            disc_channels: 16,
            gate_hidden: None,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self, level: usize) -> usize {
        self.coarse_grid << level
    }

    pub fn finest_grid(&self) -> usize {
        self.grid(self.levels - 1)
    }

    pub fn gate_hidden(&self) -> usize {
        self.gate_hidden.unwrap_or(4 * self.levels * self.code_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// Codes per level.
    pub size: usize,
    pub beta: f64,
    /// Codes not nearest to any embedding for this many steps are reset to a recent encoder output; 0 disables.
    pub restart_after: usize,
    /// Codebook learning rate as a multiple of `train.lr`.
    pub lr_scale: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            size: 512,
            beta: 0.25,
            restart_after: 20,
            lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    /// Gumbel noise during training; evaluation is always noiseless.
    pub gumbel_noise: bool,
    /// Leading fraction of training that routes every cell to a uniformly random level with the gate frozen.
    pub explore_frac: f64,
    /// Learning rate of the gate relative to `train.lr`.
    pub gate_lr_scale: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            tau_start: 1.0,
            tau_end: 0.1,
            gumbel_noise: true,
            explore_frac: 0.0,
            gate_lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    /// Cost multiplier per level step; defaults to `2^(levels-1)`.
    pub cost_factor: Option<f64>,
    pub lambda_max: f64,
    pub schedule: LambdaSchedule,
    pub epsilon_floor: f64,
    /// Divide by the cross-cell normalized entropy (default) instead of the raw entropy.
    pub normalized_entropy: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            cost_factor: None,
            lambda_max: 1.25,
            schedule: LambdaSchedule::Linear,
            epsilon_floor: 1e-3,
            normalized_entropy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    pub enabled: bool,
    pub weight: f64,
    /// Fraction of training steps before adversarial terms switch on.
    pub warmup_frac: f64,
    pub lr: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            weight: 0.1,
            warmup_frac: 0.25,
            lr: 2e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Score with the budget prior; `false` reproduces the "no priors" arm.
    pub enabled: bool,
    /// One CLS token per category; `false` shares a single token (universal prior).
    pub per_class: bool,
    pub traversal: Traversal,
    pub dim: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            per_class: true,
            traversal: Traversal::Spiral,
            dim: 64,
            heads: 4,
            steps: 1500,
            batch_size: 16,
            lr: 2e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Gaussian smoothing of score maps; defaults to `4 · image_size / 256`. Zero disables.
    pub smoothing_sigma: Option<f64>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { smoothing_sigma: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 2e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub codebook: CodebookConfig,
    pub routing: RoutingConfig,
    pub budget: BudgetConfig,
    pub adversarial: AdversarialConfig,
    pub prior: PriorConfig,
    pub scoring: ScoringConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            codebook: CodebookConfig::default(),
            routing: RoutingConfig::default(),
            budget: BudgetConfig::default(),
            adversarial: AdversarialConfig::default(),
            prior: PriorConfig::default(),
            scoring: ScoringConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables as needed.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| PvqaeError::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PvqaeError::Config(format!("override {key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides (which win), and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| PvqaeError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PvqaeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PvqaeError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PvqaeError::Config(e.to_string()))
    }

    /// `PVQAE_SEED` replaces the configured seed when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("PVQAE_SEED") {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| PvqaeError::Config(format!("PVQAE_SEED={v:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn cost_factor(&self) -> f64 {
        self.budget
            .cost_factor
            .unwrap_or_else(|| 2f64.powi(self.model.levels as i32 - 1))
    }

    pub fn smoothing_sigma(&self) -> f64 {
        self.scoring
            .smoothing_sigma
            .unwrap_or(4.0 * self.data.image_size as f64 / 256.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PvqaeError::Config(m));
        let m = &self.model;
        if m.levels < 1 || m.coarse_grid < 1 || m.code_dim < 1 {
            return bad(format!("model sizes must be positive: {m:?}"));
        }
        let size = self.data.image_size;
        let finest = m.finest_grid();
        if size % finest != 0 || !(size / finest).is_power_of_two() {
            return bad(format!(
                "image_size {size} must be a power-of-two multiple of the finest grid {finest}"
            ));
        }
        let cell = size / m.coarse_grid;
        if cell % 2 != 0 {
            return bad(format!("coarse cells of {cell} px must be even for the Haar transform"));
        }
        if self.codebook.size < 2 || !(self.codebook.beta >= 0.0) {
            return bad(format!("invalid codebook config {:?}", self.codebook));
        }
        let r = &self.routing;
        if !(r.tau_end > 0.0 && r.tau_start >= r.tau_end) {
            return bad(format!("temperatures must satisfy tau_start >= tau_end > 0: {r:?}"));
        }
        if !(0.0..1.0).contains(&r.explore_frac) {
            return bad(format!("routing.explore_frac must lie in [0, 1): {}", r.explore_frac));
        }
        if !(r.gate_lr_scale > 0.0) {
            return bad(format!("routing.gate_lr_scale must be positive: {}", r.gate_lr_scale));
        }
        if !(self.codebook.lr_scale > 0.0) {
            return bad(format!("codebook.lr_scale must be positive: {}", self.codebook.lr_scale));
        }
        if !(self.cost_factor() > 1.0) {
            return bad("cost_factor must exceed 1".into());
        }
        if !(self.budget.lambda_max >= 0.0) || !(self.budget.epsilon_floor > 0.0) {
            return bad(format!("invalid budget config {:?}", self.budget));
        }
        if !(0.0..=1.0).contains(&self.adversarial.warmup_frac) || !(self.adversarial.weight >= 0.0) {
            return bad(format!("invalid adversarial config {:?}", self.adversarial));
        }
        let p = &self.prior;
        if p.heads == 0 || p.dim % p.heads != 0 || p.batch_size == 0 {
            return bad(format!("prior dim {} must be divisible by heads {}", p.dim, p.heads));
        }
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return bad("train.steps and train.batch_size must be >= 1".into());
        }
        for (name, lr) in [("train.lr", self.train.lr), ("adversarial.lr", self.adversarial.lr), ("prior.lr", p.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive: {lr}"));
            }
        }
        if self.smoothing_sigma() < 0.0 {
            return bad("smoothing_sigma must be >= 0".into());
        }
        self.data.augmentation.validate()
    }
}
