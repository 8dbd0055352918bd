//! Run configuration merged from defaults, an optional JSON file, and
//! command-line flags — in that order, later layers winning.
//!
//! The file holds one optional section per training stage. Every field is
//! optional; absent fields keep the stage defaults, so a config that only
//! says `{"downstream": {"dim": 32}}` is valid. Unknown keys anywhere are
//! rejected so a typo cannot silently fall back to a default.

use std::path::Path;

use clinembed::downstream::{DownstreamConfig, Task, Variant};
use clinembed::pretrain::{Objective, PretrainConfig};
use clinembed::tsne::TsneConfig;
use clinembed::{Error, Result};
use serde::{Deserialize, Serialize};

/// Copy `$field` out of an overrides struct into a full config when set.
macro_rules! apply_fields {
    ($src:expr, $dst:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $src.$field {
            $dst.$field = v;
        })+
    };
}

/// Keep the later layer's value wherever it is set.
macro_rules! merge_fields {
    ($dst:expr, $src:expr, $($field:ident),+ $(,)?) => {
        $(if $src.$field.is_some() {
            $dst.$field = $src.$field;
        })+
    };
}

// ── Per-stage override sections ────────────────────────────────────────

/// Partial pretraining config; applies on top of the objective defaults.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOverrides {
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub use_previous: Option<bool>,
}

impl PretrainOverrides {
    pub fn apply(&self, config: &mut PretrainConfig) {
        apply_fields!(
            self, config, batch_size, lr, dim, depth, heads, max_epochs, patience, use_previous
        );
    }

    /// Layer `later` on top of `self` (later wins where set).
    pub fn merge(&mut self, later: &PretrainOverrides) {
        merge_fields!(
            self, later, batch_size, lr, dim, depth, heads, max_epochs, patience, use_previous
        );
    }
}

/// Partial fine-tuning config; applies on top of [`DownstreamConfig::default_for`].
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamOverrides {
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub label_fraction: Option<f64>,
    pub freeze_tokenizer: Option<bool>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

impl DownstreamOverrides {
    pub fn apply(&self, config: &mut DownstreamConfig) {
        apply_fields!(
            self,
            config,
            batch_size,
            lr,
            dim,
            depth,
            heads,
            label_fraction,
            freeze_tokenizer,
            max_epochs,
            patience,
        );
    }

    pub fn merge(&mut self, later: &DownstreamOverrides) {
        merge_fields!(
            self,
            later,
            batch_size,
            lr,
            dim,
            depth,
            heads,
            label_fraction,
            freeze_tokenizer,
            max_epochs,
            patience,
        );
    }
}

/// Partial t-SNE config for the probe map.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneOverrides {
    pub perplexity: Option<f64>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl TsneOverrides {
    pub fn apply(&self, config: &mut TsneConfig) {
        apply_fields!(self, config, perplexity, iterations, learning_rate);
    }
}

// ── Merged document ────────────────────────────────────────────────────

/// All stage configs in one JSON document. CBOW and MLM pretraining get
/// separate sections because their defaults differ.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pretrain_cbow: PretrainOverrides,
    pub pretrain_mlm: PretrainOverrides,
    pub downstream: DownstreamOverrides,
    pub tsne: TsneOverrides,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("run config {}: {e}", path.display())))
    }

    /// Load `path` if given, else start from an all-default config.
    pub fn load_optional(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Objective defaults with this config's overrides applied.
    pub fn pretrain_config(&self, objective: Objective) -> PretrainConfig {
        let (mut config, section) = match objective {
            Objective::Cbow => (PretrainConfig::cbow_default(), &self.pretrain_cbow),
            Objective::Mlm => (PretrainConfig::mlm_default(), &self.pretrain_mlm),
        };
        section.apply(&mut config);
        config
    }

    /// Fine-tuning defaults for `model`/`task` with overrides applied.
    pub fn downstream_config(&self, model: Variant, task: Task) -> DownstreamConfig {
        let mut config = DownstreamConfig::default_for(model, task);
        self.downstream.apply(&mut config);
        config
    }

    /// t-SNE defaults for `seed` with overrides applied.
    pub fn tsne_config(&self, seed: u64) -> TsneConfig {
        let mut config = TsneConfig::with_seed(seed);
        self.tsne.apply(&mut config);
        config
    }
}
