//! Pipeline configuration file (TOML). The config owns everything a rerun
//! needs to be reproducible: model shape, context length, epsilon, seed,
//! routing defaults and default artifact paths. Flags override paths and
//! routing choices per invocation.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::CliError;
use gradsift_core::metrics::{Metric, EPSILON};
use gradsift_core::ProbeModelConfig;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub rng_seed: u64,
    #[serde(default = "default_context_length")]
    pub context_length: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub model: ModelSection,
    #[serde(default)]
    pub routing: RoutingSection,
    #[serde(default)]
    pub paths: PathsSection,
}

fn default_context_length() -> usize {
    2048
}

fn default_epsilon() -> f64 {
    EPSILON
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden_dim: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSection {
    /// gini | kurtosis | cv | l2
    pub metric: Option<String>,
    #[serde(default)]
    pub normalized: bool,
    /// median | quantile
    pub rule: Option<String>,
    pub rl_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub dump: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        config.validate(path)?;
        Ok(config)
    }

    fn validate(&self, path: &Path) -> Result<(), CliError> {
        let fail = |message: String| {
            Err(CliError::Validation(format!(
                "{}: {message}",
                path.display()
            )))
        };
        if self.context_length < 2 {
            return fail(format!(
                "context_length must be >= 2, got {}",
                self.context_length
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            ));
        }
        if let Some(metric) = &self.routing.metric {
            if Metric::from_str(metric).is_err() {
                return fail(format!("routing.metric: unknown metric {metric:?}"));
            }
        }
        match self.routing.rule.as_deref() {
            None | Some("median") => {}
            Some("quantile") => {
                let f = self.routing.rl_fraction;
                if !f.is_some_and(|f| f > 0.0 && f < 1.0) {
                    return fail(format!(
                        "routing.rl_fraction must lie in (0,1) when rule=quantile, got {f:?}"
                    ));
                }
            }
            Some(other) => {
                return fail(format!(
                    "routing.rule: expected median|quantile, got {other:?}"
                ))
            }
        }
        Ok(())
    }

    /// Probe model shape; the probe context is the corpus context length.
    pub fn model_config(&self, seed_override: Option<u64>) -> ProbeModelConfig {
        ProbeModelConfig {
            num_layers: self.model.num_layers,
            model_dim: self.model.model_dim,
            num_heads: self.model.num_heads,
            ffn_hidden_dim: self.model.ffn_hidden_dim,
            vocab_size: self.model.vocab_size,
            max_context: self.context_length,
            rng_seed: seed_override.unwrap_or(self.rng_seed),
        }
    }
}

/// Flag value, else the config default, else a validation error telling the
/// user both spellings.
pub fn resolve_path(
    flag: Option<PathBuf>,
    fallback: Option<&PathBuf>,
    what: &str,
    key: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.cloned()).ok_or_else(|| {
        CliError::Validation(format!(
            "no {what} given: pass it on the command line or set [paths].{key} in the config"
        ))
    })
}
