//! Optional TOML configuration. Values given on the command line win over
//! the file, which wins over built-in defaults.

use std::path::Path;

use platesr::schedule::rescaled_endpoints;
use platesr::trainer::TrainConfig;
use platesr::{DenoiserConfig, NoiseSchedule};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    /// `desk` (default) or `compact`.
    pub preset: Option<String>,
    pub base_channels: Option<usize>,
    pub channel_multipliers: Option<Vec<usize>>,
    pub blocks_per_level: Option<usize>,
    pub time_embed_dim: Option<usize>,
    pub norm_groups: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub timesteps: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The file's `[train]` table over [`TrainConfig::default`].
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        match &self.train {
            None => Ok(TrainConfig::default()),
            Some(t) => t
                .clone()
                .try_into()
                .map_err(|e| CliError::Config(format!("[train]: {e}"))),
        }
    }
}

impl DenoiserSection {
    /// Fields set in `over` replace those in `self`.
    pub fn overlay(&self, over: &DenoiserSection) -> DenoiserSection {
        DenoiserSection {
            preset: over.preset.clone().or_else(|| self.preset.clone()),
            base_channels: over.base_channels.or(self.base_channels),
            channel_multipliers: over.channel_multipliers.clone().or_else(|| self.channel_multipliers.clone()),
            blocks_per_level: over.blocks_per_level.or(self.blocks_per_level),
            time_embed_dim: over.time_embed_dim.or(self.time_embed_dim),
            norm_groups: over.norm_groups.or(self.norm_groups),
            seed: over.seed.or(self.seed),
        }
    }

    pub fn resolve(&self, timesteps: Option<usize>) -> Result<DenoiserConfig, CliError> {
        let mut c = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => DenoiserConfig::desk(),
            "compact" => DenoiserConfig::compact(),
            other => return Err(CliError::Config(format!("unknown denoiser preset {other:?}"))),
        };
        if let Some(v) = self.base_channels {
            c.base_channels = v;
        }
        if let Some(v) = &self.channel_multipliers {
            c.channel_multipliers = v.clone();
        }
        if let Some(v) = self.blocks_per_level {
            c.blocks_per_level = v;
        }
        if let Some(v) = self.time_embed_dim {
            c.time_embed_dim = v;
        }
        if let Some(v) = self.norm_groups {
            c.norm_groups = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(t) = timesteps {
            c.num_timesteps = t;
        }
        c.validate()?;
        Ok(c)
    }
}

impl ScheduleSection {
    pub fn overlay(&self, over: &ScheduleSection) -> ScheduleSection {
        ScheduleSection {
            timesteps: over.timesteps.or(self.timesteps),
            beta_start: over.beta_start.or(self.beta_start),
            beta_end: over.beta_end.or(self.beta_end),
        }
    }

    /// Unset endpoints default to the rescaled ones for `timesteps`.
    pub fn build(&self, timesteps: usize) -> Result<NoiseSchedule, CliError> {
        let (start, end) = match (self.beta_start, self.beta_end) {
            (Some(start), Some(end)) => (start, end),
            (start, end) => {
                let (s, e) = rescaled_endpoints(timesteps)?;
                (start.unwrap_or(s), end.unwrap_or(e))
            }
        };
        Ok(NoiseSchedule::linear(timesteps, start, end)?)
    }
}
