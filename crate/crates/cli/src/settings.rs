use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Options shared by every subcommand. Each may also come from the TOML file
/// given by `--config`; flags win over the file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// TOML file with any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// gender | ethnicity | religion | nationality (default: the lexicon header).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    /// Split config file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
    /// Template set for `measure`: all | train | test.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<String>,
    /// cache:<path> | synthetic:<spec> | http:<url>
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    /// masked | infill_fewshot
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_token: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Refine-layer checkpoint to apply.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// Hidden width of the refine layer (default 2k).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Request timeout of the HTTP backend.
    #[arg(long, env = "REFINE_HTTP_TIMEOUT_MS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub http_timeout_ms: Option<u64>,
    /// Multiple-choice items (JSON Lines).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcq: Option<PathBuf>,
    /// Specified questions (JSON Lines).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specified: Option<PathBuf>,
    /// Report to chart (left panel when `--after` is given).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub before: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub after: Option<PathBuf>,
}

macro_rules! merge {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

impl Settings {
    /// Fills unset options from the `--config` file, if any.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let file: Settings = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge!(
            self, file, lexicon, category, split, side, backend, style, mask_token, k, refine,
            out, seed, jobs, steps, lr, batch, hidden, clip, eval_every, checkpoint_every, mcq,
            specified, before, after, http_timeout_ms
        );
        Ok(self)
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("--out is required".into()))
    }

    pub fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        v.as_ref()
            .ok_or_else(|| CliError::Config(format!("--{flag} is required")))
    }

    /// Writes the effective options to `<out>/effective_config.toml`.
    pub fn echo(&self, out: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
        let text = toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))?;
        let path = out.join("effective_config.toml");
        std::fs::write(&path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
