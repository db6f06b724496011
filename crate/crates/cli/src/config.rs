use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sig_core::inference::InferenceMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Mode {
    #[value(name = "sig")]
    #[serde(rename = "sig")]
    Sig,
    #[value(name = "sig_d")]
    #[serde(rename = "sig_d")]
    SigD,
}

impl From<Mode> for InferenceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Sig => InferenceMode::Sig,
            Mode::SigD => InferenceMode::SigD,
        }
    }
}

/// Options shared by every command. Values in `--config` win over flags.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSON file with any of these options, overriding the flags.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Normalized corpus directory.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,

    /// Split file written by `sig split`.
    #[arg(long, global = true)]
    pub splits: Option<PathBuf>,

    /// Fold index within the split file.
    #[arg(long, global = true)]
    pub fold: Option<usize>,

    #[arg(long, global = true)]
    pub template: Option<String>,

    #[arg(long, global = true)]
    pub backend: Option<String>,

    /// Number of cross-domain folds.
    #[arg(long, global = true)]
    pub folds: Option<usize>,

    /// Test novels per cross-domain fold.
    #[arg(long, global = true)]
    pub test_novels: Option<usize>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, value_enum, global = true)]
    pub mode: Option<Mode>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Model checkpoint directory.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, global = true)]
    pub epochs: Option<usize>,

    #[arg(long, global = true)]
    pub batch_size: Option<usize>,

    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,

    /// Source token budget.
    #[arg(long, global = true)]
    pub budget: Option<usize>,

    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,

    #[arg(long, global = true)]
    pub hidden_dim: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl RunConfig {
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(path) = self.config.clone() {
            let raw = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
            let file: RunConfig =
                serde_json::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
            overlay!(
                self, file, corpus, splits, fold, template, backend, folds, test_novels, seed, mode, out, checkpoint,
                epochs, batch_size, learning_rate, budget, embed_dim, hidden_dim
            );
        }
        if let Some(t) = &self.template {
            if sig_core::templates::find_template(t).is_none() {
                bail!("unknown template `{t}`");
            }
        }
        if let Some(b) = &self.backend {
            if b != sig_core::backend::tiny::KIND {
                bail!("unknown backend `{b}`; available: {}", sig_core::backend::tiny::KIND);
            }
        }
        Ok(self)
    }

    pub fn corpus(&self) -> Result<&Path> {
        required(&self.corpus, "--corpus")
    }

    pub fn splits(&self) -> Result<&Path> {
        required(&self.splits, "--splits")
    }

    pub fn out(&self) -> Result<&Path> {
        required(&self.out, "--out")
    }

    pub fn checkpoint(&self) -> Result<&Path> {
        required(&self.checkpoint, "--checkpoint")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    match value {
        Some(p) => Ok(p),
        None => bail!("missing {flag}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 7, "mode": "sig_d", "template": "bare"}"#).unwrap();
        let cfg = RunConfig {
            config: Some(path),
            seed: Some(1),
            fold: Some(2),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.fold, Some(2));
        assert_eq!(cfg.mode, Some(Mode::SigD));
    }

    #[test]
    fn rejects_unknown_names() {
        let bad = RunConfig {
            template: Some("nope".into()),
            ..Default::default()
        };
        assert!(bad.resolve().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"colour": "red"}"#).unwrap();
        assert!(RunConfig { config: Some(path), ..Default::default() }.resolve().is_err());
    }
}
