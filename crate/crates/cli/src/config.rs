//! The run configuration document and its resolution against CLI flags.

use std::path::{Path, PathBuf};

use lscnn_core::synth::SynthConfig;
use lscnn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory; `--out` wins.
    pub out: Option<PathBuf>,
    /// Dataset directory holding `manifest.json`; defaults to `<out>/data`,
    /// where `gen-synth` writes.
    pub dataset: Option<PathBuf>,
    /// Manifest path; defaults to `<dataset>/manifest.json`.
    pub manifest: Option<PathBuf>,
    /// Overrides `train.seed` and `synth.seed` when set; `--seed` wins.
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

/// Flags that may override the document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// A configuration with every path made absolute and every override applied.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub out: PathBuf,
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    /// SHA-256 of the canonical JSON of `config`.
    pub digest: String,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Relative paths in a config file are taken relative to that file;
    /// relative flag paths to the working directory.
    pub fn resolve(mut self, config_path: Option<&Path>, flags: &Overrides) -> Result<Resolved, CliError> {
        let cwd = std::env::current_dir().map_err(|e| CliError::usage(format!("working directory: {e}")))?;
        let base = match config_path.and_then(Path::parent) {
            Some(p) if !p.as_os_str().is_empty() => absolute(&cwd, p),
            _ => cwd.clone(),
        };
        let out = match (&flags.out, &self.out) {
            (Some(o), _) => absolute(&cwd, o),
            (None, Some(o)) => absolute(&base, o),
            (None, None) => return Err(CliError::usage("no output directory: pass --out or set \"out\"")),
        };
        let dataset = self.dataset.as_ref().map_or_else(|| out.join("data"), |d| absolute(&base, d));
        let manifest = self
            .manifest
            .as_ref()
            .map_or_else(|| dataset.join("manifest.json"), |m| absolute(&base, m));
        if let Some(seed) = flags.seed.or(self.seed) {
            self.seed = Some(seed);
            self.train.seed = seed;
            self.synth.seed = seed;
        }
        self.out = Some(out.clone());
        self.dataset = Some(dataset.clone());
        self.manifest = Some(manifest.clone());
        self.train.validate().map_err(CliError::from)?;
        self.synth.cues.validate().map_err(CliError::from)?;
        let canonical = serde_json::to_vec(&self).expect("config serializes");
        let digest = hex::encode(Sha256::digest(&canonical));
        Ok(Resolved {
            config: self,
            out,
            dataset,
            manifest,
            digest,
        })
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
