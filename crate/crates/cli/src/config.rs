use std::path::Path;

use serde::{Deserialize, Serialize};
use weaver_core::clustering::ThresholdMode;
use weaver_core::ws::FitConfig;
use weaver_core::{Error, PreprocessConfig, Result, WeaverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSettings {
    pub n_clusters: usize,
    pub threshold_mode: ThresholdMode,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            n_clusters: 1,
            threshold_mode: ThresholdMode::Global,
        }
    }
}

/// Everything that shapes a run. Paths are deliberately absent so the hash
/// only reflects settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dev_fraction: f64,
    pub exclude_dev: bool,
    pub prior: Option<f64>,
    pub preprocess: PreprocessConfig,
    pub fit: FitConfig,
    pub strategies: Vec<String>,
    pub ks: Vec<usize>,
    /// Monte-Carlo trials for best-of-k below K; 0 disables.
    pub trials: usize,
    pub clusters: ClusterSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dev_fraction: 0.01,
            exclude_dev: false,
            prior: None,
            preprocess: PreprocessConfig::default(),
            fit: FitConfig::default(),
            strategies: ["weaver", "majority", "naive", "first"].map(String::from).to_vec(),
            ks: vec![1],
            trials: 0,
            clusters: ClusterSettings::default(),
        }
    }
}

impl RunConfig {
    /// Reads TOML or JSON by extension; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
        }
    }

    /// The library pipeline config; the run seed drives both the dev split
    /// and the fit initialization.
    pub fn weaver(&self) -> WeaverConfig {
        WeaverConfig {
            preprocess: self.preprocess.clone(),
            fit: FitConfig {
                seed: self.seed,
                ..self.fit.clone()
            },
            dev_fraction: self.dev_fraction,
            seed: self.seed,
            prior: self.prior,
        }
    }
}
