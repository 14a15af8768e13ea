//! Experiment configuration file (TOML).
//!
//! ```toml
//! mode = "scratchpipe"          # nocache | static | strawman | scratchpipe | gpuonly
//! num_batches = 100
//! seed = 1
//! capacity_fraction = 0.05      # required by static, strawman, scratchpipe
//! policy = "lru"                # lru | lfu | random
//! static_source = "from-pdf"    # from-pdf | from-trace-profile
//! output_dir = "out"
//!
//! [model]
//! num_tables = 8
//! rows_per_table = 10000000
//! embedding_dim = 128
//! lookups_per_table = 20
//! batch_size = 2048
//!
//! [locality]
//! kind = "high"                 # random | low | medium | high | custom
//! # target_top2pct_mass = 0.6   # overrides the kind's anchor
//!
//! [hardware]                    # bandwidths in bytes/s, times in seconds
//! cpu_bw = 76.8e9
//!
//! [train]
//! gamma = 0.5
//! delta = 0.01
//! eta = 0.01
//! ```
//!
//! Every key is optional; omitted keys take the defaults above.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::HotSetSource;
use crate::controller::ReplacementPolicy;
use crate::cost::HardwareParams;
use crate::embedding::{fnv1a, SurrogateTrainConfig};
use crate::error::{Error, Result};
use crate::run::Mode;
use crate::workload::{LocalityKind, LocalityProfile, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalityConfig {
    pub kind: LocalityKind,
    pub target_top2pct_mass: Option<f64>,
}

impl Default for LocalityConfig {
    fn default() -> Self {
        Self {
            kind: LocalityKind::High,
            target_top2pct_mass: None,
        }
    }
}

impl LocalityConfig {
    pub fn profile(&self) -> LocalityProfile {
        let mut p = LocalityProfile::new(self.kind);
        if let Some(t) = self.target_top2pct_mass {
            p.target_top2pct_mass = t;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub num_batches: u64,
    pub seed: u64,
    pub capacity_fraction: Option<f64>,
    pub policy: ReplacementPolicy,
    pub static_source: HotSetSource,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub locality: LocalityConfig,
    pub hardware: HardwareParams,
    pub train: SurrogateTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Scratchpipe,
            num_batches: 100,
            seed: 1,
            capacity_fraction: Some(0.05),
            policy: ReplacementPolicy::Lru,
            static_source: HotSetSource::FromPdf,
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            locality: LocalityConfig::default(),
            hardware: HardwareParams::default(),
            train: SurrogateTrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hardware.validate()?;
        if self.mode == Mode::Reference {
            return Err(Error::Config("reference is not a simulation mode".into()));
        }
        self.capacity_fraction_for(self.mode).map(|_| ())
    }

    /// The cache fraction a mode needs; an error if the mode needs one and
    /// none is configured.
    pub fn capacity_fraction_for(&self, mode: Mode) -> Result<Option<f64>> {
        match mode {
            Mode::Static | Mode::Strawman | Mode::Scratchpipe => match self.capacity_fraction {
                Some(f) if f > 0.0 && f <= 1.0 => Ok(Some(f)),
                Some(f) => Err(Error::Config(format!(
                    "capacity_fraction must lie in (0, 1], got {f}"
                ))),
                None => Err(Error::Config(format!("mode {mode} needs capacity_fraction"))),
            },
            _ => Ok(None),
        }
    }

    /// Hex FNV-1a digest of the canonical serialization.
    pub fn digest(&self) -> String {
        format!("{:016x}", fnv1a(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.model.embedding_dim, 128);
        assert_eq!(cfg.hardware.pcie_bw, 16e9);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_overrides() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            mode = "static"
            capacity_fraction = 0.1
            policy = "lfu"
            [model]
            num_tables = 2
            [locality]
            kind = "custom"
            target_top2pct_mass = 0.6
            [hardware]
            t_mlp = 0.001
            "#,
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::Static);
        assert_eq!(cfg.policy, ReplacementPolicy::Lfu);
        assert_eq!(cfg.model.num_tables, 2);
        assert_eq!(cfg.model.rows_per_table, 10_000_000);
        assert_eq!(cfg.locality.profile().target_top2pct_mass, 0.6);
        assert_eq!(cfg.hardware.t_mlp, 0.001);
        assert_eq!(cfg.hardware.gpu_bw, 900e9);
    }

    #[test]
    fn validation_and_digest() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let mut cfg = ExperimentConfig {
            capacity_fraction: None,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.mode = Mode::Nocache;
        cfg.validate().unwrap();

        let a = ExperimentConfig::default();
        let round = ExperimentConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(a, round);
        assert_eq!(a.digest(), round.digest());
        let b = ExperimentConfig {
            seed: 2,
            ..Default::default()
        };
        assert_ne!(a.digest(), b.digest());
    }
}
