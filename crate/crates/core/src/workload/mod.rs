//! Workload synthesis: model shape, locality profiles, mini-batches and
//! traces of sparse-feature lookups.

mod format;
mod generate;
mod pdf;
mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_trace, write_trace, TRACE_MAGIC};
pub use generate::{
    crafted_trace, generate_trace, pdf_hot_set, table_permutation, RankPermutation, TraceGenerator,
};
pub use pdf::{build_pdf, generalized_harmonic, hot_row_count, AccessPdf, HOT_FRACTION};
pub use stats::{hot_set_share, trace_stats, StatsReport, TableStats};

/// Shape of the recommendation model's embedding layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_tables: u32,
    pub rows_per_table: u64,
    /// float32 elements per embedding vector
    pub embedding_dim: u32,
    pub lookups_per_table: u32,
    pub batch_size: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_tables: 8,
            rows_per_table: 10_000_000,
            embedding_dim: 128,
            lookups_per_table: 20,
            batch_size: 2048,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tables == 0
            || self.rows_per_table == 0
            || self.embedding_dim == 0
            || self.lookups_per_table == 0
            || self.batch_size == 0
        {
            return Err(Error::Config(format!(
                "every model dimension must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn tables(&self) -> usize {
        self.num_tables as usize
    }

    pub fn dim(&self) -> usize {
        self.embedding_dim as usize
    }

    /// N x L, the number of IDs one table receives per mini-batch.
    pub fn lookups_per_batch(&self) -> usize {
        self.batch_size as usize * self.lookups_per_table as usize
    }

    pub fn ids_per_batch(&self) -> usize {
        self.tables() * self.lookups_per_batch()
    }

    pub fn row_bytes(&self) -> u64 {
        self.embedding_dim as u64 * 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalityKind {
    Random,
    Low,
    Medium,
    High,
    Custom,
}

impl LocalityKind {
    pub const ALL: [LocalityKind; 4] = [
        LocalityKind::Random,
        LocalityKind::Low,
        LocalityKind::Medium,
        LocalityKind::High,
    ];

    pub fn code(self) -> u8 {
        match self {
            LocalityKind::Random => 0,
            LocalityKind::Low => 1,
            LocalityKind::Medium => 2,
            LocalityKind::High => 3,
            LocalityKind::Custom => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LocalityKind::Random,
            1 => LocalityKind::Low,
            2 => LocalityKind::Medium,
            3 => LocalityKind::High,
            4 => LocalityKind::Custom,
            _ => return None,
        })
    }

    /// Share of accesses landing on the hottest 2% of rows. The high and low
    /// anchors come from the Criteo and Alibaba measurements; medium is an
    /// assumed midpoint.
    pub fn default_target(self) -> f64 {
        match self {
            LocalityKind::Random => HOT_FRACTION,
            LocalityKind::Low => 0.085,
            LocalityKind::Medium => 0.40,
            LocalityKind::High => 0.80,
            LocalityKind::Custom => 0.40,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LocalityKind::Random => "random",
            LocalityKind::Low => "low",
            LocalityKind::Medium => "medium",
            LocalityKind::High => "high",
            LocalityKind::Custom => "custom",
        }
    }
}

impl fmt::Display for LocalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LocalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(LocalityKind::Random),
            "low" => Ok(LocalityKind::Low),
            "medium" => Ok(LocalityKind::Medium),
            "high" => Ok(LocalityKind::High),
            "custom" => Ok(LocalityKind::Custom),
            other => Err(Error::Config(format!("unknown locality kind '{other}'"))),
        }
    }
}

/// A locality regime. `zipf_exponent` is zero until the profile has been
/// calibrated against a concrete row count with [`LocalityProfile::calibrated`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalityProfile {
    pub kind: LocalityKind,
    pub zipf_exponent: f64,
    pub target_top2pct_mass: f64,
}

impl LocalityProfile {
    pub fn new(kind: LocalityKind) -> Self {
        Self {
            kind,
            zipf_exponent: 0.0,
            target_top2pct_mass: kind.default_target(),
        }
    }

    pub fn random() -> Self {
        Self::new(LocalityKind::Random)
    }

    pub fn low() -> Self {
        Self::new(LocalityKind::Low)
    }

    pub fn medium() -> Self {
        Self::new(LocalityKind::Medium)
    }

    pub fn high() -> Self {
        Self::new(LocalityKind::High)
    }

    pub fn custom(target_top2pct_mass: f64) -> Self {
        Self {
            kind: LocalityKind::Custom,
            zipf_exponent: 0.0,
            target_top2pct_mass,
        }
    }

    /// Solves the exponent for `rows` and returns the completed profile.
    pub fn calibrated(&self, rows: u64) -> Result<Self> {
        let pdf = build_pdf(self, rows)?;
        Ok(Self {
            zipf_exponent: pdf.exponent(),
            ..*self
        })
    }
}

/// One mini-batch of sparse IDs, `T` contiguous blocks of `N x L` IDs each,
/// sample-major inside a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    ids: Vec<u64>,
    per_table: usize,
    lookups: usize,
}

impl MiniBatch {
    pub fn new(config: &ModelConfig, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != config.ids_per_batch() {
            return Err(Error::Config(format!(
                "mini-batch holds {} ids, model expects {}",
                ids.len(),
                config.ids_per_batch()
            )));
        }
        Ok(Self {
            ids,
            per_table: config.lookups_per_batch(),
            lookups: config.lookups_per_table as usize,
        })
    }

    pub fn num_tables(&self) -> usize {
        self.ids.len() / self.per_table
    }

    pub fn table(&self, t: usize) -> &[u64] {
        &self.ids[t * self.per_table..(t + 1) * self.per_table]
    }

    /// The bag of IDs that sample `s` looks up in table `t`.
    pub fn bag(&self, t: usize, s: usize) -> &[u64] {
        let start = t * self.per_table + s * self.lookups;
        &self.ids[start..start + self.lookups]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.ids
    }

    /// Unique IDs of table `t` in first-occurrence order.
    pub fn unique(&self, t: usize) -> Vec<u64> {
        let mut seen = rustc_hash::FxHashSet::default();
        self.table(t)
            .iter()
            .copied()
            .filter(|id| seen.insert(*id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub config: ModelConfig,
    pub seed: u64,
    pub kind: LocalityKind,
    pub zipf_exponent: f64,
    pub batches: Vec<MiniBatch>,
}

impl Trace {
    pub fn num_batches(&self) -> u64 {
        self.batches.len() as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for batch in &self.batches {
            if batch.as_slice().len() != self.config.ids_per_batch() {
                return Err(Error::Format("batch length mismatch".into()));
            }
            for t in 0..self.config.tables() {
                if let Some(&id) = batch
                    .table(t)
                    .iter()
                    .find(|&&id| id >= self.config.rows_per_table)
                {
                    return Err(Error::IndexOutOfRange {
                        table: t,
                        id,
                        rows: self.config.rows_per_table,
                    });
                }
            }
        }
        Ok(())
    }

    /// An empty trace with the same header.
    pub fn truncated(&self, batches: usize) -> Trace {
        Trace {
            batches: self.batches.iter().take(batches).cloned().collect(),
            ..self.clone()
        }
    }
}
