//! Results shared by every execution mode.

use std::io::Write;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::controller::csv_error;
use crate::embedding::EmbeddingTable;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Reference,
    Nocache,
    Static,
    Strawman,
    Scratchpipe,
    Gpuonly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Reference,
        Mode::Nocache,
        Mode::Static,
        Mode::Strawman,
        Mode::Scratchpipe,
        Mode::Gpuonly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Reference => "reference",
            Mode::Nocache => "nocache",
            Mode::Static => "static",
            Mode::Strawman => "strawman",
            Mode::Scratchpipe => "scratchpipe",
            Mode::Gpuonly => "gpuonly",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| crate::Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Row counts moved by one batch, summed over tables. Unique counts are per
/// table, so a row shared by two tables counts twice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BatchVolume {
    /// Sparse IDs looked up (`T * N * L`).
    pub lookups: u64,
    /// Distinct rows touched.
    pub unique: u64,
    /// Distinct rows served from GPU memory.
    pub unique_hits: u64,
    /// Distinct rows fetched from (or updated in) the CPU table.
    pub unique_misses: u64,
    /// Lookups whose row was not in GPU memory when planned.
    pub lookup_misses: u64,
    /// Resident rows displaced and written back.
    pub evictions: u64,
    pub vacancies_used: u64,
}

impl AddAssign for BatchVolume {
    fn add_assign(&mut self, o: Self) {
        self.lookups += o.lookups;
        self.unique += o.unique;
        self.unique_hits += o.unique_hits;
        self.unique_misses += o.unique_misses;
        self.lookup_misses += o.lookup_misses;
        self.evictions += o.evictions;
        self.vacancies_used += o.vacancies_used;
    }
}

impl BatchVolume {
    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            return 1.0;
        }
        1.0 - self.lookup_misses as f64 / self.lookups as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HazardKind {
    EvictedHeldSlot,
    TrainStageMiss,
    StaleCpuRead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Hazard {
    pub cycle: u64,
    pub table: usize,
    pub batch: u64,
    pub kind: HazardKind,
    pub ids: Vec<u64>,
}

/// Stage occupancy for one tick: batch index per stage, Plan first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CycleRecord {
    pub cycle: u64,
    pub occupancy: [Option<u64>; 5],
    pub completed: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub mode: Mode,
    pub checksum: Option<u64>,
    pub slots_per_table: u64,
    pub total_cycles: u64,
    pub batches_completed: u64,
    /// Distinct rows fetched from the CPU at Collect (or on demand).
    pub collect_misses: u64,
    /// Train-stage gathers that did not find their row in the scratchpad.
    pub train_misses: u64,
    pub totals: BatchVolume,
    pub hazards: Vec<Hazard>,
    #[serde(skip)]
    pub tables: Option<Vec<EmbeddingTable>>,
    #[serde(skip)]
    pub batches: Vec<BatchVolume>,
    #[serde(skip)]
    pub cycles: Vec<CycleRecord>,
}

impl RunResult {
    pub(crate) fn new(mode: Mode, slots_per_table: u64) -> Self {
        Self {
            mode,
            checksum: None,
            slots_per_table,
            total_cycles: 0,
            batches_completed: 0,
            collect_misses: 0,
            train_misses: 0,
            totals: BatchVolume::default(),
            hazards: Vec::new(),
            tables: None,
            batches: Vec::new(),
            cycles: Vec::new(),
        }
    }

    pub(crate) fn push_batch(&mut self, v: BatchVolume) {
        self.totals += v;
        self.batches.push(v);
    }

    pub(crate) fn finish(&mut self, tables: Option<Vec<EmbeddingTable>>) {
        self.checksum = tables.as_deref().map(crate::embedding::checksum);
        self.tables = tables;
        self.batches_completed = self.batches.len() as u64;
        self.collect_misses = self.totals.unique_misses;
    }

    pub fn hit_rate(&self) -> f64 {
        self.totals.hit_rate()
    }

    pub fn write_json(&self, out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(out, self).map_err(|e| crate::Error::Io(e.into()))
    }
}

#[derive(Serialize)]
struct CycleRow {
    cycle: u64,
    plan: Option<u64>,
    collect: Option<u64>,
    exchange: Option<u64>,
    insert: Option<u64>,
    train: Option<u64>,
    plan_bytes: u64,
    collect_bytes: u64,
    exchange_bytes: u64,
    insert_bytes: u64,
    train_bytes: u64,
    hits: u64,
    misses: u64,
    evictions: u64,
    completed: u32,
}

/// Per-cycle CSV: occupancy, per-stage byte volumes, and the hit/miss/evict
/// counts of the batch planned that cycle.
pub fn write_cycle_log(run: &RunResult, row_bytes: u64, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in &run.cycles {
        let vol = |stage: usize| rec.occupancy[stage].map(|b| run.batches[b as usize]);
        let bytes = |stage: usize| {
            vol(stage)
                .map(|v| crate::cost::stage_bytes(&v, row_bytes)[stage])
                .unwrap_or(0)
        };
        let planned = vol(0).unwrap_or_default();
        w.serialize(CycleRow {
            cycle: rec.cycle,
            plan: rec.occupancy[0],
            collect: rec.occupancy[1],
            exchange: rec.occupancy[2],
            insert: rec.occupancy[3],
            train: rec.occupancy[4],
            plan_bytes: bytes(0),
            collect_bytes: bytes(1),
            exchange_bytes: bytes(2),
            insert_bytes: bytes(3),
            train_bytes: bytes(4),
            hits: planned.unique_hits,
            misses: planned.unique_misses,
            evictions: planned.evictions,
            completed: rec.completed,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
