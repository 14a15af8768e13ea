//! Cycle-driven execution of Plan, Collect, Exchange, Insert and Train.
//!
//! Batch `B` is planned in cycle `c` and trains in `c + 4`, so at steady state
//! five batches occupy the stages and the next `future` batches wait in the
//! look-ahead queue. Row values move at Collect (CPU rows and victim slots
//! into staging buffers) and at Insert (write-backs to the CPU table, fills
//! into Storage); Exchange only carries transfer cost.
//!
//! The straw-man mode drives the same engine but admits a batch only once
//! the previous one has left Train, with a window covering the current
//! batch alone.

use std::collections::VecDeque;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::controller::{CacheController, PlanOutcome, ReplacementPolicy, WindowShape};
use crate::embedding::{self, EmbeddingTable, RowStore, SurrogateTrainConfig};
use crate::error::{Error, Result};
use crate::run::{BatchVolume, CycleRecord, Hazard, HazardKind, Mode, RunResult};
use crate::seed;
use crate::workload::{MiniBatch, ModelConfig, Trace};

const NO_ROW: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Plan,
    Collect,
    Exchange,
    Insert,
    Train,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Plan,
        Stage::Collect,
        Stage::Exchange,
        Stage::Insert,
        Stage::Train,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Plan => "plan",
            Stage::Collect => "collect",
            Stage::Exchange => "exchange",
            Stage::Insert => "insert",
            Stage::Train => "train",
        }
    }
}

pub const OLDEST_FIRST: [Stage; 5] = [
    Stage::Train,
    Stage::Insert,
    Stage::Exchange,
    Stage::Collect,
    Stage::Plan,
];

pub const YOUNGEST_FIRST: [Stage; 5] = [
    Stage::Plan,
    Stage::Collect,
    Stage::Exchange,
    Stage::Insert,
    Stage::Train,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window: WindowShape,
    pub policy: ReplacementPolicy,
    pub policy_seed: u64,
    /// Order in which stages execute within one tick.
    pub stage_order: [Stage; 5],
    /// Admit a batch only when every stage is empty.
    pub sequential: bool,
    pub train: SurrogateTrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: WindowShape::SCRATCHPIPE,
            policy: ReplacementPolicy::Lru,
            policy_seed: 0,
            stage_order: OLDEST_FIRST,
            sequential: false,
            train: SurrogateTrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn strawman(&self) -> Self {
        Self {
            window: WindowShape::CURRENT_ONLY,
            sequential: true,
            ..self.clone()
        }
    }

    fn mode(&self) -> Mode {
        if self.sequential {
            Mode::Strawman
        } else {
            Mode::Scratchpipe
        }
    }
}

/// Slots per table for a capacity given as a fraction of the table's rows.
pub fn slots_for_fraction(rows: u64, fraction: f64) -> Result<u32> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "capacity fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let slots = ((fraction * rows as f64).ceil() as u64).clamp(1, rows);
    u32::try_from(slots).map_err(|_| Error::Config(format!("{slots} slots exceed u32")))
}

/// Smallest slot count per table that can never raise `NoEvictableSlot`:
/// the most distinct rows referenced by any `past + 1 + future` consecutive
/// batches.
pub fn required_slots(model: &ModelConfig, batches: &[MiniBatch], window: WindowShape) -> Vec<u64> {
    let width = window.width() as usize;
    (0..model.tables())
        .map(|t| {
            let uniques: Vec<Vec<u64>> = batches.iter().map(|b| b.unique(t)).collect();
            let mut counts: FxHashMap<u64, u32> = FxHashMap::default();
            let mut best = 0usize;
            for end in 0..uniques.len() {
                for &id in &uniques[end] {
                    *counts.entry(id).or_default() += 1;
                }
                if end >= width {
                    for id in &uniques[end - width] {
                        let c = counts.get_mut(id).expect("counted on entry");
                        *c -= 1;
                        if *c == 0 {
                            counts.remove(id);
                        }
                    }
                }
                best = best.max(counts.len());
            }
            best.max(1) as u64
        })
        .collect()
}

struct Pending {
    index: u64,
    batch: MiniBatch,
    unique: Vec<Vec<u64>>,
}

#[derive(Default)]
struct TableFlight {
    outcome: PlanOutcome,
    slot_of: FxHashMap<u64, u32>,
    slots: FxHashSet<u32>,
    evicted: FxHashSet<u64>,
    miss_buf: Vec<f32>,
    evict_buf: Vec<f32>,
}

struct InFlight {
    pending: Pending,
    tables: Vec<TableFlight>,
}

/// Storage view handed to Train: rows are addressed through the batch's own
/// id-to-slot assignment.
struct SlotView<'a> {
    table: usize,
    dim: usize,
    storage: &'a mut [f32],
    slot_of: &'a FxHashMap<u64, u32>,
}

impl RowStore for SlotView<'_> {
    fn table_index(&self) -> usize {
        self.table
    }

    fn row(&self, id: u64) -> Option<&[f32]> {
        let s = *self.slot_of.get(&id)? as usize;
        Some(&self.storage[s * self.dim..(s + 1) * self.dim])
    }

    fn row_mut(&mut self, id: u64) -> Option<&mut [f32]> {
        let s = *self.slot_of.get(&id)? as usize;
        Some(&mut self.storage[s * self.dim..(s + 1) * self.dim])
    }
}

pub struct Engine<I> {
    model: ModelConfig,
    cfg: PipelineConfig,
    source: I,
    next_index: u64,
    lookahead: VecDeque<Pending>,
    stages: [Option<InFlight>; 5],
    controllers: Vec<CacheController>,
    storage: Vec<Vec<f32>>,
    /// Row physically present in each slot, `NO_ROW` if none.
    tags: Vec<Vec<u64>>,
    cpu: Option<Vec<EmbeddingTable>>,
    cycle: u64,
    completed_this_tick: u32,
    result: RunResult,
}

impl<I: Iterator<Item = MiniBatch>> Engine<I> {
    /// With `tables = None` the engine tracks only the directory and data
    /// volumes (no embedding values), which is what cost estimates need.
    pub fn new(
        model: ModelConfig,
        source: I,
        tables: Option<Vec<EmbeddingTable>>,
        slots: u32,
        cfg: PipelineConfig,
    ) -> Result<Self> {
        model.validate()?;
        if let Some(t) = &tables {
            if t.len() != model.tables()
                || t.iter()
                    .any(|t| t.rows() != model.rows_per_table || t.dim() != model.dim())
            {
                return Err(Error::Config("embedding tables do not match the model".into()));
            }
        }
        if slots as u64 > model.rows_per_table {
            return Err(Error::Config(format!(
                "{slots} slots exceed the {} rows per table",
                model.rows_per_table
            )));
        }
        let controllers = (0..model.tables())
            .map(|t| {
                let s = seed::derive(cfg.policy_seed, &[t as u64, seed::STREAM_EVICTION]);
                CacheController::new(t, slots, cfg.window, cfg.policy, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let storage = if tables.is_some() {
            let len = slots as usize * model.dim();
            (0..model.tables())
                .map(|_| {
                    let mut v = Vec::new();
                    v.try_reserve_exact(len).map_err(|_| Error::Capacity {
                        bytes: len as u64 * 4,
                    })?;
                    v.resize(len, 0.0);
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mode = cfg.mode();
        Ok(Self {
            model,
            cfg,
            source,
            next_index: 0,
            lookahead: VecDeque::new(),
            stages: Default::default(),
            controllers,
            storage,
            tags: vec![vec![NO_ROW; slots as usize]; model.tables()],
            cpu: tables,
            cycle: 0,
            completed_this_tick: 0,
            result: RunResult::new(mode, slots as u64),
        })
    }

    pub fn controllers(&self) -> &[CacheController] {
        &self.controllers
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    fn fill_lookahead(&mut self) {
        while self.lookahead.len() <= self.cfg.window.future as usize {
            let Some(batch) = self.source.next() else { break };
            let unique = (0..self.model.tables()).map(|t| batch.unique(t)).collect();
            self.lookahead.push_back(Pending {
                index: self.next_index,
                batch,
                unique,
            });
            self.next_index += 1;
        }
    }

    pub fn is_drained(&mut self) -> bool {
        self.fill_lookahead();
        self.lookahead.is_empty() && self.stages.iter().all(Option::is_none)
    }

    /// One pipeline cycle.
    pub fn tick(&mut self) -> Result<()> {
        debug_assert!(self.stages[4].is_none());
        for i in (0..4).rev() {
            self.stages[i + 1] = self.stages[i].take();
        }
        let idle = self.stages.iter().all(Option::is_none);
        if !self.cfg.sequential || idle {
            self.fill_lookahead();
            if let Some(pending) = self.lookahead.pop_front() {
                self.stages[0] = Some(InFlight {
                    pending,
                    tables: Vec::new(),
                });
            }
            self.fill_lookahead();
        }
        let occupancy = std::array::from_fn(|i| self.stages[i].as_ref().map(|f| f.pending.index));
        self.completed_this_tick = 0;
        for stage in self.cfg.stage_order {
            match stage {
                Stage::Plan => self.plan()?,
                Stage::Collect => self.collect(),
                Stage::Exchange => {}
                Stage::Insert => self.insert(),
                Stage::Train => self.train()?,
            }
        }
        self.result.cycles.push(CycleRecord {
            cycle: self.cycle,
            occupancy,
            completed: self.completed_this_tick,
        });
        self.cycle += 1;
        Ok(())
    }

    fn hazard(&mut self, table: usize, batch: u64, kind: HazardKind, ids: Vec<u64>) {
        self.result.hazards.push(Hazard {
            cycle: self.cycle,
            table,
            batch,
            kind,
            ids,
        });
    }

    fn plan(&mut self) -> Result<()> {
        let (head, older) = self.stages.split_at_mut(1);
        let Some(flight) = head[0].as_mut() else {
            return Ok(());
        };
        let lookups = self.model.lookups_per_batch() as u64;
        let mut volume = BatchVolume::default();
        let mut found = Vec::new();
        for t in 0..self.model.tables() {
            let future: Vec<&[u64]> = self
                .lookahead
                .iter()
                .take(self.cfg.window.future as usize)
                .map(|p| p.unique[t].as_slice())
                .collect();
            let outcome = self.controllers[t].plan_batch(&flight.pending.unique[t], &future)?;

            // Victims must not belong to a batch between Collect and Insert,
            // and missed rows must not have a write-back still in flight.
            let held: Vec<u64> = outcome
                .evictions
                .iter()
                .filter(|(_, slot)| {
                    older[..3]
                        .iter()
                        .flatten()
                        .any(|f| f.tables[t].slots.contains(slot))
                })
                .map(|&(id, _)| id)
                .collect();
            if !held.is_empty() {
                found.push((t, HazardKind::EvictedHeldSlot, held));
            }
            let stale: Vec<u64> = outcome
                .misses
                .iter()
                .filter(|(id, _)| {
                    older[..2]
                        .iter()
                        .flatten()
                        .any(|f| f.tables[t].evicted.contains(id))
                })
                .map(|&(id, _)| id)
                .collect();
            if !stale.is_empty() {
                found.push((t, HazardKind::StaleCpuRead, stale));
            }

            let slot_of: FxHashMap<u64, u32> = outcome.assignments().collect();
            let missed: FxHashSet<u64> = outcome.misses.iter().map(|m| m.0).collect();
            volume.lookups += lookups;
            volume.unique += slot_of.len() as u64;
            volume.unique_hits += outcome.hits.len() as u64;
            volume.unique_misses += outcome.misses.len() as u64;
            volume.lookup_misses += flight
                .pending
                .batch
                .table(t)
                .iter()
                .filter(|id| missed.contains(id))
                .count() as u64;
            volume.evictions += outcome.evictions.len() as u64;
            volume.vacancies_used += outcome.vacancies_used as u64;
            flight.tables.push(TableFlight {
                slots: slot_of.values().copied().collect(),
                evicted: outcome.evictions.iter().map(|e| e.0).collect(),
                slot_of,
                outcome,
                ..TableFlight::default()
            });
        }
        let batch = flight.pending.index;
        debug_assert_eq!(batch, self.result.batches.len() as u64);
        self.result.push_batch(volume);
        for (t, kind, ids) in found {
            self.hazard(t, batch, kind, ids);
        }
        Ok(())
    }

    fn collect(&mut self) {
        let (Some(flight), Some(cpu)) = (self.stages[1].as_mut(), self.cpu.as_ref()) else {
            return;
        };
        let dim = self.model.dim();
        for (t, tf) in flight.tables.iter_mut().enumerate() {
            tf.miss_buf.clear();
            for &(id, _) in &tf.outcome.misses {
                tf.miss_buf
                    .extend_from_slice(cpu[t].row(id).expect("trace ids are validated"));
            }
            tf.evict_buf.clear();
            for &(_, slot) in &tf.outcome.evictions {
                let s = slot as usize;
                tf.evict_buf
                    .extend_from_slice(&self.storage[t][s * dim..(s + 1) * dim]);
            }
        }
    }

    fn insert(&mut self) {
        let Some(flight) = self.stages[3].as_mut() else {
            return;
        };
        let dim = self.model.dim();
        for (t, tf) in flight.tables.iter_mut().enumerate() {
            if let Some(cpu) = self.cpu.as_mut() {
                for (i, &(id, _)) in tf.outcome.evictions.iter().enumerate() {
                    cpu[t]
                        .row_mut(id)
                        .expect("evicted ids were resident")
                        .copy_from_slice(&tf.evict_buf[i * dim..(i + 1) * dim]);
                }
                for (i, &(_, slot)) in tf.outcome.misses.iter().enumerate() {
                    let s = slot as usize;
                    self.storage[t][s * dim..(s + 1) * dim]
                        .copy_from_slice(&tf.miss_buf[i * dim..(i + 1) * dim]);
                }
            }
            for &(id, slot) in &tf.outcome.misses {
                self.tags[t][slot as usize] = id;
                self.controllers[t].complete_fill(slot);
            }
            tf.miss_buf = Vec::new();
            tf.evict_buf = Vec::new();
        }
    }

    fn train(&mut self) -> Result<()> {
        let Some(flight) = self.stages[4].take() else {
            return Ok(());
        };
        let batch = flight.pending.index;
        let lookups = self.model.lookups_per_table as usize;
        let dim = self.model.dim();
        for (t, tf) in flight.tables.iter().enumerate() {
            let mut absent: Vec<u64> = tf
                .slot_of
                .iter()
                .filter(|&(&id, &slot)| self.tags[t][slot as usize] != id)
                .map(|(&id, _)| id)
                .collect();
            if !absent.is_empty() {
                absent.sort_unstable();
                self.result.train_misses += absent.len() as u64;
                self.hazard(t, batch, HazardKind::TrainStageMiss, absent);
            }
            if self.cpu.is_some() {
                let mut view = SlotView {
                    table: t,
                    dim,
                    storage: &mut self.storage[t],
                    slot_of: &tf.slot_of,
                };
                embedding::train_table(
                    &mut view,
                    flight.pending.batch.table(t),
                    lookups,
                    dim,
                    &self.cfg.train,
                )?;
            }
        }
        self.completed_this_tick += 1;
        Ok(())
    }

    /// Writes every resident row back to the CPU table and empties the
    /// directory. Only meaningful once the pipeline has drained.
    pub fn flush(&mut self) {
        let dim = self.model.dim();
        for t in 0..self.model.tables() {
            let entries = self.controllers[t].clear();
            if let Some(cpu) = self.cpu.as_mut() {
                for (id, slot) in entries {
                    let s = slot as usize;
                    cpu[t]
                        .row_mut(id)
                        .expect("resident ids are in range")
                        .copy_from_slice(&self.storage[t][s * dim..(s + 1) * dim]);
                }
            }
            self.tags[t].fill(NO_ROW);
        }
    }

    /// Runs until the source is exhausted and every stage has drained, then
    /// flushes the scratchpad.
    pub fn run(mut self) -> Result<RunResult> {
        while !self.is_drained() {
            self.tick()?;
        }
        self.flush();
        let mut result = self.result;
        result.total_cycles = self.cycle;
        result.finish(self.cpu);
        Ok(result)
    }
}

fn run_mode(
    trace: &Trace,
    tables: Option<Vec<EmbeddingTable>>,
    capacity_fraction: f64,
    cfg: PipelineConfig,
) -> Result<RunResult> {
    let slots = slots_for_fraction(trace.config.rows_per_table, capacity_fraction)?;
    Engine::new(trace.config, trace.batches.iter().cloned(), tables, slots, cfg)?.run()
}

/// Pipelined execution with the configured window. Pass `tables = None` for
/// a volume-only run.
pub fn run_pipelined(
    trace: &Trace,
    tables: Option<Vec<EmbeddingTable>>,
    capacity_fraction: f64,
    cfg: &PipelineConfig,
) -> Result<RunResult> {
    run_mode(trace, tables, capacity_fraction, cfg.clone())
}

/// One batch at a time through the same stages, holding only the current
/// batch's slots.
pub fn run_strawman(
    trace: &Trace,
    tables: Option<Vec<EmbeddingTable>>,
    capacity_fraction: f64,
    cfg: &PipelineConfig,
) -> Result<RunResult> {
    run_mode(trace, tables, capacity_fraction, cfg.strawman())
}
