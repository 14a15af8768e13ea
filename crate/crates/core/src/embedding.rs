//! Functional semantics of embedding-layer training and the sequential
//! reference every cached mode is checked against.
//!
//! Forward: gather the `L` rows of each sample's bag and sum them in lookup
//! order. Backward: a deterministic surrogate gradient per sample, duplicated
//! to every row the sample gathered, coalesced per unique row, then scattered
//! back with plain SGD. All accumulation orders are fixed so every execution
//! mode produces bit-identical float32 results.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::workload::{MiniBatch, ModelConfig};

/// The reduction applied to a sample's gathered rows.
pub const REDUCTION: &str = "sum";

const INIT_SCALE: f32 = 0.1;

/// Stand-in for the MLP backend: `g = gamma * reduced + delta`, followed by
/// SGD with learning rate `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateTrainConfig {
    pub gamma: f32,
    pub delta: f32,
    pub eta: f32,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            delta: 0.01,
            eta: 0.01,
        }
    }
}

/// Row access used by gather and scatter. Implemented by the CPU-side table
/// and by the scratchpad/cache views of the other execution modes.
pub trait RowStore {
    fn table_index(&self) -> usize;
    fn row(&self, id: u64) -> Option<&[f32]>;
    fn row_mut(&mut self, id: u64) -> Option<&mut [f32]>;

    fn out_of_range(&self, id: u64) -> Error {
        Error::IndexOutOfRange {
            table: self.table_index(),
            id,
            rows: 0,
        }
    }
}

/// Dense row-major float32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    table: usize,
    rows: u64,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn index(&self) -> usize {
        self.table
    }

    fn with_index(mut self, table: usize) -> Self {
        self.table = table;
        self
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_f32s(&self.data);
        h.finish()
    }
}

impl RowStore for EmbeddingTable {
    fn table_index(&self) -> usize {
        self.table
    }

    fn row(&self, id: u64) -> Option<&[f32]> {
        (id < self.rows).then(|| {
            let start = id as usize * self.dim;
            &self.data[start..start + self.dim]
        })
    }

    fn row_mut(&mut self, id: u64) -> Option<&mut [f32]> {
        (id < self.rows).then(|| {
            let start = id as usize * self.dim;
            &mut self.data[start..start + self.dim]
        })
    }

    fn out_of_range(&self, id: u64) -> Error {
        Error::IndexOutOfRange {
            table: self.table,
            id,
            rows: self.rows,
        }
    }
}

/// Deterministic initialization: element `(i, j)` is a hash of
/// `(seed, i, j)` scaled to `[-0.1, 0.1]`.
pub fn init_table(rows: u64, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if rows == 0 || dim == 0 {
        return Err(Error::Config("embedding table needs rows, dim >= 1".into()));
    }
    let len = rows
        .checked_mul(dim as u64)
        .filter(|&n| n <= isize::MAX as u64 / 4)
        .ok_or(Error::Capacity {
            bytes: rows.saturating_mul(dim as u64).saturating_mul(4),
        })?;
    let mut data = Vec::new();
    data.try_reserve_exact(len as usize)
        .map_err(|_| Error::Capacity { bytes: len * 4 })?;
    let base = seed::splitmix64(seed);
    for i in 0..rows {
        let row_key = seed::splitmix64(base ^ i);
        for j in 0..dim as u64 {
            let h = seed::splitmix64(row_key ^ j.wrapping_mul(0xD6E8_FEB8_6659_FD93));
            let unit = (h >> 40) as f32 / (1u64 << 24) as f32;
            data.push((2.0 * unit - 1.0) * INIT_SCALE);
        }
    }
    Ok(EmbeddingTable {
        table: 0,
        rows,
        dim,
        data,
    })
}

/// One table per model table, each seeded from `(seed, table index)`.
pub fn init_tables(config: &ModelConfig, seed: u64) -> Result<Vec<EmbeddingTable>> {
    (0..config.tables())
        .map(|t| {
            let s = seed::derive(seed, &[t as u64, seed::STREAM_TABLE_INIT]);
            init_table(config.rows_per_table, config.dim(), s).map(|tab| tab.with_index(t))
        })
        .collect()
}

/// Sum of each sample's bag, in ascending lookup position. Output is
/// `N x D`, sample-major.
pub fn gather_reduce(
    view: &impl RowStore,
    ids: &[u64],
    lookups: usize,
    dim: usize,
) -> Result<Vec<f32>> {
    let samples = ids.len() / lookups;
    let mut reduced = Vec::with_capacity(samples * dim);
    for bag in ids.chunks_exact(lookups) {
        let first = view.row(bag[0]).ok_or_else(|| view.out_of_range(bag[0]))?;
        let start = reduced.len();
        reduced.extend_from_slice(first);
        for &id in &bag[1..] {
            let row = view.row(id).ok_or_else(|| view.out_of_range(id))?;
            for (acc, &x) in reduced[start..].iter_mut().zip(row) {
                *acc += x;
            }
        }
    }
    Ok(reduced)
}

pub fn surrogate_gradients(reduced: &[f32], cfg: &SurrogateTrainConfig) -> Vec<f32> {
    reduced.iter().map(|&r| cfg.gamma * r + cfg.delta).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoalescedRow {
    pub grad: Vec<f32>,
    pub count: u32,
}

/// Per-row accumulated gradients, iterated in ascending ID order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoalescedGradients {
    pub rows: BTreeMap<u64, CoalescedRow>,
}

impl CoalescedGradients {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&CoalescedRow> {
        self.rows.get(&id)
    }
}

/// Duplicates each sample's gradient to every row it gathered and sums per
/// row; ascending sample, then ascending position.
pub fn coalesce(ids: &[u64], lookups: usize, grads: &[f32], dim: usize) -> CoalescedGradients {
    let mut rows: BTreeMap<u64, CoalescedRow> = BTreeMap::new();
    for (bag, g) in ids.chunks_exact(lookups).zip(grads.chunks_exact(dim)) {
        for &id in bag {
            let entry = rows.entry(id).or_insert_with(|| CoalescedRow {
                grad: vec![0.0; dim],
                count: 0,
            });
            if entry.count == 0 {
                entry.grad.copy_from_slice(g);
            } else {
                for (acc, &x) in entry.grad.iter_mut().zip(g) {
                    *acc += x;
                }
            }
            entry.count += 1;
        }
    }
    CoalescedGradients { rows }
}

/// `E[x] <- E[x] - eta * grad[x]` in ascending ID order.
pub fn scatter_update(
    view: &mut impl RowStore,
    coalesced: &CoalescedGradients,
    eta: f32,
) -> Result<()> {
    for (&id, entry) in &coalesced.rows {
        let Some(row) = view.row_mut(id) else {
            return Err(view.out_of_range(id));
        };
        for (e, &g) in row.iter_mut().zip(&entry.grad) {
            *e -= eta * g;
        }
    }
    Ok(())
}

/// Forward, surrogate backward, coalesce and scatter for one table's slice
/// of a mini-batch, against whatever storage `view` exposes.
pub fn train_table(
    view: &mut impl RowStore,
    ids: &[u64],
    lookups: usize,
    dim: usize,
    cfg: &SurrogateTrainConfig,
) -> Result<CoalescedGradients> {
    let reduced = gather_reduce(view, ids, lookups, dim)?;
    let grads = surrogate_gradients(&reduced, cfg);
    let coalesced = coalesce(ids, lookups, &grads, dim);
    scatter_update(view, &coalesced, cfg.eta)?;
    Ok(coalesced)
}

pub fn train_step_reference(
    tables: &mut [EmbeddingTable],
    batch: &MiniBatch,
    model: &ModelConfig,
    cfg: &SurrogateTrainConfig,
) -> Result<()> {
    let lookups = model.lookups_per_table as usize;
    for (t, table) in tables.iter_mut().enumerate() {
        let dim = table.dim();
        train_table(table, batch.table(t), lookups, dim, cfg)?;
    }
    Ok(())
}

/// Applies every batch strictly in order and returns the checksum of the
/// final tables.
pub fn run_reference<'a>(
    tables: &mut [EmbeddingTable],
    batches: impl IntoIterator<Item = &'a MiniBatch>,
    model: &ModelConfig,
    cfg: &SurrogateTrainConfig,
) -> Result<u64> {
    for batch in batches {
        train_step_reference(tables, batch, model, cfg)?;
    }
    Ok(checksum(tables))
}

/// 64-bit FNV-1a over the raw little-endian bytes of every table, in table
/// order.
pub fn checksum(tables: &[EmbeddingTable]) -> u64 {
    let mut h = Fnv1a::new();
    for t in tables {
        h.write_f32s(&t.data);
    }
    h.finish()
}

/// First element at which two sets of tables differ, as
/// `(table, row, element)`.
pub fn first_divergence(a: &[EmbeddingTable], b: &[EmbeddingTable]) -> Option<(usize, u64, usize)> {
    for (t, (x, y)) in a.iter().zip(b).enumerate() {
        if let Some(i) = x
            .data
            .iter()
            .zip(&y.data)
            .position(|(p, q)| p.to_bits() != q.to_bits())
        {
            return Some((t, (i / x.dim) as u64, i % x.dim));
        }
    }
    None
}

/// Checkpoint: per table `u64 R`, `u32 D`, then `R x D` little-endian f32.
pub fn write_checkpoint(tables: &[EmbeddingTable], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tables {
        w.write_all(&t.rows.to_le_bytes())?;
        w.write_all(&(t.dim as u32).to_le_bytes())?;
        for x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn new() -> Self {
        Self(Self::OFFSET)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    fn write_f32s(&mut self, xs: &[f32]) {
        for x in xs {
            self.write(&x.to_le_bytes());
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// FNV-1a of an arbitrary byte string (config digests).
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_from(rows: &[&[f32]]) -> EmbeddingTable {
        EmbeddingTable {
            table: 0,
            rows: rows.len() as u64,
            dim: rows[0].len(),
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_table(50, 8, 3).unwrap();
        let b = init_table(50, 8, 3).unwrap();
        let c = init_table(50, 8, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
        assert!(a.data().iter().all(|x| x.abs() <= 0.1));
        let one = init_table(1, 1, 0).unwrap();
        assert!(one.data()[0].is_finite() && one.data()[0].abs() <= 0.1);
    }

    #[test]
    fn init_rejects_impossible_sizes() {
        assert!(matches!(init_table(u64::MAX, 8, 0), Err(Error::Capacity { .. })));
        assert!(init_table(0, 8, 0).is_err());
    }

    #[test]
    fn two_sample_gather_from_figure() {
        // batch 0 gathers rows {0, 4} (padded with a repeat-free layout of
        // L = 3 by using row 4 twice would change semantics, so use L = 2
        // and L = 3 separately)
        let rows: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, 10.0 * i as f32]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let table = table_from(&refs);
        let r0 = gather_reduce(&table, &[0, 4], 2, 2).unwrap();
        assert_eq!(r0, vec![4.0, 40.0]);
        let r1 = gather_reduce(&table, &[0, 2, 5], 3, 2).unwrap();
        assert_eq!(r1, vec![7.0, 70.0]);
    }

    #[test]
    fn gather_identity_and_multiplicity() {
        let table = init_table(10, 4, 1).unwrap();
        let r = gather_reduce(&table, &[3, 7], 1, 4).unwrap();
        assert_eq!(&r[..4], table.row(3).unwrap());
        assert_eq!(&r[4..], table.row(7).unwrap());
        let twice = gather_reduce(&table, &[5, 5], 2, 4).unwrap();
        let expect: Vec<f32> = table.row(5).unwrap().iter().map(|x| x + x).collect();
        assert_eq!(twice, expect);
        assert!(matches!(
            gather_reduce(&table, &[10], 1, 4),
            Err(Error::IndexOutOfRange { id: 10, rows: 10, .. })
        ));
    }

    #[test]
    fn surrogate_matches_scalar_recomputation() {
        let cfg = SurrogateTrainConfig {
            gamma: 0.75,
            delta: -0.125,
            eta: 0.1,
        };
        let reduced = [0.5f32, -1.25, 3.0e-3, 7.0];
        let g = surrogate_gradients(&reduced, &cfg);
        for (r, g) in reduced.iter().zip(&g) {
            assert_eq!(*g, 0.75f32 * r + -0.125f32);
        }
        let zero = SurrogateTrainConfig {
            gamma: 0.0,
            delta: 0.0,
            eta: 0.1,
        };
        assert!(surrogate_gradients(&reduced, &zero).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn coalesce_accumulates_duplicates() {
        // samples {0,4} and {0,2}: row 0 receives g0 + g1
        let grads = [1.0f32, 2.0, 10.0, 20.0];
        let c = coalesce(&[0, 4, 0, 2], 2, &grads, 2);
        assert_eq!(c.get(0).unwrap().grad, vec![11.0, 22.0]);
        assert_eq!(c.get(0).unwrap().count, 2);
        assert_eq!(c.get(4).unwrap().grad, vec![1.0, 2.0]);
        assert_eq!(c.get(2).unwrap().grad, vec![10.0, 20.0]);
        let ids: Vec<u64> = c.rows.keys().copied().collect();
        assert_eq!(ids, vec![0, 2, 4]);
        let dup = coalesce(&[3, 3], 2, &[1.5, -0.5], 2);
        assert_eq!(dup.get(3).unwrap().grad, vec![3.0, -1.0]);
    }

    #[test]
    fn single_lookup_update_closed_form() {
        let cfg = SurrogateTrainConfig {
            gamma: 0.5,
            delta: 0.25,
            eta: 0.5,
        };
        let mut table = table_from(&[&[1.0, -2.0]]);
        train_table(&mut table, &[0], 1, 2, &cfg).unwrap();
        // E' = E - eta * (gamma * E + delta), exactly representable here
        assert_eq!(table.data(), &[1.0 - 0.5 * (0.5 + 0.25), -2.0 - 0.5 * (-1.0 + 0.25)]);

        let mut frozen = init_table(4, 3, 9).unwrap();
        let before = frozen.clone();
        let no_lr = SurrogateTrainConfig { eta: 0.0, ..cfg };
        train_table(&mut frozen, &[1, 2, 1, 3], 2, 3, &no_lr).unwrap();
        assert_eq!(frozen, before);
    }

    /// Naive oracle: one pass per occurrence, accumulating gradients in the
    /// same order the coalescer does, but without any map.
    fn per_occurrence_update(
        table: &mut EmbeddingTable,
        ids: &[u64],
        lookups: usize,
        cfg: &SurrogateTrainConfig,
    ) {
        let dim = table.dim();
        let reduced = gather_reduce(table, ids, lookups, dim).unwrap();
        let grads = surrogate_gradients(&reduced, cfg);
        let mut unique: Vec<u64> = ids.to_vec();
        unique.sort_unstable();
        unique.dedup();
        for id in unique {
            let mut acc: Option<Vec<f32>> = None;
            for (pos, &x) in ids.iter().enumerate() {
                if x != id {
                    continue;
                }
                let g = &grads[(pos / lookups) * dim..(pos / lookups + 1) * dim];
                match acc.as_mut() {
                    None => acc = Some(g.to_vec()),
                    Some(a) => a.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                }
            }
            let acc = acc.unwrap();
            let row = table.row_mut(id).unwrap();
            for (e, g) in row.iter_mut().zip(&acc) {
                *e -= cfg.eta * g;
            }
        }
    }

    #[test]
    fn scatter_matches_per_occurrence_oracle() {
        let cfg = SurrogateTrainConfig::default();
        let mut fast = init_table(20, 5, 2).unwrap();
        let mut slow = fast.clone();
        let batches: [&[u64]; 3] = [&[1, 2, 3, 1, 19, 2], &[0, 0, 5, 6, 7, 1], &[2, 2, 2, 2, 2, 2]];
        for ids in batches {
            train_table(&mut fast, ids, 3, 5, &cfg).unwrap();
            per_occurrence_update(&mut slow, ids, 3, &cfg);
        }
        assert_eq!(fast.checksum(), slow.checksum());
    }

    #[test]
    fn bias_only_updates_by_multiplicity() {
        let cfg = SurrogateTrainConfig {
            gamma: 0.0,
            delta: 0.5,
            eta: 0.25,
        };
        let mut table = table_from(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        train_table(&mut table, &[0, 2, 2, 2, 0, 1], 2, 1, &cfg).unwrap();
        // multiplicities: row0 x2, row1 x1, row2 x3, row3 x0
        assert_eq!(table.data(), &[1.0 - 0.25, 2.0 - 0.125, 3.0 - 0.375, 4.0]);
    }

    #[test]
    fn linear_scaling_without_bias() {
        let base = table_from(&[&[0.5], &[-0.25], &[0.125]]);
        let scaled = table_from(&[&[2.0], &[-1.0], &[0.5]]);
        let ids = [0u64, 1, 2, 2, 0, 1];
        let a = gather_reduce(&base, &ids, 3, 1).unwrap();
        let b = gather_reduce(&scaled, &ids, 3, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(4.0 * x, *y);
        }
    }

    #[test]
    fn reference_checksum_behaviour() {
        let model = ModelConfig {
            num_tables: 2,
            rows_per_table: 30,
            embedding_dim: 3,
            lookups_per_table: 2,
            batch_size: 2,
        };
        let cfg = SurrogateTrainConfig::default();
        let fresh = init_tables(&model, 1).unwrap();
        let mut tables = fresh.clone();
        let empty: Vec<MiniBatch> = Vec::new();
        assert_eq!(run_reference(&mut tables, &empty, &model, &cfg).unwrap(), checksum(&fresh));

        let batch = MiniBatch::new(&model, vec![1, 2, 3, 1, 4, 5, 4, 29]).unwrap();
        let mut once = fresh.clone();
        train_step_reference(&mut once, &batch, &model, &cfg).unwrap();
        let mut via_run = fresh.clone();
        let c = run_reference(&mut via_run, [&batch], &model, &cfg).unwrap();
        assert_eq!(c, checksum(&once));
        assert_eq!(first_divergence(&once, &via_run), None);
        assert_eq!(first_divergence(&once, &fresh).map(|d| d.0), Some(0));
    }
}
