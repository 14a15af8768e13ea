//! Comparison modes: CPU-only embedding training, a static top-N GPU cache,
//! and an all-GPU ceiling, plus static hit-rate curves.

use std::io::Write;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::controller::csv_error;
use crate::embedding::{self, EmbeddingTable, RowStore, SurrogateTrainConfig};
use crate::error::{Error, Result};
use crate::run::{BatchVolume, Mode, RunResult};
use crate::workload::{hot_row_count, table_permutation, AccessPdf, MiniBatch, ModelConfig, RankPermutation, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HotSetSource {
    /// Most likely rows under the generating distribution.
    #[default]
    FromPdf,
    /// Most accessed rows in the trace itself, ties by lower ID.
    FromTraceProfile,
}

impl std::str::FromStr for HotSetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "from-pdf" | "pdf" => Ok(Self::FromPdf),
            "from-trace-profile" | "trace" => Ok(Self::FromTraceProfile),
            other => Err(Error::Config(format!("unknown hot-set source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticCacheConfig {
    pub capacity_fraction: f64,
    pub source: HotSetSource,
}

impl Default for StaticCacheConfig {
    fn default() -> Self {
        Self {
            capacity_fraction: 0.02,
            source: HotSetSource::FromPdf,
        }
    }
}

/// Popularity order of one table's rows. Rank 0 is the hottest row; a
/// cache of `k` rows holds exactly the rows of rank `< k`.
#[derive(Debug, Clone)]
pub enum RowRanking {
    /// Uniform popularity: lower IDs first.
    Identity,
    Permuted(RankPermutation),
    /// Observed order; rows never accessed are absent.
    Profile {
        rank_of: FxHashMap<u64, u64>,
        by_rank: Vec<u64>,
    },
}

impl RowRanking {
    pub fn rank(&self, id: u64) -> u64 {
        match self {
            Self::Identity => id,
            Self::Permuted(p) => p.invert(id),
            Self::Profile { rank_of, .. } => rank_of.get(&id).copied().unwrap_or(u64::MAX),
        }
    }

    /// Row at `rank`, if ranked.
    pub fn row(&self, rank: u64) -> Option<u64> {
        match self {
            Self::Identity => Some(rank),
            Self::Permuted(p) => Some(p.apply(rank)),
            Self::Profile { by_rank, .. } => by_rank.get(rank as usize).copied(),
        }
    }

    fn ranked_rows(&self, rows: u64) -> u64 {
        match self {
            Self::Profile { by_rank, .. } => by_rank.len() as u64,
            _ => rows,
        }
    }
}

/// Per-table popularity order implied by the generating PDF of a trace.
pub fn rankings_from_pdf(pdf: &AccessPdf, trace_seed: u64, tables: usize) -> Vec<RowRanking> {
    (0..tables)
        .map(|t| {
            if pdf.exponent() == 0.0 {
                RowRanking::Identity
            } else {
                RowRanking::Permuted(table_permutation(trace_seed, t, pdf.rows()))
            }
        })
        .collect()
}

/// Per-table popularity order observed in `trace`.
pub fn rankings_from_profile(trace: &Trace) -> Vec<RowRanking> {
    (0..trace.config.tables())
        .map(|t| {
            let mut counts: FxHashMap<u64, u64> = FxHashMap::default();
            for b in &trace.batches {
                for &id in b.table(t) {
                    *counts.entry(id).or_default() += 1;
                }
            }
            let mut order: Vec<(u64, u64)> = counts.into_iter().collect();
            order.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let by_rank: Vec<u64> = order.into_iter().map(|(id, _)| id).collect();
            let rank_of = by_rank.iter().enumerate().map(|(r, &id)| (id, r as u64)).collect();
            RowRanking::Profile { rank_of, by_rank }
        })
        .collect()
}

/// Rankings for `cfg.source`. The PDF source needs the distribution the
/// trace was sampled from.
pub fn rankings(trace: &Trace, pdf: Option<&AccessPdf>, source: HotSetSource) -> Result<Vec<RowRanking>> {
    match source {
        HotSetSource::FromTraceProfile => Ok(rankings_from_profile(trace)),
        HotSetSource::FromPdf => {
            let pdf = pdf.ok_or_else(|| {
                Error::Config("hot set from the pdf needs a generated (non-custom) trace".into())
            })?;
            Ok(rankings_from_pdf(pdf, trace.seed, trace.config.tables()))
        }
    }
}

/// Never-evicting cache of the `k` highest-ranked rows of each table. The
/// cache row for a hot ID lives at index `rank`.
pub struct StaticCache {
    pub capacity_rows: u64,
    pub rankings: Vec<RowRanking>,
    values: Option<Vec<Vec<f32>>>,
}

impl StaticCache {
    pub fn contains(&self, table: usize, id: u64) -> bool {
        self.rankings[table].rank(id) < self.capacity_rows
    }

    /// Hot rows of `table`, hottest first.
    pub fn hot_rows(&self, table: usize) -> Vec<u64> {
        (0..self.capacity_rows)
            .map_while(|r| self.rankings[table].row(r))
            .collect()
    }
}

/// Builds the cache and, when `tables` are given, preloads it with their
/// values.
pub fn build_static_cache(
    rankings: Vec<RowRanking>,
    rows: u64,
    fraction: f64,
    tables: Option<&[EmbeddingTable]>,
) -> Result<StaticCache> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "static cache fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let k = hot_row_count(rows, fraction);
    let values = tables
        .map(|tables| {
            tables
                .iter()
                .zip(&rankings)
                .map(|(table, ranking)| {
                    let dim = table.dim();
                    let len = ranking.ranked_rows(rows).min(k) as usize * dim;
                    let mut v = Vec::new();
                    v.try_reserve_exact(len)
                        .map_err(|_| Error::Capacity { bytes: len as u64 * 4 })?;
                    for r in 0..(len / dim) as u64 {
                        let id = ranking.row(r).expect("rank below ranked rows");
                        v.extend_from_slice(table.row(id).expect("ranked rows exist"));
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(StaticCache {
        capacity_rows: k,
        rankings,
        values,
    })
}

/// Rows in the cache if hot, otherwise in the CPU table.
struct StaticView<'a> {
    dim: usize,
    k: u64,
    ranking: &'a RowRanking,
    cache: &'a mut [f32],
    cpu: &'a mut EmbeddingTable,
}

impl RowStore for StaticView<'_> {
    fn table_index(&self) -> usize {
        self.cpu.index()
    }

    fn row(&self, id: u64) -> Option<&[f32]> {
        let r = self.ranking.rank(id);
        if r < self.k {
            let r = r as usize;
            Some(&self.cache[r * self.dim..(r + 1) * self.dim])
        } else {
            self.cpu.row(id)
        }
    }

    fn row_mut(&mut self, id: u64) -> Option<&mut [f32]> {
        let r = self.ranking.rank(id);
        if r < self.k {
            let r = r as usize;
            Some(&mut self.cache[r * self.dim..(r + 1) * self.dim])
        } else {
            self.cpu.row_mut(id)
        }
    }

    fn out_of_range(&self, id: u64) -> Error {
        self.cpu.out_of_range(id)
    }
}

fn plain_volume(model: &ModelConfig, batch: &MiniBatch) -> (u64, u64) {
    let unique = (0..model.tables())
        .map(|t| {
            let set: FxHashSet<u64> = batch.table(t).iter().copied().collect();
            set.len() as u64
        })
        .sum();
    ((model.ids_per_batch()) as u64, unique)
}

/// Static top-N cache. Hits are gathered from and updated in the cache,
/// misses in the CPU table; the bag is reduced in original lookup order.
/// The cache is written back at the end.
pub fn run_static(
    model: &ModelConfig,
    batches: impl IntoIterator<Item = MiniBatch>,
    mut tables: Option<Vec<EmbeddingTable>>,
    mut cache: StaticCache,
    train: &SurrogateTrainConfig,
) -> Result<RunResult> {
    let k = cache.capacity_rows;
    let mut result = RunResult::new(Mode::Static, k);
    let lookups = model.lookups_per_table as usize;
    let dim = model.dim();
    for batch in batches {
        let mut v = BatchVolume::default();
        for t in 0..model.tables() {
            let ranking = &cache.rankings[t];
            let ids = batch.table(t);
            let mut seen: FxHashSet<u64> = FxHashSet::default();
            for &id in ids {
                let hot = ranking.rank(id) < k;
                v.lookups += 1;
                if !hot {
                    v.lookup_misses += 1;
                }
                if seen.insert(id) {
                    v.unique += 1;
                    if hot {
                        v.unique_hits += 1;
                    } else {
                        v.unique_misses += 1;
                    }
                }
            }
            if let (Some(tables), Some(values)) = (tables.as_mut(), cache.values.as_mut()) {
                let mut view = StaticView {
                    dim,
                    k,
                    ranking,
                    cache: &mut values[t],
                    cpu: &mut tables[t],
                };
                embedding::train_table(&mut view, ids, lookups, dim, train)?;
            }
        }
        result.push_batch(v);
    }
    if let (Some(tables), Some(values)) = (tables.as_mut(), cache.values.as_ref()) {
        for (t, table) in tables.iter_mut().enumerate() {
            for (r, row) in values[t].chunks_exact(dim).enumerate() {
                let id = cache.rankings[t].row(r as u64).expect("cached rows are ranked");
                table.row_mut(id).expect("in range").copy_from_slice(row);
            }
        }
    }
    result.total_cycles = result.batches.len() as u64;
    result.finish(tables);
    Ok(result)
}

fn run_uncached(
    mode: Mode,
    model: &ModelConfig,
    batches: impl IntoIterator<Item = MiniBatch>,
    mut tables: Option<Vec<EmbeddingTable>>,
    train: &SurrogateTrainConfig,
) -> Result<RunResult> {
    let mut result = RunResult::new(mode, 0);
    for batch in batches {
        let (lookups, unique) = plain_volume(model, &batch);
        let v = if mode == Mode::Gpuonly {
            BatchVolume {
                lookups,
                unique,
                unique_hits: unique,
                ..BatchVolume::default()
            }
        } else {
            BatchVolume {
                lookups,
                unique,
                unique_misses: unique,
                lookup_misses: lookups,
                ..BatchVolume::default()
            }
        };
        if let Some(tables) = tables.as_mut() {
            embedding::train_step_reference(tables, &batch, model, train)?;
        }
        result.push_batch(v);
    }
    result.total_cycles = result.batches.len() as u64;
    result.finish(tables);
    Ok(result)
}

/// Embedding layers entirely on the CPU; every lookup counts as a miss.
pub fn run_nocache(
    model: &ModelConfig,
    batches: impl IntoIterator<Item = MiniBatch>,
    tables: Option<Vec<EmbeddingTable>>,
    train: &SurrogateTrainConfig,
) -> Result<RunResult> {
    run_uncached(Mode::Nocache, model, batches, tables, train)
}

/// Every table resident in GPU memory; every lookup hits.
pub fn run_gpuonly(
    model: &ModelConfig,
    batches: impl IntoIterator<Item = MiniBatch>,
    tables: Option<Vec<EmbeddingTable>>,
    train: &SurrogateTrainConfig,
) -> Result<RunResult> {
    run_uncached(Mode::Gpuonly, model, batches, tables, train)
}

#[derive(Debug, Clone, Serialize)]
pub struct HitRatePoint {
    pub fraction: f64,
    pub per_table: Vec<f64>,
    pub aggregate: f64,
}

/// Static-cache hit rate at each fraction: the share of lookups whose row
/// ranks inside the top `ceil(fraction * R)`.
pub fn hit_rate_curve(trace: &Trace, rankings: &[RowRanking], fractions: &[f64]) -> Vec<HitRatePoint> {
    let rows = trace.config.rows_per_table;
    let sorted: Vec<Vec<u64>> = (0..trace.config.tables())
        .map(|t| {
            let mut ranks: Vec<u64> = trace
                .batches
                .iter()
                .flat_map(|b| b.table(t).iter().map(|&id| rankings[t].rank(id)))
                .collect();
            ranks.sort_unstable();
            ranks
        })
        .collect();
    fractions
        .iter()
        .map(|&fraction| {
            let k = hot_row_count(rows, fraction);
            let mut hits = 0usize;
            let mut total = 0usize;
            let per_table = sorted
                .iter()
                .map(|ranks| {
                    let h = ranks.partition_point(|&r| r < k);
                    hits += h;
                    total += ranks.len();
                    if ranks.is_empty() {
                        1.0
                    } else {
                        h as f64 / ranks.len() as f64
                    }
                })
                .collect();
            HitRatePoint {
                fraction,
                per_table,
                aggregate: if total == 0 { 1.0 } else { hits as f64 / total as f64 },
            }
        })
        .collect()
}

#[derive(Serialize)]
struct CurveRow {
    fraction: f64,
    table: String,
    hit_rate: f64,
}

/// CSV `(fraction, table, hit_rate)` with one row per table plus an `all`
/// row per fraction.
pub fn write_hit_rate_curve(curve: &[HitRatePoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        for (t, &h) in p.per_table.iter().enumerate() {
            w.serialize(CurveRow {
                fraction: p.fraction,
                table: t.to_string(),
                hit_rate: h,
            })
            .map_err(csv_error)?;
        }
        w.serialize(CurveRow {
            fraction: p.fraction,
            table: "all".into(),
            hit_rate: p.aggregate,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{init_tables, run_reference};
    use crate::workload::{build_pdf, generate_trace, pdf_hot_set, LocalityProfile};

    fn small() -> ModelConfig {
        ModelConfig {
            num_tables: 2,
            rows_per_table: 2000,
            embedding_dim: 4,
            lookups_per_table: 4,
            batch_size: 16,
        }
    }

    fn oracle(trace: &Trace) -> u64 {
        let mut tables = init_tables(&trace.config, 9).unwrap();
        run_reference(&mut tables, &trace.batches, &trace.config, &SurrogateTrainConfig::default())
            .unwrap()
    }

    #[test]
    fn pdf_ranking_agrees_with_hot_set() {
        let m = small();
        let pdf = build_pdf(&LocalityProfile::high(), m.rows_per_table).unwrap();
        let r = rankings_from_pdf(&pdf, 77, 2);
        let cache = build_static_cache(r, m.rows_per_table, 0.02, None).unwrap();
        for t in 0..2 {
            assert_eq!(cache.hot_rows(t), pdf_hot_set(&pdf, 77, t, 40));
        }
        let uniform = rankings_from_pdf(&AccessPdf::uniform(2000), 77, 1);
        let c = build_static_cache(uniform, 2000, 0.01, None).unwrap();
        assert_eq!(c.hot_rows(0), (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn profile_orders_by_count_then_id() {
        let m = ModelConfig {
            num_tables: 1,
            rows_per_table: 100,
            embedding_dim: 1,
            lookups_per_table: 1,
            batch_size: 6,
        };
        let batch = MiniBatch::new(&m, vec![9, 3, 3, 5, 9, 7]).unwrap();
        let trace = Trace {
            config: m,
            seed: 0,
            kind: crate::workload::LocalityKind::Custom,
            zipf_exponent: 0.0,
            batches: vec![batch],
        };
        let cache = build_static_cache(rankings_from_profile(&trace), 100, 0.04, None).unwrap();
        assert_eq!(cache.hot_rows(0), vec![3, 9, 5, 7]);
        assert!(cache.contains(0, 5) && !cache.contains(0, 1));
    }

    #[test]
    fn every_mode_matches_the_oracle() {
        let m = small();
        let pdf = build_pdf(&LocalityProfile::medium(), m.rows_per_table).unwrap();
        let trace = generate_trace(m, &pdf, 60, 4);
        let expected = oracle(&trace);
        let train = SurrogateTrainConfig::default();
        for (fraction, source) in [
            (0.02, HotSetSource::FromPdf),
            (0.10, HotSetSource::FromTraceProfile),
            (1.0, HotSetSource::FromPdf),
        ] {
            let tables = init_tables(&m, 9).unwrap();
            let r = rankings(&trace, Some(&pdf), source).unwrap();
            let cache = build_static_cache(r, m.rows_per_table, fraction, Some(&tables)).unwrap();
            let run = run_static(&m, trace.batches.iter().cloned(), Some(tables), cache, &train)
                .unwrap();
            assert_eq!(run.checksum, Some(expected), "{fraction} {source:?}");
            if fraction == 1.0 {
                assert_eq!(run.totals.lookup_misses, 0);
            }
        }
        let nocache = run_nocache(&m, trace.batches.iter().cloned(), Some(init_tables(&m, 9).unwrap()), &train)
            .unwrap();
        assert_eq!(nocache.checksum, Some(expected));
        assert_eq!(nocache.hit_rate(), 0.0);
        let gpu = run_gpuonly(&m, trace.batches.iter().cloned(), Some(init_tables(&m, 9).unwrap()), &train)
            .unwrap();
        assert_eq!(gpu.checksum, Some(expected));
        assert_eq!(gpu.hit_rate(), 1.0);
    }

    #[test]
    fn curve_is_monotone_and_tracks_pdf_mass() {
        let m = ModelConfig {
            num_tables: 1,
            rows_per_table: 10_000,
            embedding_dim: 1,
            lookups_per_table: 100,
            batch_size: 1000,
        };
        let pdf = build_pdf(&LocalityProfile::high(), m.rows_per_table).unwrap();
        let trace = generate_trace(m, &pdf, 10, 21);
        let fractions = [0.01, 0.02, 0.05, 0.1, 0.3, 1.0];
        let curve = hit_rate_curve(&trace, &rankings_from_pdf(&pdf, 21, 1), &fractions);
        assert!(curve.windows(2).all(|w| w[0].aggregate <= w[1].aggregate));
        assert_eq!(curve.last().unwrap().aggregate, 1.0);
        for p in &curve {
            let mass = pdf.top_fraction_mass(p.fraction);
            assert!((p.aggregate - mass).abs() < 0.01, "{} {} {mass}", p.fraction, p.aggregate);
        }
        // static run agrees with the counting curve
        let cache = build_static_cache(rankings_from_pdf(&pdf, 21, 1), m.rows_per_table, 0.02, None)
            .unwrap();
        let run = run_static(&m, trace.batches.iter().cloned(), None, cache, &SurrogateTrainConfig::default())
            .unwrap();
        assert!((run.hit_rate() - curve[1].aggregate).abs() < 1e-12);
        let mut buf = Vec::new();
        write_hit_rate_curve(&curve[..1], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("fraction,table,hit_rate\n0.01,0,"));
    }
}
