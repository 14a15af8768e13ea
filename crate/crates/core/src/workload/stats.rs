use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;

use super::{hot_row_count, pdf_hot_set, AccessPdf, Trace};

/// Sorted access-count profile of one table.
#[derive(Debug, Clone, Serialize)]
pub struct TableStats {
    pub table: usize,
    pub accesses: u64,
    pub unique_ids: u64,
    /// Access counts of touched rows, most accessed first.
    #[serde(skip)]
    pub sorted_counts: Vec<u64>,
    pub top_mass: Vec<(f64, f64)>,
}

impl TableStats {
    /// Share of accesses going to the `fraction` most accessed rows of the table.
    pub fn mass_at(&self, rows: u64, fraction: f64) -> f64 {
        let k = hot_row_count(rows, fraction) as usize;
        let top: u64 = self.sorted_counts.iter().take(k).sum();
        top as f64 / self.accesses.max(1) as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub rows_per_table: u64,
    pub batches: u64,
    pub tables: Vec<TableStats>,
    /// (fraction, mass) averaged over tables.
    pub top_mass: Vec<(f64, f64)>,
}

pub const REPORTED_FRACTIONS: [f64; 7] = [0.01, 0.02, 0.05, 0.10, 0.20, 0.50, 1.0];

impl StatsReport {
    pub fn mass_at(&self, fraction: f64) -> f64 {
        let n = self.tables.len().max(1) as f64;
        self.tables
            .iter()
            .map(|t| t.mass_at(self.rows_per_table, fraction))
            .sum::<f64>()
            / n
    }
}

pub fn trace_stats(trace: &Trace) -> StatsReport {
    let rows = trace.config.rows_per_table;
    let tables: Vec<TableStats> = (0..trace.config.tables())
        .map(|t| {
            let mut counts: FxHashMap<u64, u64> = FxHashMap::default();
            for batch in &trace.batches {
                for &id in batch.table(t) {
                    *counts.entry(id).or_default() += 1;
                }
            }
            let mut sorted_counts: Vec<u64> = counts.into_values().collect();
            sorted_counts.sort_unstable_by(|a, b| b.cmp(a));
            let mut stats = TableStats {
                table: t,
                accesses: sorted_counts.iter().sum(),
                unique_ids: sorted_counts.len() as u64,
                sorted_counts,
                top_mass: Vec::new(),
            };
            stats.top_mass = REPORTED_FRACTIONS
                .iter()
                .map(|&f| (f, stats.mass_at(rows, f)))
                .collect();
            stats
        })
        .collect();
    let mut report = StatsReport {
        rows_per_table: rows,
        batches: trace.num_batches(),
        tables,
        top_mass: Vec::new(),
    };
    report.top_mass = REPORTED_FRACTIONS
        .iter()
        .map(|&f| (f, report.mass_at(f)))
        .collect();
    report
}

/// Share of the trace's lookups that land in the PDF's hot set (the top
/// `fraction` of ranks). Unbiased even when the trace is short relative to
/// the row count, unlike the sorted empirical profile.
pub fn hot_set_share(trace: &Trace, pdf: &AccessPdf, fraction: f64) -> f64 {
    let k = hot_row_count(pdf.rows(), fraction);
    let mut hits = 0u64;
    let mut total = 0u64;
    for t in 0..trace.config.tables() {
        let hot: FxHashSet<u64> = pdf_hot_set(pdf, trace.seed, t, k).into_iter().collect();
        for batch in &trace.batches {
            let ids = batch.table(t);
            hits += ids.iter().filter(|id| hot.contains(id)).count() as u64;
            total += ids.len() as u64;
        }
    }
    hits as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{build_pdf, generate_trace, LocalityProfile, MiniBatch, ModelConfig};

    #[test]
    fn single_hot_id() {
        let config = ModelConfig {
            num_tables: 1,
            rows_per_table: 100,
            embedding_dim: 1,
            lookups_per_table: 2,
            batch_size: 3,
        };
        let batch = MiniBatch::new(&config, vec![0; 6]).unwrap();
        let trace = Trace {
            config,
            seed: 0,
            kind: crate::workload::LocalityKind::Custom,
            zipf_exponent: 0.0,
            batches: vec![batch.clone(), batch],
        };
        let report = trace_stats(&trace);
        assert_eq!(report.tables[0].unique_ids, 1);
        assert_eq!(report.tables[0].sorted_counts, vec![12]);
        assert_eq!(report.mass_at(0.01), 1.0);
    }

    #[test]
    fn generated_profiles_match_targets() {
        let config = ModelConfig {
            num_tables: 1,
            rows_per_table: 10_000,
            embedding_dim: 1,
            lookups_per_table: 100,
            batch_size: 1000,
        };
        for (profile, target, tol) in [
            (LocalityProfile::high(), 0.80, 0.01),
            (LocalityProfile::random(), 0.02, 0.005),
        ] {
            let pdf = build_pdf(&profile, config.rows_per_table).unwrap();
            let trace = generate_trace(config, &pdf, 10, 5);
            let share = hot_set_share(&trace, &pdf, 0.02);
            assert!((share - target).abs() <= tol, "{profile:?}: {share}");
        }
        // the sorted empirical profile sits close to the hot-set share for a
        // high-locality table sampled densely
        let pdf = build_pdf(&LocalityProfile::high(), config.rows_per_table).unwrap();
        let trace = generate_trace(config, &pdf, 10, 5);
        let sorted = trace_stats(&trace).mass_at(0.02);
        assert!((sorted - 0.80).abs() < 0.01, "{sorted}");
    }
}
