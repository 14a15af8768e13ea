use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::{AccessPdf, LocalityKind, MiniBatch, ModelConfig, Trace};
use crate::seed::{self, splitmix64};

const FEISTEL_ROUNDS: usize = 4;

/// Seeded bijection on `[0, rows)` mapping popularity rank to row ID, so hot
/// rows are scattered through the table. Balanced Feistel network with
/// cycle walking; needs no per-row storage.
#[derive(Debug, Clone)]
pub struct RankPermutation {
    rows: u64,
    half_bits: u32,
    keys: [u64; FEISTEL_ROUNDS],
}

impl RankPermutation {
    pub fn new(rows: u64, seed: u64) -> Self {
        let bits = 64 - rows.saturating_sub(1).leading_zeros();
        let half_bits = bits.div_ceil(2).max(1);
        let mut keys = [0u64; FEISTEL_ROUNDS];
        for (i, k) in keys.iter_mut().enumerate() {
            *k = seed::derive(seed, &[i as u64]);
        }
        Self {
            rows,
            half_bits,
            keys,
        }
    }

    fn round(&self, x: u64) -> u64 {
        let mask = (1u64 << self.half_bits) - 1;
        let (mut left, mut right) = (x >> self.half_bits, x & mask);
        for key in &self.keys {
            let f = splitmix64(key ^ right) & mask;
            (left, right) = (right, left ^ f);
        }
        (left << self.half_bits) | right
    }

    fn unround(&self, x: u64) -> u64 {
        let mask = (1u64 << self.half_bits) - 1;
        let (mut left, mut right) = (x >> self.half_bits, x & mask);
        for key in self.keys.iter().rev() {
            let f = splitmix64(key ^ left) & mask;
            (left, right) = (right ^ f, left);
        }
        (left << self.half_bits) | right
    }

    /// Rank of row `id`; inverse of [`RankPermutation::apply`].
    pub fn invert(&self, id: u64) -> u64 {
        debug_assert!(id < self.rows);
        let mut x = id;
        loop {
            x = self.unround(x);
            if x < self.rows {
                return x;
            }
        }
    }

    pub fn apply(&self, rank: u64) -> u64 {
        debug_assert!(rank < self.rows);
        let mut x = rank;
        loop {
            x = self.round(x);
            if x < self.rows {
                return x;
            }
        }
    }
}

pub fn table_permutation(seed: u64, table: usize, rows: u64) -> RankPermutation {
    RankPermutation::new(
        rows,
        seed::derive(seed, &[table as u64, seed::STREAM_PERMUTATION]),
    )
}

/// The `k` rows a static cache built from the generating PDF would hold for
/// `table`: the `k` most likely ranks, or the lowest IDs when every row is
/// equally likely.
pub fn pdf_hot_set(pdf: &AccessPdf, seed: u64, table: usize, k: u64) -> Vec<u64> {
    let k = k.min(pdf.rows());
    if pdf.exponent() == 0.0 {
        return (0..k).collect();
    }
    let perm = table_permutation(seed, table, pdf.rows());
    (0..k).map(|rank| perm.apply(rank)).collect()
}

/// Streaming trace synthesis. Yields exactly the batches [`generate_trace`]
/// would materialize, one at a time.
pub struct TraceGenerator {
    config: ModelConfig,
    sampler: Zipf<f64>,
    rngs: Vec<ChaCha8Rng>,
    perms: Vec<RankPermutation>,
    remaining: u64,
}

impl TraceGenerator {
    pub fn new(config: ModelConfig, pdf: &AccessPdf, num_batches: u64, seed: u64) -> Self {
        assert_eq!(
            pdf.rows(),
            config.rows_per_table,
            "pdf must cover every row of the table"
        );
        let sampler = Zipf::new(pdf.rows() as f64, pdf.exponent())
            .expect("calibrated exponent is finite and non-negative");
        let tables = config.tables();
        let rngs = (0..tables)
            .map(|t| {
                ChaCha8Rng::seed_from_u64(seed::derive(seed, &[t as u64, seed::STREAM_SAMPLES]))
            })
            .collect();
        let perms = (0..tables)
            .map(|t| table_permutation(seed, t, pdf.rows()))
            .collect();
        Self {
            config,
            sampler,
            rngs,
            perms,
            remaining: num_batches,
        }
    }
}

impl Iterator for TraceGenerator {
    type Item = MiniBatch;

    fn next(&mut self) -> Option<MiniBatch> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let per_table = self.config.lookups_per_batch();
        let mut ids = Vec::with_capacity(self.config.ids_per_batch());
        for (rng, perm) in self.rngs.iter_mut().zip(&self.perms) {
            for _ in 0..per_table {
                let rank = self.sampler.sample(rng) as u64 - 1;
                ids.push(perm.apply(rank));
            }
        }
        Some(MiniBatch::new(&self.config, ids).expect("generator respects the model shape"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining as usize, Some(self.remaining as usize))
    }
}

/// Samples `num_batches` mini-batches i.i.d. from `pdf`. Pure in
/// `(config, pdf, seed)`.
pub fn generate_trace(config: ModelConfig, pdf: &AccessPdf, num_batches: u64, seed: u64) -> Trace {
    Trace {
        config,
        seed,
        kind: pdf.kind(),
        zipf_exponent: pdf.exponent(),
        batches: TraceGenerator::new(config, pdf, num_batches, seed).collect(),
    }
}

/// A hazard-provoking trace: row 0 recurs in every `stride`-th batch and all
/// other lookups touch fresh rows, so every miss forces an eviction once the
/// scratchpad is full. Rows wrap around if the table is too small to keep
/// them fresh.
pub fn crafted_trace(config: ModelConfig, num_batches: u64, stride: u64) -> Trace {
    let stride = stride.max(1);
    let fresh_rows = config.rows_per_table.saturating_sub(1).max(1);
    let mut next_fresh = vec![0u64; config.tables()];
    let batches = (0..num_batches)
        .map(|b| {
            let mut ids = Vec::with_capacity(config.ids_per_batch());
            for counter in next_fresh.iter_mut() {
                for pos in 0..config.lookups_per_batch() {
                    if pos == 0 && b % stride == 0 {
                        ids.push(0);
                    } else {
                        ids.push(1 + *counter % fresh_rows);
                        *counter += 1;
                    }
                }
            }
            MiniBatch::new(&config, ids).expect("crafted batch matches model shape")
        })
        .collect();
    Trace {
        config,
        seed: stride,
        kind: LocalityKind::Custom,
        zipf_exponent: 0.0,
        batches,
    }
}
