//! Bandwidth arithmetic turning per-batch data volumes into modeled time.
//!
//! Every step costs `bytes / effective bandwidth + fixed overhead`. Sequential
//! modes add their steps; the pipelined mode pays, per cycle, the slowest
//! stage currently occupied.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::controller::csv_error;
use crate::error::{Error, Result};
use crate::run::{BatchVolume, Mode, RunResult};
use crate::workload::ModelConfig;

const ID_BYTES: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareParams {
    /// CPU DRAM bandwidth, bytes/s.
    pub cpu_bw: f64,
    /// GPU HBM bandwidth, bytes/s.
    pub gpu_bw: f64,
    /// PCIe bandwidth per direction, bytes/s.
    pub pcie_bw: f64,
    pub cpu_random_efficiency: f64,
    pub gpu_random_efficiency: f64,
    /// Seconds added to every stage or step.
    pub fixed_overhead: f64,
    /// Seconds of dense compute per iteration.
    pub t_mlp: f64,
}

impl Default for HardwareParams {
    fn default() -> Self {
        Self {
            cpu_bw: 76.8e9,
            gpu_bw: 900e9,
            pcie_bw: 16e9,
            cpu_random_efficiency: 0.25,
            gpu_random_efficiency: 0.8,
            fixed_overhead: 20e-6,
            t_mlp: 2e-3,
        }
    }
}

impl HardwareParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cpu_bw", self.cpu_bw),
            ("gpu_bw", self.gpu_bw),
            ("pcie_bw", self.pcie_bw),
            ("fixed_overhead", self.fixed_overhead),
            ("t_mlp", self.t_mlp),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("cpu_random_efficiency", self.cpu_random_efficiency),
            ("gpu_random_efficiency", self.gpu_random_efficiency),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    fn cpu_random(&self) -> f64 {
        self.cpu_bw * self.cpu_random_efficiency
    }

    fn gpu_random(&self) -> f64 {
        self.gpu_bw * self.gpu_random_efficiency
    }
}

/// Bytes read and written by the sparse update of `lookups` occurrences over
/// `unique` rows: duplicated gradients written and read back for coalescing,
/// then each row read and written once.
fn scatter_bytes(lookups: u64, unique: u64, row_bytes: u64) -> u64 {
    2 * lookups * row_bytes + 2 * unique * row_bytes
}

/// Bytes handled by each pipeline stage for one batch, Plan first.
pub fn stage_bytes(v: &BatchVolume, row_bytes: u64) -> [u64; 5] {
    let moved = (v.unique_misses + v.evictions) * row_bytes;
    [
        v.lookups * ID_BYTES as u64,
        moved,
        moved,
        moved,
        v.lookups * row_bytes + scatter_bytes(v.lookups, v.unique, row_bytes),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepCost {
    pub name: &'static str,
    pub seconds: f64,
    pub cpu_bytes: u64,
    pub gpu_bytes: u64,
    pub pcie_bytes: u64,
}

impl StepCost {
    fn new(name: &'static str, transfer: f64, hw: &HardwareParams) -> Self {
        Self {
            name,
            seconds: transfer + hw.fixed_overhead,
            ..Self::default()
        }
    }

    fn cpu(mut self, b: u64) -> Self {
        self.cpu_bytes += b;
        self
    }

    fn gpu(mut self, b: u64) -> Self {
        self.gpu_bytes += b;
        self
    }

    fn pcie(mut self, b: u64) -> Self {
        self.pcie_bytes += b;
        self
    }

    pub fn bytes(&self) -> u64 {
        self.cpu_bytes + self.gpu_bytes + self.pcie_bytes
    }
}

/// Latency of the five pipeline stages for one batch.
pub fn stage_latency(v: &BatchVolume, row_bytes: u64, hw: &HardwareParams) -> [StepCost; 5] {
    let missed = v.unique_misses * row_bytes;
    let evicted = v.evictions * row_bytes;
    let ids = v.lookups * ID_BYTES as u64;
    let gather = v.lookups * row_bytes;
    let scatter = scatter_bytes(v.lookups, v.unique, row_bytes);
    let (m, e) = (missed as f64, evicted as f64);
    [
        StepCost::new("plan", ids as f64 / hw.pcie_bw, hw).pcie(ids),
        StepCost::new("collect", (m / hw.cpu_random()).max(e / hw.gpu_random()), hw)
            .cpu(missed)
            .gpu(evicted),
        StepCost::new("exchange", m.max(e) / hw.pcie_bw, hw).pcie(missed + evicted),
        StepCost::new("insert", (e / hw.cpu_random()).max(m / hw.gpu_bw), hw)
            .cpu(evicted)
            .gpu(missed),
        train_step(gather, scatter, hw),
    ]
}

fn train_step(gather: u64, scatter: u64, hw: &HardwareParams) -> StepCost {
    let mut s = StepCost::new("train", (gather + scatter) as f64 / hw.gpu_random(), hw)
        .gpu(gather + scatter);
    s.seconds += hw.t_mlp;
    s
}

fn mlp_step(hw: &HardwareParams) -> StepCost {
    StepCost::new("mlp", hw.t_mlp, hw)
}

/// Step sequence of one iteration under `mode`.
pub fn mode_steps(
    mode: Mode,
    v: &BatchVolume,
    model: &ModelConfig,
    hw: &HardwareParams,
) -> Vec<StepCost> {
    let rb = model.row_bytes();
    let reduced = model.tables() as u64 * model.batch_size as u64 * rb;
    let ids = v.lookups * ID_BYTES as u64;
    match mode {
        Mode::Scratchpipe | Mode::Strawman => stage_latency(v, rb, hw).to_vec(),
        Mode::Gpuonly => vec![train_step(
            v.lookups * rb,
            scatter_bytes(v.lookups, v.unique, rb),
            hw,
        )],
        Mode::Nocache | Mode::Reference => {
            let gather = v.lookups * rb;
            let scatter = scatter_bytes(v.lookups, v.unique, rb);
            vec![
                StepCost::new("cpu_gather", gather as f64 / hw.cpu_random(), hw).cpu(gather),
                StepCost::new("pcie_forward", reduced as f64 / hw.pcie_bw, hw).pcie(reduced),
                mlp_step(hw),
                StepCost::new("pcie_backward", reduced as f64 / hw.pcie_bw, hw).pcie(reduced),
                StepCost::new("cpu_scatter", scatter as f64 / hw.cpu_random(), hw).cpu(scatter),
            ]
        }
        Mode::Static => {
            let miss_lookups = v.lookup_misses;
            let hit_lookups = v.lookups - miss_lookups;
            let missed_ids = miss_lookups * ID_BYTES as u64;
            let gpu_gather = hit_lookups * rb;
            let cpu_gather = miss_lookups * rb;
            let gpu_scatter = scatter_bytes(hit_lookups, v.unique_hits, rb);
            let cpu_scatter = scatter_bytes(miss_lookups, v.unique_misses, rb);
            vec![
                StepCost::new("ids_to_gpu", ids as f64 / hw.pcie_bw, hw).pcie(ids),
                StepCost::new("query", ids as f64 / hw.gpu_random(), hw).gpu(ids),
                StepCost::new("missed_ids_to_cpu", missed_ids as f64 / hw.pcie_bw, hw)
                    .pcie(missed_ids),
                StepCost::new(
                    "gather",
                    (gpu_gather as f64 / hw.gpu_random()).max(cpu_gather as f64 / hw.cpu_random()),
                    hw,
                )
                .gpu(gpu_gather)
                .cpu(cpu_gather),
                StepCost::new("pcie_forward", reduced as f64 / hw.pcie_bw, hw).pcie(reduced),
                mlp_step(hw),
                StepCost::new("pcie_backward", reduced as f64 / hw.pcie_bw, hw).pcie(reduced),
                StepCost::new(
                    "scatter",
                    (gpu_scatter as f64 / hw.gpu_random())
                        .max(cpu_scatter as f64 / hw.cpu_random()),
                    hw,
                )
                .gpu(gpu_scatter)
                .cpu(cpu_scatter),
            ]
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationReport {
    pub mode: Mode,
    /// Steps in execution order with seconds and bytes summed over the run.
    pub steps: Vec<StepCost>,
    pub total_seconds: f64,
    /// Mean seconds per iteration over the whole run.
    pub iteration_seconds: f64,
    /// Mean seconds per iteration once the pipeline is full (equal to
    /// `iteration_seconds` for sequential modes).
    pub steady_iteration_seconds: f64,
    pub cpu_bytes: u64,
    pub gpu_bytes: u64,
    pub pcie_bytes: u64,
}

/// Models a finished run. Pipelined runs charge each cycle its slowest
/// occupied stage; every other mode sums its steps per batch.
pub fn evaluate(run: &RunResult, model: &ModelConfig, hw: &HardwareParams) -> IterationReport {
    let per_batch: Vec<Vec<StepCost>> = run
        .batches
        .iter()
        .map(|v| mode_steps(run.mode, v, model, hw))
        .collect();
    let mut steps: Vec<StepCost> = per_batch
        .first()
        .map(|s| {
            s.iter()
                .map(|c| StepCost {
                    name: c.name,
                    ..StepCost::default()
                })
                .collect()
        })
        .unwrap_or_default();
    for batch in &per_batch {
        for (acc, c) in steps.iter_mut().zip(batch) {
            acc.seconds += c.seconds;
            acc.cpu_bytes += c.cpu_bytes;
            acc.gpu_bytes += c.gpu_bytes;
            acc.pcie_bytes += c.pcie_bytes;
        }
    }
    let batches = per_batch.len().max(1) as f64;
    let (total, steady) = if run.mode == Mode::Scratchpipe {
        let cycle_cost = |occ: &[Option<u64>; 5]| {
            occ.iter()
                .enumerate()
                .filter_map(|(stage, b)| b.map(|b| per_batch[b as usize][stage].seconds))
                .fold(0.0, f64::max)
        };
        let total: f64 = run.cycles.iter().map(|c| cycle_cost(&c.occupancy)).sum();
        let full: Vec<f64> = run
            .cycles
            .iter()
            .filter(|c| c.occupancy.iter().all(Option::is_some))
            .map(|c| cycle_cost(&c.occupancy))
            .collect();
        let steady = if full.is_empty() {
            total / batches
        } else {
            full.iter().sum::<f64>() / full.len() as f64
        };
        (total, steady)
    } else {
        let total: f64 = steps.iter().map(|s| s.seconds).sum();
        (total, total / batches)
    };
    IterationReport {
        mode: run.mode,
        total_seconds: total,
        iteration_seconds: total / batches,
        steady_iteration_seconds: steady,
        cpu_bytes: steps.iter().map(|s| s.cpu_bytes).sum(),
        gpu_bytes: steps.iter().map(|s| s.gpu_bytes).sum(),
        pcie_bytes: steps.iter().map(|s| s.pcie_bytes).sum(),
        steps,
    }
}

/// Storage needed to hold every row referenced by `window` concurrent
/// batches with no reuse: `T * L * N * D * 4 * window`.
pub fn worst_case_storage_bytes(model: &ModelConfig, window: u32) -> u64 {
    model.tables() as u64
        * model.lookups_per_table as u64
        * model.batch_size as u64
        * model.row_bytes()
        * window as u64
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedupRow {
    pub trace: String,
    pub mode: Mode,
    pub total_seconds: f64,
    pub speedup_vs_static: f64,
}

/// Total modeled time per `(trace, mode)`, normalized to the static-cache
/// run of the same trace.
#[derive(Debug, Clone, Serialize)]
pub struct SpeedupReport {
    pub rows: Vec<SpeedupRow>,
}

pub fn speedup_report<'a>(
    reports: impl IntoIterator<Item = (&'a str, &'a IterationReport)>,
) -> Result<SpeedupReport> {
    let reports: Vec<(&str, &IterationReport)> = reports.into_iter().collect();
    let mut rows = Vec::new();
    for &(trace, report) in &reports {
        let base = reports
            .iter()
            .find(|(t, r)| *t == trace && r.mode == Mode::Static)
            .ok_or_else(|| Error::Config(format!("no static-cache run for trace {trace}")))?
            .1
            .total_seconds;
        if !(base > 0.0 && report.total_seconds > 0.0) {
            return Err(Error::Config(format!("non-positive modeled time for {trace}")));
        }
        rows.push(SpeedupRow {
            trace: trace.to_string(),
            mode: report.mode,
            total_seconds: report.total_seconds,
            speedup_vs_static: base / report.total_seconds,
        });
    }
    Ok(SpeedupReport { rows })
}

impl SpeedupReport {
    pub fn get(&self, trace: &str, mode: Mode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.trace == trace && r.mode == mode)
            .map(|r| r.speedup_vs_static)
    }

    /// `{mode: {trace: speedup}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
        for r in &self.rows {
            map.entry(r.mode.as_str())
                .or_default()
                .insert(&r.trace, r.speedup_vs_static);
        }
        serde_json::to_value(map).expect("string keys")
    }
}

#[derive(Serialize)]
struct BreakdownRow<'a> {
    mode: Mode,
    trace: &'a str,
    stage: &'a str,
    seconds: f64,
    bytes: u64,
}

/// CSV of `(mode, trace, stage, seconds, bytes)`.
pub fn write_breakdown<'a>(
    reports: impl IntoIterator<Item = (&'a str, &'a IterationReport)>,
    out: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (trace, report) in reports {
        for step in &report.steps {
            w.serialize(BreakdownRow {
                mode: report.mode,
                trace,
                stage: step.name,
                seconds: step.seconds,
                bytes: step.bytes(),
            })
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(lookups: u64, unique: u64, misses: u64, evictions: u64) -> BatchVolume {
        BatchVolume {
            lookups,
            unique,
            unique_hits: unique - misses,
            unique_misses: misses,
            lookup_misses: misses,
            evictions,
            vacancies_used: misses - evictions,
        }
    }

    #[test]
    fn default_worst_case_storage() {
        let model = ModelConfig::default();
        assert_eq!(worst_case_storage_bytes(&model, 6), 960 * 1024 * 1024);
        assert_eq!(worst_case_storage_bytes(&model, 1), 160 * 1024 * 1024);
        let unit = ModelConfig {
            num_tables: 1,
            rows_per_table: 1,
            embedding_dim: 1,
            lookups_per_table: 1,
            batch_size: 1,
        };
        assert_eq!(worst_case_storage_bytes(&unit, 6), 24);
    }

    #[test]
    fn idle_transfer_stages_cost_only_overhead() {
        let hw = HardwareParams::default();
        let s = stage_latency(&vol(100, 50, 0, 0), 512, &hw);
        for stage in &s[1..4] {
            assert_eq!(stage.seconds, hw.fixed_overhead);
        }
    }

    #[test]
    fn exchange_of_thousand_rows() {
        let hw = HardwareParams::default();
        let s = stage_latency(&vol(2000, 1500, 1000, 0), 128 * 4, &hw);
        let expected = 1000.0 * 512.0 / 16e9 + 20e-6;
        assert!((s[2].seconds - expected).abs() < 1e-15);
        assert!((s[2].seconds - 52e-6).abs() < 1e-12);
    }

    #[test]
    fn volume_terms_scale_linearly_with_row_size() {
        let hw = HardwareParams::default();
        let v = vol(4000, 3000, 1200, 700);
        let a = stage_latency(&v, 256, &hw);
        let b = stage_latency(&v, 512, &hw);
        for i in 1..4 {
            let ta = a[i].seconds - hw.fixed_overhead;
            let tb = b[i].seconds - hw.fixed_overhead;
            assert!((tb - 2.0 * ta).abs() < 1e-15, "stage {i}");
        }
        let ta = a[4].seconds - hw.fixed_overhead - hw.t_mlp;
        let tb = b[4].seconds - hw.fixed_overhead - hw.t_mlp;
        assert!((tb - 2.0 * ta).abs() < 1e-15);
    }

    #[test]
    fn equal_stages_sum_versus_max() {
        use crate::run::CycleRecord;
        // zero-byte batches: every pipeline stage costs the same overhead
        let hw = HardwareParams {
            t_mlp: 1e-30,
            ..HardwareParams::default()
        };
        let model = ModelConfig::default();
        let mut run = RunResult::new(Mode::Scratchpipe, 1);
        for _ in 0..8 {
            run.push_batch(BatchVolume::default());
        }
        for c in 0..12u64 {
            let occupancy = std::array::from_fn(|s| {
                let b = c as i64 - s as i64;
                (0..8).contains(&b).then_some(b as u64)
            });
            run.cycles.push(CycleRecord {
                cycle: c,
                occupancy,
                completed: 0,
            });
        }
        let piped = evaluate(&run, &model, &hw);
        run.mode = Mode::Strawman;
        let straw = evaluate(&run, &model, &hw);
        let l = hw.fixed_overhead;
        assert!((piped.total_seconds - 12.0 * l).abs() < 1e-15);
        assert!((straw.total_seconds - 40.0 * l).abs() < 1e-15);
        assert!((straw.iteration_seconds - 5.0 * l).abs() < 1e-15);
        assert!((piped.steady_iteration_seconds - l).abs() < 1e-15);
    }

    #[test]
    fn more_bandwidth_never_slower_and_more_misses_never_faster() {
        let base = HardwareParams::default();
        let v = vol(5000, 4000, 2000, 1500);
        let worse = vol(5000, 4000, 2500, 2000);
        let s0 = stage_latency(&v, 512, &base);
        let s_miss = stage_latency(&worse, 512, &base);
        for i in 1..4 {
            assert!(s_miss[i].seconds >= s0[i].seconds);
        }
        for faster in [
            HardwareParams { cpu_bw: 2.0 * base.cpu_bw, ..base },
            HardwareParams { gpu_bw: 2.0 * base.gpu_bw, ..base },
            HardwareParams { pcie_bw: 2.0 * base.pcie_bw, ..base },
        ] {
            for (a, b) in stage_latency(&v, 512, &faster).iter().zip(&s0) {
                assert!(a.seconds <= b.seconds && a.seconds > 0.0 && a.seconds.is_finite());
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(HardwareParams::default().validate().is_ok());
        let bad = HardwareParams {
            cpu_random_efficiency: 0.0,
            ..HardwareParams::default()
        };
        assert!(bad.validate().is_err());
        let neg = HardwareParams {
            pcie_bw: -1.0,
            ..HardwareParams::default()
        };
        assert!(neg.validate().is_err());
    }
}
