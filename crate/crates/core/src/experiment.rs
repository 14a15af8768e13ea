//! Experiment drivers behind the command-line tool: running a configured
//! mode on a trace, cross-mode verification, and parameter sweeps.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::baselines::{build_static_cache, rankings, run_gpuonly, run_nocache, run_static};
use crate::config::ExperimentConfig;
use crate::controller::{ReplacementPolicy, WindowShape};
use crate::cost::{evaluate, speedup_report, worst_case_storage_bytes, IterationReport};
use crate::embedding::{self, first_divergence, init_tables, run_reference, EmbeddingTable};
use crate::error::{Error, Result};
use crate::pipeline::{required_slots, run_pipelined, run_strawman, Engine, PipelineConfig};
use crate::run::{Mode, RunResult};
use crate::workload::{build_pdf, generate_trace, AccessPdf, LocalityKind, ModelConfig, Trace};

/// Largest set of embedding tables a functional run will allocate.
pub const FUNCTIONAL_BYTES_LIMIT: u64 = 2 << 30;

/// Modes compared by cost reports, slowest expected first.
pub const COST_MODES: [Mode; 5] = [
    Mode::Nocache,
    Mode::Static,
    Mode::Strawman,
    Mode::Scratchpipe,
    Mode::Gpuonly,
];

/// The distribution a trace was sampled from, as recorded in its header.
pub fn trace_pdf(trace: &Trace) -> AccessPdf {
    AccessPdf::zipf(trace.kind, trace.config.rows_per_table, trace.zipf_exponent)
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Trace> {
    cfg.model.validate()?;
    let pdf = build_pdf(&cfg.locality.profile(), cfg.model.rows_per_table)?;
    Ok(generate_trace(cfg.model, &pdf, cfg.num_batches, cfg.seed))
}

pub fn pipeline_config(cfg: &ExperimentConfig) -> PipelineConfig {
    PipelineConfig {
        policy: cfg.policy,
        policy_seed: cfg.seed,
        train: cfg.train,
        ..PipelineConfig::default()
    }
}

pub fn table_bytes(model: &ModelConfig) -> u64 {
    model.tables() as u64 * model.rows_per_table * model.row_bytes()
}

/// Whether a functional run of `model` stays under [`FUNCTIONAL_BYTES_LIMIT`].
pub fn fits_functional(model: &ModelConfig) -> bool {
    table_bytes(model) <= FUNCTIONAL_BYTES_LIMIT
}

fn initial_tables(cfg: &ExperimentConfig, trace: &Trace) -> Result<Vec<EmbeddingTable>> {
    if !fits_functional(&trace.config) {
        return Err(Error::Capacity {
            bytes: table_bytes(&trace.config),
        });
    }
    init_tables(&trace.config, cfg.seed)
}

/// Runs `mode` on `trace`. Functional runs carry embedding values and a
/// checksum; otherwise only directory state and data volumes are tracked.
pub fn run_mode(
    cfg: &ExperimentConfig,
    trace: &Trace,
    mode: Mode,
    functional: bool,
) -> Result<RunResult> {
    let tables = functional.then(|| initial_tables(cfg, trace)).transpose()?;
    let model = &trace.config;
    let batches = trace.batches.iter().cloned();
    match mode {
        Mode::Scratchpipe | Mode::Strawman => {
            let fraction = cfg.capacity_fraction_for(mode)?.expect("cached mode");
            let pc = pipeline_config(cfg);
            if mode == Mode::Scratchpipe {
                run_pipelined(trace, tables, fraction, &pc)
            } else {
                run_strawman(trace, tables, fraction, &pc)
            }
        }
        Mode::Static => {
            let fraction = cfg.capacity_fraction_for(mode)?.expect("cached mode");
            let r = rankings(trace, Some(&trace_pdf(trace)), cfg.static_source)?;
            let cache = build_static_cache(r, model.rows_per_table, fraction, tables.as_deref())?;
            run_static(model, batches, tables, cache, &cfg.train)
        }
        Mode::Nocache => run_nocache(model, batches, tables, &cfg.train),
        Mode::Gpuonly => run_gpuonly(model, batches, tables, &cfg.train),
        Mode::Reference => Err(Error::Config("use reference_checksum for the oracle".into())),
    }
}

pub fn reference_tables(cfg: &ExperimentConfig, trace: &Trace) -> Result<Vec<EmbeddingTable>> {
    let mut tables = initial_tables(cfg, trace)?;
    run_reference(&mut tables, &trace.batches, &trace.config, &cfg.train)?;
    Ok(tables)
}

/// Human-readable storage sizing for a capacity failure.
pub fn sizing_message(trace: &Trace, slots: u64) -> String {
    let m = &trace.config;
    let need = worst_case_storage_bytes(m, WindowShape::SCRATCHPIPE.width());
    let have = slots * m.row_bytes() * m.tables() as u64;
    format!(
        "worst-case Storage = T*L*N*D*4*6 = {}*{}*{}*{}*4*6 = {need} bytes; configured scratchpad = {slots} slots x {} bytes x {} tables = {have} bytes",
        m.num_tables,
        m.lookups_per_table,
        m.batch_size,
        m.embedding_dim,
        m.row_bytes(),
        m.num_tables,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub table: usize,
    pub row: u64,
    pub element: usize,
}

fn divergence(a: &[EmbeddingTable], b: &[EmbeddingTable]) -> Option<Divergence> {
    first_divergence(a, b).map(|(table, row, element)| Divergence {
        table,
        row,
        element,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeCheck {
    pub mode: Mode,
    pub checksum: u64,
    pub matches: bool,
    pub train_misses: u64,
    pub hazards: usize,
    pub divergence: Option<Divergence>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NegativeCheck {
    pub window: WindowShape,
    pub slots_per_table: u64,
    pub checksum: u64,
    pub mismatch: bool,
    pub hazards: usize,
    pub hazard_kinds: Vec<String>,
    /// The broken configuration was caught (mismatch or logged hazard).
    pub detected: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub config_digest: String,
    pub batches: u64,
    pub reference_checksum: u64,
    pub modes: Vec<ModeCheck>,
    pub negative: Option<NegativeCheck>,
    pub passed: bool,
}

/// Runs the oracle, strawman, static and pipelined modes and compares the
/// final tables bit for bit. With `break_window`, additionally runs the
/// pipeline with that (shortened) window on exactly as many slots as the
/// shortened window needs and expects the breakage to be detected.
pub fn verify(
    cfg: &ExperimentConfig,
    trace: &Trace,
    break_window: Option<WindowShape>,
) -> Result<VerifyReport> {
    let reference = reference_tables(cfg, trace)?;
    let reference_checksum = embedding::checksum(&reference);
    let mut modes = Vec::new();
    for mode in [Mode::Strawman, Mode::Static, Mode::Scratchpipe] {
        let run = run_mode(cfg, trace, mode, true)?;
        let tables = run.tables.as_ref().expect("functional run");
        let checksum = run.checksum.expect("functional run");
        modes.push(ModeCheck {
            mode,
            checksum,
            matches: checksum == reference_checksum,
            train_misses: run.train_misses,
            hazards: run.hazards.len(),
            divergence: divergence(tables, &reference),
        });
    }
    let negative = break_window
        .map(|window| -> Result<NegativeCheck> {
            let slots = required_slots(&trace.config, &trace.batches, window)
                .into_iter()
                .max()
                .unwrap_or(1)
                .min(trace.config.rows_per_table);
            let pc = PipelineConfig {
                window,
                ..pipeline_config(cfg)
            };
            let run = Engine::new(
                trace.config,
                trace.batches.iter().cloned(),
                Some(initial_tables(cfg, trace)?),
                slots as u32,
                pc,
            )?
            .run()?;
            let checksum = run.checksum.expect("functional run");
            let mut kinds: Vec<String> = run
                .hazards
                .iter()
                .map(|h| serde_json::to_value(h.kind).unwrap().as_str().unwrap().to_string())
                .collect();
            kinds.sort();
            kinds.dedup();
            let mismatch = checksum != reference_checksum;
            Ok(NegativeCheck {
                window,
                slots_per_table: slots,
                checksum,
                mismatch,
                hazards: run.hazards.len(),
                hazard_kinds: kinds,
                detected: mismatch || !run.hazards.is_empty(),
            })
        })
        .transpose()?;
    let passed = modes
        .iter()
        .all(|m| m.matches && m.train_misses == 0 && m.hazards == 0)
        && negative.as_ref().is_none_or(|n| n.detected);
    Ok(VerifyReport {
        config_digest: cfg.digest(),
        batches: trace.num_batches(),
        reference_checksum,
        modes,
        negative,
        passed,
    })
}

/// Volume-only runs of every cost mode plus their modeled timings.
pub fn cost_suite(
    cfg: &ExperimentConfig,
    trace: &Trace,
) -> Result<Vec<(RunResult, IterationReport)>> {
    COST_MODES
        .iter()
        .map(|&mode| {
            let run = run_mode(cfg, trace, mode, false)?;
            let report = evaluate(&run, &trace.config, &cfg.hardware);
            Ok((run, report))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SweepAxis {
    Dim(Vec<u32>),
    Lookups(Vec<u32>),
    Fraction(Vec<f64>),
    Policy(Vec<ReplacementPolicy>),
    Locality(Vec<LocalityKind>),
}

fn parse_list<T: std::str::FromStr>(axis: &str, values: &str) -> Result<Vec<T>> {
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {axis}")))
        })
        .collect()
}

/// `a..b` steps by `a`; `a..b:s` steps by `s`; otherwise a comma list.
fn parse_fractions(values: &str) -> Result<Vec<f64>> {
    let Some((lo, rest)) = values.split_once("..") else {
        return parse_list("fraction", values);
    };
    let (hi, step) = match rest.split_once(':') {
        Some((hi, step)) => (hi, step),
        None => (rest, lo),
    };
    let bad = || Error::Config(format!("bad fraction range {values:?}"));
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    let step: f64 = step.trim().parse().map_err(|_| bad())?;
    if !(step > 0.0 && lo > 0.0 && hi >= lo) {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (axis, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--vary expects AXIS=VALUES, got {s:?}")))?;
        Ok(match axis.trim() {
            "dim" => SweepAxis::Dim(parse_list(axis, values)?),
            "lookups" => SweepAxis::Lookups(parse_list(axis, values)?),
            "fraction" => SweepAxis::Fraction(parse_fractions(values)?),
            "policy" => SweepAxis::Policy(parse_list(axis, values)?),
            "locality" => SweepAxis::Locality(parse_list(axis, values)?),
            other => return Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        })
    }
}

impl SweepAxis {
    fn name(&self) -> &'static str {
        match self {
            SweepAxis::Dim(_) => "dim",
            SweepAxis::Lookups(_) => "lookups",
            SweepAxis::Fraction(_) => "fraction",
            SweepAxis::Policy(_) => "policy",
            SweepAxis::Locality(_) => "locality",
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::Dim(v) | SweepAxis::Lookups(v) => v.len(),
            SweepAxis::Fraction(v) => v.len(),
            SweepAxis::Policy(v) => v.len(),
            SweepAxis::Locality(v) => v.len(),
        }
    }

    fn apply(&self, i: usize, cfg: &mut ExperimentConfig) -> String {
        match self {
            SweepAxis::Dim(v) => {
                cfg.model.embedding_dim = v[i];
                v[i].to_string()
            }
            SweepAxis::Lookups(v) => {
                cfg.model.lookups_per_table = v[i];
                v[i].to_string()
            }
            SweepAxis::Fraction(v) => {
                cfg.capacity_fraction = Some(v[i]);
                format!("{}", v[i])
            }
            SweepAxis::Policy(v) => {
                cfg.policy = v[i];
                v[i].to_string()
            }
            SweepAxis::Locality(v) => {
                cfg.locality.kind = v[i];
                cfg.locality.target_top2pct_mass = None;
                v[i].to_string()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub settings: BTreeMap<String, String>,
    pub config_digest: String,
    pub error: Option<String>,
    /// Modeled total seconds per mode.
    pub total_seconds: BTreeMap<String, f64>,
    /// Speedup over the static cache per mode.
    pub speedup: BTreeMap<String, f64>,
    pub static_hit_rate: Option<f64>,
    pub equivalent: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub base_digest: String,
    pub points: Vec<SweepPoint>,
}

/// Every combination of the axes, in row-major order.
pub fn sweep_configs(
    base: &ExperimentConfig,
    axes: &[SweepAxis],
) -> Vec<(BTreeMap<String, String>, ExperimentConfig)> {
    let mut out = vec![(BTreeMap::new(), base.clone())];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|(settings, cfg)| {
                (0..axis.len()).map(move |i| {
                    let mut cfg = cfg.clone();
                    let mut settings = settings.clone();
                    let value = axis.apply(i, &mut cfg);
                    settings.insert(axis.name().to_string(), value);
                    (settings, cfg)
                })
            })
            .collect();
    }
    out
}

fn sweep_point(cfg: &ExperimentConfig, check_equivalence: bool) -> Result<SweepPoint> {
    let trace = generate(cfg)?;
    let suite = cost_suite(cfg, &trace)?;
    let label = "trace";
    let speedups = speedup_report(suite.iter().map(|(_, r)| (label, r)))?;
    let mut point = SweepPoint {
        settings: BTreeMap::new(),
        config_digest: cfg.digest(),
        error: None,
        total_seconds: BTreeMap::new(),
        speedup: BTreeMap::new(),
        static_hit_rate: None,
        equivalent: None,
    };
    for (run, report) in &suite {
        point
            .total_seconds
            .insert(run.mode.to_string(), report.total_seconds);
        if let Some(s) = speedups.get(label, run.mode) {
            point.speedup.insert(run.mode.to_string(), s);
        }
        if run.mode == Mode::Static {
            point.static_hit_rate = Some(run.hit_rate());
        }
    }
    if check_equivalence {
        point.equivalent = Some(verify(cfg, &trace, None)?.passed);
    }
    Ok(point)
}

/// Runs every combination; a failing point is recorded and the sweep
/// continues.
pub fn sweep(base: &ExperimentConfig, axes: &[SweepAxis], check_equivalence: bool) -> SweepReport {
    let points = sweep_configs(base, axes)
        .into_iter()
        .map(|(settings, cfg)| {
            let mut point = sweep_point(&cfg, check_equivalence).unwrap_or_else(|e| SweepPoint {
                settings: BTreeMap::new(),
                config_digest: cfg.digest(),
                error: Some(e.to_string()),
                total_seconds: BTreeMap::new(),
                speedup: BTreeMap::new(),
                static_hit_rate: None,
                equivalent: None,
            });
            point.settings = settings;
            point
        })
        .collect();
    SweepReport {
        base_digest: base.digest(),
        points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::crafted_trace;

    fn desk() -> ExperimentConfig {
        ExperimentConfig {
            num_batches: 60,
            capacity_fraction: Some(0.1),
            model: ModelConfig {
                num_tables: 2,
                rows_per_table: 2000,
                embedding_dim: 4,
                lookups_per_table: 2,
                batch_size: 8,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn verify_passes_and_catches_broken_window() {
        let cfg = desk();
        let trace = generate(&cfg).unwrap();
        let report = verify(&cfg, &trace, None).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.modes.len(), 3);

        let crafted = crafted_trace(cfg.model, 30, 2);
        let report = verify(&cfg, &crafted, Some(WindowShape { past: 1, future: 0 })).unwrap();
        let neg = report.negative.as_ref().unwrap();
        assert!(neg.detected && report.passed, "{report:?}");
    }

    #[test]
    fn empty_trace_verifies_vacuously() {
        let cfg = ExperimentConfig {
            num_batches: 0,
            ..desk()
        };
        let trace = generate(&cfg).unwrap();
        assert!(verify(&cfg, &trace, None).unwrap().passed);
    }

    #[test]
    fn oversized_functional_run_is_refused() {
        let cfg = ExperimentConfig {
            num_batches: 1,
            ..ExperimentConfig::default()
        };
        let trace = crafted_trace(cfg.model, 1, 1);
        assert!(matches!(
            run_mode(&cfg, &trace, Mode::Nocache, true),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(
            "dim=64,128,256".parse::<SweepAxis>().unwrap(),
            SweepAxis::Dim(vec![64, 128, 256])
        );
        match "fraction=0.02..0.10".parse::<SweepAxis>().unwrap() {
            SweepAxis::Fraction(v) => {
                assert_eq!(v.len(), 5);
                assert!((v[4] - 0.10).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            "policy=lru,lfu,random".parse::<SweepAxis>().unwrap(),
            SweepAxis::Policy(ReplacementPolicy::ALL.to_vec())
        );
        assert!("speed=1".parse::<SweepAxis>().is_err());
        assert!("dim=a".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn sweep_is_cartesian_and_survives_failures() {
        let cfg = desk();
        let axes = vec![
            "policy=lru,lfu".parse().unwrap(),
            "fraction=0.0001,0.2".parse().unwrap(),
        ];
        let report = sweep(&cfg, &axes, true);
        assert_eq!(report.points.len(), 4);
        let failed: Vec<_> = report.points.iter().filter(|p| p.error.is_some()).collect();
        assert_eq!(failed.len(), 2, "the tiny cache cannot hold the window");
        for p in report.points.iter().filter(|p| p.error.is_none()) {
            assert_eq!(p.equivalent, Some(true));
            assert_eq!(p.speedup["static"], 1.0);
        }
    }
}
