use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use embpipe::baselines::{hit_rate_curve, rankings, write_hit_rate_curve, HotSetSource};
use embpipe::config::ExperimentConfig;
use embpipe::controller::{ReplacementPolicy, WindowShape};
use embpipe::cost::{evaluate, write_breakdown};
use embpipe::embedding::fnv1a;
use embpipe::experiment::{self, SweepAxis};
use embpipe::pipeline::slots_for_fraction;
use embpipe::run::{write_cycle_log, Mode};
use embpipe::workload::{
    crafted_trace, hot_set_share, read_trace, trace_stats, write_trace, LocalityKind, Trace,
    HOT_FRACTION,
};
use embpipe::Error;

const EXIT_VERIFY_FAIL: u8 = 1;

#[derive(Parser)]
#[command(name = "embpipe", version, about = "Pipelined embedding-cache simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus flags that override its values.
#[derive(Args, Debug, Default)]
struct Common {
    /// TOML experiment config; defaults apply when omitted
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batches: Option<u64>,
    /// Cache capacity as a fraction of each table's rows
    #[arg(long)]
    capacity: Option<f64>,
    #[arg(long)]
    policy: Option<ReplacementPolicy>,
    #[arg(long)]
    locality: Option<LocalityKind>,
    /// Top-2% access mass the Zipf exponent is calibrated to
    #[arg(long)]
    target_mass: Option<f64>,
    #[arg(long)]
    tables: Option<u32>,
    #[arg(long)]
    rows: Option<u64>,
    #[arg(long)]
    dim: Option<u32>,
    #[arg(long)]
    lookups: Option<u32>,
    #[arg(long)]
    batch_size: Option<u32>,
    /// Directory for reports
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed,
            batches => num_batches,
            policy => policy,
            locality => locality.kind,
            tables => model.num_tables,
            rows => model.rows_per_table,
            dim => model.embedding_dim,
            lookups => model.lookups_per_table,
            batch_size => model.batch_size,
            out_dir => output_dir,
        );
        if let Some(f) = self.capacity {
            cfg.capacity_fraction = Some(f);
        }
        if let Some(m) = self.target_mass {
            cfg.locality.target_top2pct_mass = Some(m);
        }
        cfg.model.validate()?;
        cfg.hardware.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a binary trace and a JSON stats sidecar
    GenTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Emit the adversarial trace where row 0 recurs every STRIDE batches
        #[arg(long)]
        crafted_stride: Option<u64>,
    },
    /// Run one execution mode and write run, per-cycle and cost reports
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trace file; generated from the config when omitted
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        /// Track directory state and volumes only, without embedding values
        #[arg(long)]
        volume_only: bool,
    },
    /// Check every mode against the sequential oracle
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also run the pipeline with this shortened window and expect a failure
        #[arg(long, value_name = "P,F")]
        break_window: Option<WindowShape>,
    },
    /// Cartesian parameter sweep with a speedup table
    Sweep {
        #[command(flatten)]
        common: Common,
        /// AXIS=VALUES, e.g. dim=64,128,256 or fraction=0.02..0.10
        #[arg(long, required = true)]
        vary: Vec<SweepAxis>,
        /// Verify oracle equivalence at every point
        #[arg(long)]
        check_equivalence: bool,
    },
    /// Access statistics of a trace file
    Stats {
        #[arg(long)]
        trace: PathBuf,
        /// Also write the static-cache hit-rate curve to this CSV
        #[arg(long)]
        hit_curve: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::GenTrace {
            common,
            out,
            crafted_stride,
        } => gen_trace(&common.load()?, &out, crafted_stride),
        Command::Simulate {
            common,
            trace,
            mode,
            volume_only,
        } => {
            let mut cfg = common.load()?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            simulate(&cfg, trace.as_deref(), volume_only)
        }
        Command::Verify {
            common,
            trace,
            break_window,
        } => verify(&common.load()?, trace.as_deref(), break_window),
        Command::Sweep {
            common,
            vary,
            check_equivalence,
        } => sweep(&common.load()?, &vary, check_equivalence),
        Command::Stats { trace, hit_curve } => stats(&trace, hit_curve.as_deref()),
    }
}

fn load_trace(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Trace, Error> {
    let trace = match path {
        Some(p) => read_trace(p)?,
        None => experiment::generate(cfg)?,
    };
    trace.validate()?;
    Ok(trace)
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    serde_json::to_writer_pretty(create(path)?, value).map_err(|e| Error::Io(e.into()))
}

fn gen_trace(cfg: &ExperimentConfig, out: &Path, crafted_stride: Option<u64>) -> Result<u8, Error> {
    let trace = match crafted_stride {
        Some(stride) => crafted_trace(cfg.model, cfg.num_batches, stride),
        None => experiment::generate(cfg)?,
    };
    write_trace(&trace, out)?;
    let stats = trace_stats(&trace);
    let pdf = experiment::trace_pdf(&trace);
    let share = hot_set_share(&trace, &pdf, HOT_FRACTION);
    let sidecar = out.with_extension("stats.json");
    write_json(
        &sidecar,
        &json!({
            "config_digest": cfg.digest(),
            "file_digest": format!("{:016x}", fnv1a(&fs::read(out)?)),
            "seed": trace.seed,
            "locality": trace.kind,
            "zipf_exponent": trace.zipf_exponent,
            "batches": trace.num_batches(),
            "hot_set_share_top2pct": share,
            "top_mass": stats.top_mass,
            "tables": stats.tables,
        }),
    )?;
    println!(
        "wrote {} ({} batches, exponent {:.4}, top-2% hot-set share {:.4})",
        out.display(),
        trace.num_batches(),
        trace.zipf_exponent,
        share
    );
    println!("wrote {}", sidecar.display());
    Ok(0)
}

fn simulate(cfg: &ExperimentConfig, trace: Option<&Path>, volume_only: bool) -> Result<u8, Error> {
    cfg.validate()?;
    let trace = load_trace(cfg, trace)?;
    let functional = !volume_only && experiment::fits_functional(&trace.config);
    if !volume_only && !functional {
        eprintln!(
            "note: {} bytes of tables exceed the functional limit; running volume-only",
            experiment::table_bytes(&trace.config)
        );
    }
    let run = match experiment::run_mode(cfg, &trace, cfg.mode, functional) {
        Err(e @ Error::NoEvictableSlot { .. }) => {
            let fraction = cfg.capacity_fraction.unwrap_or(1.0);
            let slots = slots_for_fraction(trace.config.rows_per_table, fraction)? as u64;
            eprintln!("error: {e}");
            eprintln!("{}", experiment::sizing_message(&trace, slots));
            return Ok(e.exit_code() as u8);
        }
        other => other?,
    };
    let report = evaluate(&run, &trace.config, &cfg.hardware);
    let dir = &cfg.output_dir;
    write_json(
        &dir.join("run.json"),
        &json!({
            "config_digest": cfg.digest(),
            "functional": functional,
            "hit_rate": run.hit_rate(),
            "run": run,
            "cost": report,
        }),
    )?;
    write_cycle_log(&run, trace.config.row_bytes(), create(&dir.join("cycles.csv"))?)?;
    write_breakdown([("trace", &report)], create(&dir.join("breakdown.csv"))?)?;

    println!("mode: {}", run.mode);
    match run.checksum {
        Some(c) => println!("checksum: {c:016x}"),
        None => println!("checksum: n/a (volume-only)"),
    }
    println!("batches: {}", run.batches_completed);
    println!("cycles: {}", run.total_cycles);
    println!("hit rate: {:.4}", run.hit_rate());
    println!("cpu-side row fetches: {}", run.collect_misses);
    println!("train-stage misses: {}", run.train_misses);
    println!("hazards: {}", run.hazards.len());
    println!("modeled seconds: {:.6}", report.total_seconds);
    println!("reports in {}", dir.display());
    Ok(0)
}

fn verify(
    cfg: &ExperimentConfig,
    trace: Option<&Path>,
    break_window: Option<WindowShape>,
) -> Result<u8, Error> {
    cfg.capacity_fraction_for(Mode::Scratchpipe)?;
    let trace = load_trace(cfg, trace)?;
    let report = experiment::verify(cfg, &trace, break_window)?;
    write_json(&cfg.output_dir.join("verify.json"), &json!(report))?;

    println!("config digest: {}", report.config_digest);
    println!("reference checksum: {:016x}", report.reference_checksum);
    for m in &report.modes {
        let ok = m.matches && m.train_misses == 0 && m.hazards == 0;
        println!(
            "{} {:<12} checksum {:016x} train-misses {} hazards {}",
            if ok { "PASS" } else { "FAIL" },
            m.mode,
            m.checksum,
            m.train_misses,
            m.hazards
        );
        if let Some(d) = m.divergence {
            println!(
                "     first divergence: table {} row {} element {}",
                d.table, d.row, d.element
            );
        }
    }
    if let Some(n) = &report.negative {
        println!(
            "{} broken window {},{} on {} slots: checksum {:016x} ({}), {} hazards [{}]",
            if n.detected { "PASS" } else { "FAIL" },
            n.window.past,
            n.window.future,
            n.slots_per_table,
            n.checksum,
            if n.mismatch { "mismatch" } else { "match" },
            n.hazards,
            n.hazard_kinds.join(", ")
        );
    }
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(if report.passed { 0 } else { EXIT_VERIFY_FAIL })
}

fn sweep(cfg: &ExperimentConfig, axes: &[SweepAxis], check_equivalence: bool) -> Result<u8, Error> {
    let report = experiment::sweep(cfg, axes, check_equivalence);
    let dir = &cfg.output_dir;
    write_json(&dir.join("sweep.json"), &json!(report))?;

    let mut w = csv::Writer::from_writer(create(&dir.join("sweep.csv"))?);
    let mut failed_equivalence = false;
    for p in &report.points {
        let settings = p
            .settings
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        if let Some(e) = &p.error {
            println!("{settings}: error: {e}");
            continue;
        }
        failed_equivalence |= p.equivalent == Some(false);
        let line = p
            .speedup
            .iter()
            .map(|(m, s)| format!("{m} {s:.3}x"))
            .collect::<Vec<_>>()
            .join("  ");
        println!("{settings}: {line}");
        for (mode, s) in &p.speedup {
            w.write_record([
                settings.as_str(),
                mode,
                &p.total_seconds[mode].to_string(),
                &s.to_string(),
            ])
            .map_err(|e| Error::Io(e.into()))?;
        }
    }
    w.flush()?;
    println!("reports in {}", dir.display());
    Ok(if failed_equivalence { EXIT_VERIFY_FAIL } else { 0 })
}

fn stats(path: &Path, hit_curve: Option<&Path>) -> Result<u8, Error> {
    let trace = read_trace(path)?;
    trace.validate()?;
    let stats = trace_stats(&trace);
    let pdf = experiment::trace_pdf(&trace);
    let share = hot_set_share(&trace, &pdf, HOT_FRACTION);
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "locality": trace.kind,
            "zipf_exponent": trace.zipf_exponent,
            "batches": trace.num_batches(),
            "hot_set_share_top2pct": share,
            "top_mass": stats.top_mass,
            "tables": stats.tables,
        }))
        .expect("json")
    );
    if let Some(out) = hit_curve {
        let r = rankings(&trace, Some(&pdf), HotSetSource::FromPdf)?;
        let fractions: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        write_hit_rate_curve(&hit_rate_curve(&trace, &r, &fractions), create(out)?)?;
    }
    Ok(0)
}
