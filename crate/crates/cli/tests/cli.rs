use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const DESK: &[&str] = &[
    "--tables", "2", "--rows", "4000", "--dim", "4", "--lookups", "2", "--batch-size", "16",
];

fn embpipe(args: &[&str], extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embpipe"))
        .args(args)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_trace_is_reproducible_and_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for name in ["a", "b"] {
        let out = format!("{d}/{name}.trc");
        let o = embpipe(&["gen-trace", "--out", &out, "--batches", "50"], DESK);
        assert!(o.status.success(), "{o:?}");
    }
    assert_eq!(fs::read(format!("{d}/a.trc")).unwrap(), fs::read(format!("{d}/b.trc")).unwrap());
    let side = json(&dir.path().join("a.stats.json"));
    assert_eq!(side["locality"], "high");
    assert_eq!(side["config_digest"].as_str().unwrap().len(), 16);
    let share = side["hot_set_share_top2pct"].as_f64().unwrap();
    assert!((share - 0.80).abs() < 0.05, "{share}");
}

#[test]
fn simulate_modes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let trace = format!("{d}/t.trc");
    assert!(embpipe(&["gen-trace", "--out", &trace, "--batches", "80"], DESK).status.success());

    let o = embpipe(&["simulate", "--trace", &trace, "--mode", "scratchpipe", "--out-dir", d], DESK);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("train-stage misses: 0"));
    let run = json(&dir.path().join("run.json"));
    assert_eq!(run["run"]["train_misses"], 0);
    assert_eq!(run["run"]["hazards"].as_array().unwrap().len(), 0);
    let cycles = fs::read_to_string(dir.path().join("cycles.csv")).unwrap();
    assert_eq!(cycles.lines().count(), 1 + 80 + 4);
    let breakdown = fs::read_to_string(dir.path().join("breakdown.csv")).unwrap();
    assert!(breakdown.starts_with("mode,trace,stage,seconds,bytes"));

    let o = embpipe(
        &["simulate", "--trace", &trace, "--mode", "static", "--capacity", "1.0", "--out-dir", d],
        DESK,
    );
    assert!(o.status.success());
    assert_eq!(json(&dir.path().join("run.json"))["hit_rate"], 1.0);

    let o = embpipe(&["simulate", "--trace", &trace, "--mode", "nocache", "--out-dir", d], DESK);
    assert!(o.status.success());
    let run = json(&dir.path().join("run.json"));
    assert_eq!(run["hit_rate"], 0.0);
    assert_eq!(run["run"]["totals"]["unique_misses"], run["run"]["totals"]["unique"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let trace = format!("{d}/t.trc");
    assert!(embpipe(&["gen-trace", "--out", &trace, "--batches", "20"], DESK).status.success());

    let o = embpipe(&["simulate", "--trace", &trace, "--capacity", "0.0005", "--out-dir", d], DESK);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("T*L*N*D*4*6 = 2*2*16*4*4*6 = 6144 bytes"), "{err}");

    fs::write(&trace, b"garbage").unwrap();
    let o = embpipe(&["simulate", "--trace", &trace, "--out-dir", d], DESK);
    assert_eq!(o.status.code(), Some(3));

    let bad = format!("{d}/bad.toml");
    fs::write(&bad, "nonsense = true").unwrap();
    assert_eq!(embpipe(&["verify", "--config", &bad], &[]).status.code(), Some(3));
}

#[test]
fn verify_from_config_file_and_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = format!("{d}/exp.toml");
    fs::write(
        &cfg,
        format!(
            "num_batches = 120\ncapacity_fraction = 0.1\npolicy = \"random\"\noutput_dir = \"{d}\"\n\
             [model]\nnum_tables = 2\nrows_per_table = 3000\nembedding_dim = 4\nlookups_per_table = 2\nbatch_size = 8\n\
             [locality]\nkind = \"medium\"\n"
        ),
    )
    .unwrap();
    let o = embpipe(&["verify", "--config", &cfg], &[]);
    assert!(o.status.success(), "{}", stdout(&o));
    let report = json(&dir.path().join("verify.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["modes"].as_array().unwrap().len(), 3);

    let o = embpipe(&["verify", "--config", &cfg, "--batches", "0"], &[]);
    assert!(o.status.success());
    assert!(stdout(&o).trim_end().ends_with("PASS"));
}

#[test]
fn sweep_records_failures_and_checks_policies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = embpipe(
        &[
            "sweep", "--batches", "60", "--capacity", "0.1", "--out-dir", d,
            "--vary", "policy=lru,lfu,random", "--vary", "dim=4,8", "--check-equivalence",
        ],
        DESK,
    );
    assert!(o.status.success(), "{}", stdout(&o));
    let report = json(&dir.path().join("sweep.json"));
    let points = report["points"].as_array().unwrap();
    assert_eq!(points.len(), 6);
    assert!(points.iter().all(|p| p["equivalent"] == true));

    let o = embpipe(
        &["sweep", "--batches", "20", "--out-dir", d, "--vary", "fraction=0.0001,0.1"],
        DESK,
    );
    assert!(o.status.success());
    let report = json(&dir.path().join("sweep.json"));
    let errors = report["points"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| !p["error"].is_null())
        .count();
    assert_eq!(errors, 1);
}

#[test]
fn stats_and_hit_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let trace = format!("{d}/t.trc");
    assert!(embpipe(&["gen-trace", "--out", &trace, "--batches", "30", "--locality", "low"], DESK)
        .status
        .success());
    let curve = format!("{d}/curve.csv");
    let o = embpipe(&["stats", "--trace", &trace, "--hit-curve", &curve], &[]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["locality"], "low");
    let rows = fs::read_to_string(&curve).unwrap();
    assert_eq!(rows.lines().count(), 1 + 100 * 3);
}
