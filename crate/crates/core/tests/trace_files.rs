use std::fs;

use embpipe::config::ExperimentConfig;
use embpipe::experiment::generate;
use embpipe::workload::{read_trace, write_trace, ModelConfig};
use embpipe::Error;

fn small(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        num_batches: 25,
        seed,
        model: ModelConfig {
            num_tables: 3,
            rows_per_table: 5000,
            embedding_dim: 8,
            lookups_per_table: 3,
            batch_size: 16,
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn round_trip_and_byte_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.trc");
    let b = dir.path().join("b.trc");
    let c = dir.path().join("c.trc");
    let trace = generate(&small(7)).unwrap();
    write_trace(&trace, &a).unwrap();
    write_trace(&generate(&small(7)).unwrap(), &b).unwrap();
    write_trace(&generate(&small(8)).unwrap(), &c).unwrap();

    assert_eq!(read_trace(&a).unwrap(), trace);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.trc");
    write_trace(&generate(&small(1)).unwrap(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(read_trace(&path), Err(Error::Truncated { .. })));

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    fs::write(&path, &bad).unwrap();
    assert!(matches!(read_trace(&path), Err(Error::Format(_))));
    assert_eq!(Error::Format(String::new()).exit_code(), 3);
}
