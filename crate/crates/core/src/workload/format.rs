//! Binary trace files.
//!
//! Little-endian, no padding:
//!
//! ```text
//! magic "EMBTRC01" | u32 T | u64 R | u32 D | u32 L | u32 N | u64 num_batches
//! | u64 seed | u8 profile kind | f64 zipf exponent
//! then num_batches x (T x N x L u64 ids)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LocalityKind, MiniBatch, ModelConfig, Trace};
use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 8] = b"EMBTRC01";

pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_to(trace: &Trace, w: &mut impl Write) -> io::Result<()> {
    let c = &trace.config;
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&c.num_tables.to_le_bytes())?;
    w.write_all(&c.rows_per_table.to_le_bytes())?;
    w.write_all(&c.embedding_dim.to_le_bytes())?;
    w.write_all(&c.lookups_per_table.to_le_bytes())?;
    w.write_all(&c.batch_size.to_le_bytes())?;
    w.write_all(&trace.num_batches().to_le_bytes())?;
    w.write_all(&trace.seed.to_le_bytes())?;
    w.write_all(&[trace.kind.code()])?;
    w.write_all(&trace.zipf_exponent.to_le_bytes())?;
    let mut buf = Vec::with_capacity(c.ids_per_batch() * 8);
    for batch in &trace.batches {
        buf.clear();
        for id in batch.as_slice() {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format(format!("file ends inside the {what}")),
        _ => Error::Io(e),
    })
}

fn read_from(r: &mut impl Read) -> Result<Trace> {
    let mut magic = [0u8; 8];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != TRACE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(TRACE_MAGIC)
        )));
    }
    let mut header = [0u8; 4 + 8 + 4 + 4 + 4 + 8 + 8 + 1 + 8];
    read_exact_or(r, &mut header, "header")?;
    let mut at = 0;
    let mut take = |n: usize| {
        let s = &header[at..at + n];
        at += n;
        s.to_vec()
    };
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap());
    let u64_of = |b: Vec<u8>| u64::from_le_bytes(b.try_into().unwrap());
    let config = ModelConfig {
        num_tables: u32_of(take(4)),
        rows_per_table: u64_of(take(8)),
        embedding_dim: u32_of(take(4)),
        lookups_per_table: u32_of(take(4)),
        batch_size: u32_of(take(4)),
    };
    let num_batches = u64_of(take(8));
    let seed = u64_of(take(8));
    let kind_code = take(1)[0];
    let zipf_exponent = f64::from_le_bytes(take(8).try_into().unwrap());
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    let kind = LocalityKind::from_code(kind_code)
        .ok_or_else(|| Error::Format(format!("unknown profile kind {kind_code}")))?;

    let ids_per_batch = config.ids_per_batch();
    let mut buf = vec![0u8; ids_per_batch * 8];
    let mut batches = Vec::new();
    for b in 0..num_batches {
        if let Err(e) = r.read_exact(&mut buf) {
            return Err(match e.kind() {
                io::ErrorKind::UnexpectedEof => Error::Truncated {
                    expected: num_batches,
                    found: b,
                },
                _ => Error::Io(e),
            });
        }
        let ids: Vec<u64> = buf
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        batches.push(MiniBatch::new(&config, ids)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format(
            "trailing bytes after the declared batches".into(),
        ));
    }
    let trace = Trace {
        config,
        seed,
        kind,
        zipf_exponent,
        batches,
    };
    trace.validate().map_err(|e| match e {
        Error::IndexOutOfRange { .. } => Error::Format(e.to_string()),
        other => other,
    })?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{build_pdf, generate_trace, LocalityProfile};

    fn sample() -> Trace {
        let config = ModelConfig {
            num_tables: 2,
            rows_per_table: 1000,
            embedding_dim: 4,
            lookups_per_table: 2,
            batch_size: 3,
        };
        let pdf = build_pdf(&LocalityProfile::medium(), 1000).unwrap();
        generate_trace(config, &pdf, 5, 42)
    }

    fn bytes_of(trace: &Trace) -> Vec<u8> {
        let mut v = Vec::new();
        write_to(trace, &mut v).unwrap();
        v
    }

    #[test]
    fn header_layout_is_fixed() {
        let trace = sample();
        let bytes = bytes_of(&trace);
        assert_eq!(&bytes[..8], b"EMBTRC01");
        assert_eq!(bytes.len(), 8 + 49 + 5 * 2 * 6 * 8);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1000);
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 5);
        assert_eq!(u64::from_le_bytes(bytes[40..48].try_into().unwrap()), 42);
        assert_eq!(bytes[48], LocalityKind::Medium.code());
        let first_id = u64::from_le_bytes(bytes[57..65].try_into().unwrap());
        assert_eq!(first_id, trace.batches[0].as_slice()[0]);
    }

    #[test]
    fn round_trip() {
        let trace = sample();
        let bytes = bytes_of(&trace);
        let back = read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.zipf_exponent.to_bits(), trace.zipf_exponent.to_bits());
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = bytes_of(&sample());
        bytes[0] = b'X';
        assert!(matches!(
            read_from(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn header_claims_more_batches_than_payload() {
        let mut bytes = bytes_of(&sample());
        bytes[32..40].copy_from_slice(&9u64.to_le_bytes());
        match read_from(&mut bytes.as_slice()) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!((expected, found), (9, 5));
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_id_rejected() {
        let mut bytes = bytes_of(&sample());
        bytes[57..65].copy_from_slice(&5000u64.to_le_bytes());
        assert!(matches!(
            read_from(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
