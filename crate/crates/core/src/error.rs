use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("trace format error: {0}")]
    Format(String),

    #[error("truncated trace: expected {expected} batches, payload holds {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("sparse id {id} out of range for table {table} with {rows} rows")]
    IndexOutOfRange { table: usize, id: u64, rows: u64 },

    #[error("cannot allocate {bytes} bytes for embedding storage")]
    Capacity { bytes: u64 },

    #[error(
        "no evictable slot in table {table} at batch {batch}: all {slots} slots are held by the sliding window"
    )]
    NoEvictableSlot { table: usize, batch: u64, slots: u32 },
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NoEvictableSlot { .. } | Error::Capacity { .. } => 2,
            _ => 3,
        }
    }
}
