//! Run directories and the files written into them.
//!
//! CSV files start with a `# transit-reid <kind> v<N>` comment line so the
//! column layout can evolve without breaking readers.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use transit_reid_core::hsdm::LedgerRow;
use transit_reid_core::vindex::FlatIndex;

use crate::error::{AppError, Result};

pub const METRICS_CSV_VERSION: u32 = 1;
pub const SWEEP_TABLE_CSV_VERSION: u32 = 1;
pub const TIMING_CSV_VERSION: u32 = 1;
pub const CHANNELS_CSV_VERSION: u32 = 1;

/// Creates `<root>/<label>-<UTC timestamp>`, adding a numeric suffix if
/// that name is taken. Seeded runs use `seed<N>` as the label.
pub fn create_run_dir(root: &Path, label: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| AppError::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{label}-{stamp}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(AppError::io(dir, e)),
        }
    }
    unreachable!()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| AppError::io(path, e))
}

/// Writes `rows` as CSV under a versioned comment header.
pub fn write_csv<T: Serialize>(path: &Path, kind: &str, version: u32, rows: &[T]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "# transit-reid {kind} v{version}").map_err(|e| AppError::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| AppError::format(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| AppError::format(path, e))?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| AppError::io(path, e))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| AppError::format(path, e))?;
        writeln!(out).map_err(|e| AppError::io(path, e))?;
    }
    out.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_ledger(path: &Path, rows: &[LedgerRow]) -> Result<()> {
    write_jsonl(path, rows)
}

pub fn save_index(path: &Path, index: &FlatIndex) -> Result<()> {
    fs::write(path, index.to_bytes()).map_err(|e| AppError::io(path, e))
}

pub fn load_index(path: &Path) -> Result<FlatIndex> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    FlatIndex::from_bytes(&bytes).map_err(|e| AppError::format(path, e))
}
