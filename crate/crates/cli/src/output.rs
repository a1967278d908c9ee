use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CSV_HEADER: &str = "# wsdc-csv v1";

/// Shortest round-trip decimal (exponent form outside `[1e-4, 1e16)`), with
/// `inf`/`-inf`/`nan` spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v != 0.0 && !(1e-4..1e16).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// CSV writer that emits the schema comment line before the column header.
pub struct CsvOut {
    w: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::Artifact(format!("cannot create {}: {e}", path.display())))?;
        let mut buf = BufWriter::new(file);
        writeln!(buf, "{CSV_HEADER}")?;
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(columns)?;
        Ok(Self { w })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.w.write_record(fields)?;
        self.w.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.w.flush()?;
        Ok(())
    }
}

/// Git blob-style SHA-256: `sha256("blob <len>\0" || bytes)`, lowercase hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

pub fn hash_inputs(named: Vec<(PathBuf, Vec<u8>)>, files: &[PathBuf]) -> Result<Vec<InputRecord>, CliError> {
    let mut out: Vec<InputRecord> = named
        .into_iter()
        .map(|(p, bytes)| InputRecord { path: p.display().to_string(), sha256: content_hash(&bytes) })
        .collect();
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| CliError::Artifact(format!("cannot read {}: {e}", f.display())))?;
        out.push(InputRecord { path: f.display().to_string(), sha256: content_hash(&bytes) });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: C,
    pub inputs: Vec<InputRecord>,
    /// Hash over the per-input hashes, in order.
    pub input_hash: String,
    pub outputs: Vec<String>,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &'static str, seed: u64, config: C, inputs: Vec<InputRecord>, outputs: Vec<String>) -> Self {
        let joined: String = inputs.iter().map(|i| format!("{} {}\n", i.sha256, i.path)).collect();
        Self {
            tool: "wsdc",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config,
            input_hash: content_hash(joined.as_bytes()),
            inputs,
            outputs,
        }
    }

    /// Writes `manifest.<command>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(dir.join(format!("manifest.{}.json", self.command)), text + "\n")?;
        Ok(())
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Artifact(format!("cannot create output directory {}: {e}", dir.display())))
}
