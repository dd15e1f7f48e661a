//! CSV tables, written atomically behind a config-hash comment line.

use std::io::Write;
use std::path::Path;

use crate::AppError;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self, config_hash: &str) -> Result<Vec<u8>, AppError> {
        let mut buf = format!("# config_sha256={config_hash}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.header).map_err(io)?;
            for r in &self.rows {
                w.write_record(r).map_err(io)?;
            }
            w.flush().map_err(|e| AppError::Io(e.to_string()))?;
        }
        Ok(buf)
    }

    /// Writes to a temporary file next to `path`, then renames it over
    /// `path`, so readers never see a partial table.
    pub fn write_atomic(&self, path: &Path, config_hash: &str) -> Result<(), AppError> {
        let bytes = self.to_bytes(config_hash)?;
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| AppError::Io(format!("{}: {e}", dir.display())))?;
        tmp.write_all(&bytes).map_err(|e| AppError::Io(e.to_string()))?;
        tmp.as_file().sync_all().map_err(|e| AppError::Io(e.to_string()))?;
        tmp.persist(path)
            .map_err(|e| AppError::Io(format!("{}: {}", path.display(), e.error)))?;
        Ok(())
    }
}

fn io(e: csv::Error) -> AppError {
    AppError::Io(e.to_string())
}

/// Shortest round-trip decimal; non-finite values become empty cells.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
