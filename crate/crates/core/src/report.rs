//! Bit-stable CSV and JSON emission.
//!
//! Floats are written in shortest round-trip form, so identical results give
//! identical bytes. CSV files may start with a `# config_sha256:` line.

use crate::error::Result;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// A table with a fixed column order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self, config_hash: Option<&str>) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        if let Some(h) = config_hash {
            writeln!(out, "# config_sha256: {h}")?;
        }
        {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        fs::write(path, self.to_bytes(config_hash)?)?;
        Ok(())
    }
}

pub fn to_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 6.02e23, -0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = CsvTable::new(&["a", "b"]);
        assert_eq!(t.to_bytes(Some("ab12")).unwrap(), b"# config_sha256: ab12\na,b\n");
    }
}
