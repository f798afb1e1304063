//! Minimal CSV writing plus a strict parser.
//!
//! Every CSV the tool emits must round-trip through [`parse_strict`]; the
//! format is deliberately narrow: comma-separated, no quoting, one header
//! line, rectangular.

use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column(name).ok_or_else(|| Error::Csv {
            line: 1,
            reason: format!("missing column `{name}`"),
        })?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row[idx].parse::<f64>().map_err(|_| Error::Csv {
                    line: i + 2,
                    reason: format!("`{}` is not a number", row[idx]),
                })
            })
            .collect()
    }
}

pub fn format_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Csv {
                line: i + 2,
                reason: format!("row has {} fields, header has {}", row.len(), header.len()),
            });
        }
        if row.iter().any(|f| f.contains(',') || f.contains('\n')) {
            return Err(Error::Csv {
                line: i + 2,
                reason: "field contains a separator".to_string(),
            });
        }
    }
    std::fs::write(path, format_csv(header, rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_strict(text: &str) -> Result<CsvTable> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(Error::Csv {
        line: 1,
        reason: "empty file".to_string(),
    })?;
    let header: Vec<String> = header_line.split(',').map(|s| s.to_string()).collect();
    if header.iter().any(|h| h.is_empty()) {
        return Err(Error::Csv {
            line: 1,
            reason: "empty header field".to_string(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if row.len() != header.len() {
            return Err(Error::Csv {
                line: i + 1,
                reason: format!("expected {} fields, got {}", header.len(), row.len()),
            });
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_strict(&text)
}
