//! CSV emission helpers shared by every exporter.
//!
//! Floats are written with 9 significant digits; every file begins with a
//! `# schema:` comment naming the column set and its version.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Formats with 9 significant digits, positional for moderate exponents and
/// scientific otherwise. Trailing zeros are trimmed.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let sign = if negative { "-" } else { "" };
    if (-5..15).contains(&exp) {
        let (int_part, frac_part) = if exp >= 0 {
            let split = (exp + 1) as usize;
            if split >= digits.len() {
                (format!("{digits}{}", "0".repeat(split - digits.len())), String::new())
            } else {
                (digits[..split].to_string(), digits[split..].to_string())
            }
        } else {
            ("0".to_string(), format!("{}{digits}", "0".repeat((-exp - 1) as usize)))
        };
        let frac = frac_part.trim_end_matches('0');
        if frac.is_empty() {
            format!("{sign}{int_part}")
        } else {
            format!("{sign}{int_part}.{frac}")
        }
    } else {
        let (lead, rest) = digits.split_at(1);
        let rest = rest.trim_end_matches('0');
        if rest.is_empty() {
            format!("{sign}{lead}e{exp}")
        } else {
            format!("{sign}{lead}.{rest}e{exp}")
        }
    }
}

/// A CSV table with a schema comment line and a column header.
#[derive(Debug, Clone)]
pub struct CsvTable {
    schema: String,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(schema: &str, columns: &[&str]) -> Self {
        CsvTable {
            schema: schema.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Appends the rows of a table with the same schema and columns.
    pub fn extend(&mut self, other: CsvTable) -> Result<()> {
        if other.schema != self.schema || other.columns != self.columns {
            return Err(Error::SchemaMismatch(format!("`{}` vs `{}`", other.schema, self.schema)));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# schema: {} ({})", self.schema, self.columns.join(","));
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.render())
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parsed CSV: schema line, header, rows. Comment lines other than the
/// first schema line are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCsv {
    pub schema: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn parse_csv(text: &str) -> Result<ParsedCsv> {
    let mut schema = None;
    let mut columns = None;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if schema.is_none() && columns.is_none() {
                schema = Some(rest.trim().trim_start_matches("schema:").trim().to_string());
            }
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        match &columns {
            None => columns = Some(fields),
            Some(cols) => {
                if fields.len() != cols.len() {
                    return Err(Error::SchemaMismatch(format!(
                        "row has {} fields, header has {}",
                        fields.len(),
                        cols.len()
                    )));
                }
                rows.push(fields)
            }
        }
    }
    Ok(ParsedCsv {
        schema,
        columns: columns.ok_or_else(|| Error::SchemaMismatch("missing header".into()))?,
        rows,
    })
}
