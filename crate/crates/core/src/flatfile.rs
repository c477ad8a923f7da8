//! Versioned flat-file container for fitted models and Q-tables.
//!
//! ```text
//! fabricnet-model 1
//! kind knn
//! scalar k 12
//! array labels 3 10 20 30
//! text note free text
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a save/load cycle is
//! lossless.

use crate::error::{Error, Result};

pub const MAGIC: &str = "fabricnet-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Scalar(f64),
    Array(Vec<f64>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatFile {
    pub kind: String,
    records: Vec<(String, Record)>,
}

impl FlatFile {
    pub fn new(kind: &str) -> Self {
        FlatFile {
            kind: kind.to_string(),
            records: Vec::new(),
        }
    }

    pub fn scalar(&mut self, name: &str, v: f64) -> &mut Self {
        self.records.push((name.to_string(), Record::Scalar(v)));
        self
    }

    pub fn array(&mut self, name: &str, v: Vec<f64>) -> &mut Self {
        self.records.push((name.to_string(), Record::Array(v)));
        self
    }

    pub fn text(&mut self, name: &str, v: &str) -> &mut Self {
        self.records.push((name.to_string(), Record::Text(v.replace('\n', " "))));
        self
    }

    fn find(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| Error::ModelFormat(format!("missing record `{name}`")))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        match self.find(name)? {
            Record::Scalar(v) => Ok(*v),
            _ => Err(Error::ModelFormat(format!("`{name}` is not a scalar"))),
        }
    }

    pub fn get_array(&self, name: &str) -> Result<&[f64]> {
        match self.find(name)? {
            Record::Array(v) => Ok(v),
            _ => Err(Error::ModelFormat(format!("`{name}` is not an array"))),
        }
    }

    pub fn get_text(&self, name: &str) -> Result<&str> {
        match self.find(name)? {
            Record::Text(v) => Ok(v),
            _ => Err(Error::ModelFormat(format!("`{name}` is not text"))),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::ModelFormat(format!(
                "expected a `{kind}` model, found `{}`",
                self.kind
            )))
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\nkind {}\n", self.kind);
        for (name, rec) in &self.records {
            match rec {
                Record::Scalar(v) => out.push_str(&format!("scalar {name} {v}\n")),
                Record::Array(vs) => {
                    out.push_str(&format!("array {name} {}", vs.len()));
                    for v in vs {
                        out.push_str(&format!(" {v}"));
                    }
                    out.push('\n');
                }
                Record::Text(t) => out.push_str(&format!("text {name} {t}\n")),
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::ModelFormat(format!("line {line}: {m}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, head) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        let mut head_parts = head.split_whitespace();
        if head_parts.next() != Some(MAGIC) {
            return Err(bad(1, "not a model file"));
        }
        let version: u32 = head_parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(1, "missing version"))?;
        if version != VERSION {
            return Err(bad(1, &format!("unsupported version {version}")));
        }
        let (ln, kind_line) = lines.next().ok_or_else(|| bad(2, "missing kind"))?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| bad(ln, "expected `kind <name>`"))?
            .trim()
            .to_string();
        let mut file = FlatFile::new(&kind);
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            let tag = parts.next().unwrap_or_default();
            let name = parts.next().ok_or_else(|| bad(ln, "missing name"))?;
            let rest = parts.next().unwrap_or_default();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(ln, &format!("bad number `{s}`")));
            let rec = match tag {
                "scalar" => Record::Scalar(num(rest.trim())?),
                "array" => {
                    let mut it = rest.split_whitespace();
                    let n: usize = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(ln, "missing array length"))?;
                    let vs = it.map(num).collect::<Result<Vec<_>>>()?;
                    if vs.len() != n {
                        return Err(bad(ln, &format!("array declares {n} values, has {}", vs.len())));
                    }
                    Record::Array(vs)
                }
                "text" => Record::Text(rest.to_string()),
                other => return Err(bad(ln, &format!("unknown record type `{other}`"))),
            };
            file.records.push((name.to_string(), rec));
        }
        Ok(file)
    }
}
