//! Plain-text table format shared by every CSV artifact.
//!
//! ```text
//! # kind: trajectory
//! # config-hash: 3f2a...
//! # m: 8
//! x1,x2,...
//! 1.2345678901234567e0,...
//! ```
//!
//! Metadata lines start with `# key: value`; the first non-comment line is
//! the column header. Floats are written with 17 significant digits so that
//! a write/read cycle is exact.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const CONFIG_HASH_KEY: &str = "config-hash";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new(kind: &str) -> Self {
        let mut h = Self::default();
        h.set("kind", kind);
        h
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format("table header", format!("missing `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.trim()
            .parse()
            .map_err(|_| Error::format("table header", format!("bad value for `{key}`: {raw}")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Table {
    pub header: Header,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn write_table<W: Write>(
    mut w: W,
    header: &Header,
    columns: &[String],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<()> {
    for (k, v) in header.entries() {
        writeln!(w, "# {k}: {v}")?;
    }
    writeln!(w, "{}", columns.join(","))?;
    let mut line = String::new();
    for row in rows {
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&fmt_f64(*v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<R: BufRead>(r: R) -> Result<Table> {
    let mut header = Header::default();
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once(':') {
                header.set(k.trim(), v.trim());
            }
            continue;
        }
        match &columns {
            None => columns = Some(line.split(',').map(|s| s.trim().to_string()).collect()),
            Some(cols) => {
                let row = line
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::format("table", format!("line {}: {e}", lineno + 1)))?;
                if row.len() != cols.len() {
                    return Err(Error::format(
                        "table",
                        format!(
                            "line {}: {} fields, expected {}",
                            lineno + 1,
                            row.len(),
                            cols.len()
                        ),
                    ));
                }
                rows.push(row);
            }
        }
    }
    let columns = columns.ok_or_else(|| Error::format("table", "no column header"))?;
    Ok(Table {
        header,
        columns,
        rows,
    })
}

pub fn expect_kind(header: &Header, kind: &str) -> Result<()> {
    match header.get("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::format(
            "table header",
            format!("expected kind `{kind}`, found {other:?}"),
        )),
    }
}
