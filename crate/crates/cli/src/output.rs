//! Versioned CSV files.
//!
//! Every file starts with `# aircomp-csv v1 kind=<kind>`, then a normal
//! header row. Readers reject other versions and kinds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const CSV_VERSION: u32 = 1;

pub fn csv_header(kind: &str) -> String {
    format!("# aircomp-csv v{CSV_VERSION} kind={kind}")
}

/// Writes the schema line and the serialized rows.
pub fn write_rows<W: Write, T: Serialize>(mut w: W, kind: &str, rows: &[T]) -> Result<()> {
    writeln!(w, "{}", csv_header(kind))?;
    let mut cw = csv::Writer::from_writer(w);
    for r in rows {
        cw.serialize(r)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, kind: &str, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_rows(BufWriter::new(f), kind, rows)
}

/// Parses a schema line, returning `(version, kind)`.
pub fn parse_header(line: &str) -> Result<(u32, String)> {
    let rest = line.trim_end().strip_prefix("# aircomp-csv v").context("missing aircomp-csv schema line")?;
    let (ver, kind) = rest.split_once(" kind=").context("malformed schema line")?;
    Ok((ver.parse().context("malformed schema version")?, kind.to_string()))
}

pub fn read_rows<R: BufRead, T: DeserializeOwned>(mut r: R, kind: &str) -> Result<Vec<T>> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    let (ver, found) = parse_header(&first)?;
    if ver != CSV_VERSION {
        bail!("unsupported csv schema version {ver} (expected {CSV_VERSION})");
    }
    if found != kind {
        bail!("expected csv kind {kind}, found {found}");
    }
    let mut cr = csv::Reader::from_reader(r);
    let rows = cr.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_rows(BufReader::new(f), kind)
}

/// Semicolon-joined list; `f64` display round-trips exactly.
pub(crate) fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub(crate) fn split<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|x| Ok(x.parse::<T>()?)).collect()
}
