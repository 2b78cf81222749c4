//! On-disk formats.
//!
//! Window files are line-delimited JSON: the first line is a
//! [`WindowFileHeader`], every following line one [`WindowExample`].
//! Fine-series CSV files are wide (one column per channel) and start with a
//! `#granularity_ms=<g>` comment line; coarse CSV files have one row per
//! (window, interval) and one column per channel/operator entry.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{CsvSchema, Dataset};
use crate::series::{FineSeries, ValueDomain, WindowExample};
use crate::{Error, Result};

pub const WINDOW_FORMAT: &str = "finegrain-windows";
pub const WINDOW_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFileHeader {
    pub format: String,
    pub version: u32,
    pub granularity_ms: f64,
    pub zoom: usize,
    pub context_len: usize,
    pub target: String,
    pub domain: ValueDomain,
    pub layout: Vec<String>,
}

impl WindowFileHeader {
    pub fn new(granularity_ms: f64, zoom: usize, context_len: usize, target: &str, domain: ValueDomain, layout: Vec<String>) -> Self {
        Self {
            format: WINDOW_FORMAT.into(),
            version: WINDOW_FORMAT_VERSION,
            granularity_ms,
            zoom,
            context_len,
            target: target.into(),
            domain,
            layout,
        }
    }

    pub fn for_dataset(ds: &Dataset) -> Self {
        let g = ds.train.first().or(ds.test.first()).map_or(1.0, |w| w.target.granularity_ms);
        Self::new(g, ds.zoom, ds.context_len, &ds.target, ds.domain, ds.layout.clone())
    }

    fn check(&self, path: &Path, w: &WindowExample, row: usize) -> Result<()> {
        let bad = |msg: String| Error::Data { path: path.into(), row, msg };
        w.validate().map_err(|e| bad(e.to_string()))?;
        if w.input.zoom != self.zoom || w.input.context_len != self.context_len {
            return Err(bad("window shape differs from the file header".into()));
        }
        if w.input.layout() != self.layout {
            return Err(bad(format!("window layout {:?} differs from header {:?}", w.input.layout(), self.layout)));
        }
        if w.target.channel != self.target {
            return Err(bad(format!("target channel `{}` differs from header `{}`", w.target.channel, self.target)));
        }
        Ok(())
    }
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn windows_to_string(header: &WindowFileHeader, windows: &[WindowExample]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for w in windows {
        out.push_str(&serde_json::to_string(w)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_windows(path: &Path, header: &WindowFileHeader, windows: &[WindowExample]) -> Result<()> {
    write_atomic(path, windows_to_string(header, windows)?.as_bytes())
}

/// Read a window file, checking every record against the header.
pub fn read_windows(path: &Path) -> Result<(WindowFileHeader, Vec<WindowExample>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let data_err = |row: usize, msg: String| Error::Data { path: path.into(), row, msg };
    let first = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(data_err(1, "empty file: expected a header record".into())),
    };
    let header: WindowFileHeader =
        serde_json::from_str(&first).map_err(|e| data_err(1, format!("bad header record: {e}")))?;
    if header.format != WINDOW_FORMAT || header.version != WINDOW_FORMAT_VERSION {
        return Err(data_err(
            1,
            format!("unsupported format {} v{} (expected {WINDOW_FORMAT} v{WINDOW_FORMAT_VERSION})", header.format, header.version),
        ));
    }
    let mut windows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let w: WindowExample = serde_json::from_str(&line).map_err(|e| data_err(row, e.to_string()))?;
        header.check(path, &w, row)?;
        windows.push(w);
    }
    Ok((header, windows))
}

fn data_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::Data { path: path.into(), row, msg: msg.into() }
}

/// Parse a wide fine-grained CSV according to `schema`.
///
/// Row numbers in errors are 1-based file lines, counting the header.
pub fn read_fine_csv(path: &Path, schema: &CsvSchema) -> Result<BTreeMap<String, FineSeries>> {
    if !(schema.granularity_ms > 0.0) {
        return Err(Error::Config("schema granularity must be positive".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => data_err(path, 0, format!("{other:?}")),
        })?;
    let headers = rdr.headers()?.clone();
    let mut cols = Vec::with_capacity(schema.channels.len());
    for ch in &schema.channels {
        let idx = headers
            .iter()
            .position(|h| h.trim() == ch.column)
            .ok_or_else(|| data_err(path, 1, format!("missing column `{}` for channel `{}`", ch.column, ch.name)))?;
        cols.push(idx);
    }
    let mut values = vec![Vec::new(); schema.channels.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != headers.len() {
            return Err(data_err(path, row, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        for (k, (&idx, ch)) in cols.iter().zip(&schema.channels).enumerate() {
            let raw = rec[idx].trim();
            let v: f64 = raw
                .parse()
                .map_err(|_| data_err(path, row, format!("column `{}`: `{raw}` is not a number", ch.column)))?;
            if !v.is_finite() || v < 0.0 {
                return Err(data_err(path, row, format!("column `{}`: value {raw} must be finite and non-negative", ch.column)));
            }
            if ch.domain == ValueDomain::NonnegInt && v.fract() != 0.0 {
                return Err(data_err(path, row, format!("column `{}`: value {raw} is not an integer", ch.column)));
            }
            values[k].push(v);
        }
    }
    if values.first().is_none_or(|v| v.is_empty()) {
        return Err(data_err(path, 1, "no data rows"));
    }
    schema
        .channels
        .iter()
        .zip(values)
        .map(|(ch, v)| Ok((ch.name.clone(), FineSeries::new(&ch.name, v, schema.granularity_ms, ch.domain)?)))
        .collect()
}

/// Render aligned channels as a wide CSV, one column per channel.
pub fn fine_csv_string(channels: &BTreeMap<String, FineSeries>) -> Result<String> {
    let first = channels.values().next().ok_or_else(|| Error::Invalid("no channels to export".into()))?;
    let len = first.len();
    if channels.values().any(|s| s.len() != len) {
        return Err(Error::Shape("channels to export differ in length".into()));
    }
    let mut out = format!("#granularity_ms={}\n", first.granularity_ms);
    out.push_str(&channels.keys().cloned().collect::<Vec<_>>().join(","));
    out.push('\n');
    for t in 0..len {
        let row: Vec<String> = channels.values().map(|s| format!("{}", s.values[t])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_fine_csv(path: &Path, channels: &BTreeMap<String, FineSeries>) -> Result<()> {
    write_atomic(path, fine_csv_string(channels)?.as_bytes())
}

/// Coarse inputs as a wide CSV: `window,interval,<entry>...`.
pub fn coarse_csv_string(header: &WindowFileHeader, windows: &[WindowExample]) -> String {
    let mut out = format!("#granularity_ms={};zoom={}\n", header.granularity_ms, header.zoom);
    out.push_str("window,interval");
    for name in &header.layout {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for w in windows {
        for j in 0..w.input.context_len {
            out.push_str(&format!("{},{j}", w.id));
            for e in &w.input.entries {
                out.push_str(&format!(",{}", e.values[j]));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::CsvChannel;

    fn schema() -> CsvSchema {
        CsvSchema {
            granularity_ms: 1.0,
            channels: vec![
                CsvChannel { name: "util".into(), column: "utilization".into(), domain: ValueDomain::NonnegReal },
                CsvChannel { name: "conns".into(), column: "connections".into(), domain: ValueDomain::NonnegInt },
            ],
        }
    }

    #[test]
    fn negative_value_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "utilization,connections\n1.5,2\n-0.5,3\n").unwrap();
        match read_fine_csv(&p, &schema()) {
            Err(Error::Data { row, msg, .. }) => {
                assert_eq!(row, 3);
                assert!(msg.contains("non-negative"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "utilization\n1.5\n").unwrap();
        assert!(matches!(read_fine_csv(&p, &schema()), Err(Error::Data { row: 1, .. })));
        fs::write(&p, "utilization,connections\n1.5,2\n1.0\n").unwrap();
        assert!(matches!(read_fine_csv(&p, &schema()), Err(Error::Data { row: 3, .. })));
    }

    #[test]
    fn header_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.jsonl");
        fs::write(&p, "{\"format\":\"other\",\"version\":1,\"granularity_ms\":1,\"zoom\":2,\"context_len\":1,\"target\":\"q\",\"domain\":\"nonneg_int\",\"layout\":[]}\n").unwrap();
        assert!(matches!(read_windows(&p), Err(Error::Data { row: 1, .. })));
        fs::write(&p, "").unwrap();
        assert!(read_windows(&p).is_err());
    }
}
