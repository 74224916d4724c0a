//! On-disk artifact formats: binary scalar fields, CSV series, and
//! stable JSON summaries.
//!
//! Field files are a fixed little-endian layout (magic `AFLD`), so a
//! rerun with the same config and seed reproduces them byte for byte.
//! CSV uses `.` as the decimal mark, `,` as the separator, and a header
//! row; floats print in Rust's shortest round-trip form, which is
//! deterministic.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Axis, BoundaryKind, Field, GridChart};

const FIELD_MAGIC: &[u8; 4] = b"AFLD";
const FIELD_VERSION: u32 = 1;

/// Serialize one scalar field with its full chart description.
pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    let chart = field.chart();
    let mut buf = Vec::with_capacity(64 + field.data.len() * 8);
    buf.extend_from_slice(FIELD_MAGIC);
    buf.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    for axis in &chart.axes {
        let name = axis.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&axis.min.to_le_bytes());
        buf.extend_from_slice(&axis.max.to_le_bytes());
        buf.extend_from_slice(&(axis.count as u64).to_le_bytes());
        buf.push(match axis.boundary {
            BoundaryKind::Dirichlet => 0,
            BoundaryKind::Periodic => 1,
        });
    }
    buf.extend_from_slice(&(field.data.len() as u64).to_le_bytes());
    for v in &field.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!(
                "field file {} truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read a field written by [`write_field`], rebuilding its chart.
pub fn read_field(path: &Path) -> Result<Field> {
    let data = fs::read(path)?;
    let mut cur = Cursor { buf: &data, pos: 0, path };
    if cur.take(4)? != FIELD_MAGIC {
        return Err(Error::Integrity(format!(
            "{} is not a field file (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != FIELD_VERSION {
        return Err(Error::Integrity(format!(
            "{}: unsupported field format version {version}",
            path.display()
        )));
    }
    let mut axes = Vec::with_capacity(4);
    for _ in 0..4 {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Integrity(format!("{}: bad axis name", path.display())))?
            .to_string();
        let min = cur.f64()?;
        let max = cur.f64()?;
        let count = cur.u64()? as usize;
        let boundary = match cur.take(1)?[0] {
            0 => BoundaryKind::Dirichlet,
            1 => BoundaryKind::Periodic,
            b => {
                return Err(Error::Integrity(format!(
                    "{}: unknown boundary tag {b}",
                    path.display()
                )))
            }
        };
        axes.push(Axis::new(&name, min, max, count, boundary)?);
    }
    let chart = Arc::new(GridChart::new([
        axes[0].clone(),
        axes[1].clone(),
        axes[2].clone(),
        axes[3].clone(),
    ])?);
    let len = cur.u64()? as usize;
    let expect: usize = chart.dims().iter().product();
    if len != expect {
        return Err(Error::Integrity(format!(
            "{}: data length {len} does not match chart size {expect}",
            path.display()
        )));
    }
    let mut field = Field::zeros(&chart);
    for v in field.data.iter_mut() {
        *v = cur.f64()?;
    }
    if cur.pos != data.len() {
        return Err(Error::Integrity(format!(
            "{}: {} trailing bytes",
            path.display(),
            data.len() - cur.pos
        )));
    }
    Ok(field)
}

/// Write a CSV file: header row, then one line per row of values.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Config(format!(
                "CSV row width {} does not match header width {}",
                row.len(),
                header.len()
            )));
        }
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Convert a CSV written by [`write_csv`] into a gnuplot-ready file:
/// commented header, whitespace-separated columns.
pub fn csv_to_dat(csv_path: &Path, dat_path: &Path) -> Result<()> {
    let text = fs::read_to_string(csv_path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            out.push_str("# ");
            out.push_str(&line.replace(',', " "));
        } else {
            out.push_str(&line.replace(',', " "));
        }
        out.push('\n');
    }
    fs::write(dat_path, out)?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.  Keys come out in struct
/// declaration order, which is fixed at compile time, so reruns are
/// byte-identical.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("JSON serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Hex SHA-256 of a file's contents, streamed.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        use std::fmt::Write as _;
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::Config(format!("{} has no parent directory", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
