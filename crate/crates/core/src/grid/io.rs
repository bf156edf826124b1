//! Field files.
//!
//! CSV: a `# {json header}` line, a column line `t,x_1..x_d,U_1..U_d`, then one row per
//! node per slice. Binary: `MFGF`, little-endian `u32` version, `u64` header length,
//! the JSON header, then every slice as node-major little-endian `f64`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Grid, GridField};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MFGF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub d: usize,
    #[serde(rename = "R")]
    pub radius: f64,
    pub h: f64,
    pub times: Vec<f64>,
}

impl FieldHeader {
    fn of(field: &GridField) -> Self {
        Self {
            d: field.grid().dim(),
            radius: field.grid().radius(),
            h: field.grid().spacing(),
            times: field.times().to_vec(),
        }
    }
}

pub fn field_to_csv(field: &GridField) -> Result<String> {
    let grid = field.grid();
    let d = grid.dim();
    let mut out = format!("# {}\nt", serde_json::to_string(&FieldHeader::of(field))?);
    for i in 1..=d {
        let _ = write!(out, ",x_{i}");
    }
    for i in 1..=d {
        let _ = write!(out, ",U_{i}");
    }
    out.push('\n');
    for (s, t) in field.times().iter().enumerate() {
        for n in 0..grid.len() {
            let _ = write!(out, "{t}");
            for c in grid.node(n).iter().chain(field.value(s, n)) {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_field_csv(field: &GridField, path: &Path) -> Result<()> {
    std::fs::write(path, field_to_csv(field)?)?;
    Ok(())
}

pub fn write_field_binary(field: &GridField, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&FieldHeader::of(field))?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * field.n_slices() * field.slice(0).len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for s in 0..field.n_slices() {
        for v in field.slice(s) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads either format, detected from the leading bytes.
pub fn read_field(path: &Path) -> Result<GridField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(MAGIC) {
        parse_binary(&bytes)
    } else {
        parse_csv(BufReader::new(bytes.as_slice()))
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(format!("malformed field file: {}", msg.into()))
}

fn parse_binary(bytes: &[u8]) -> Result<GridField> {
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| corrupt("truncated"));
    let version = u32::from_le_bytes(take(4, 4)?.try_into().expect("length 4"));
    if version != VERSION {
        return Err(corrupt(format!("unknown version {version}")));
    }
    let len = u64::from_le_bytes(take(8, 8)?.try_into().expect("length 8")) as usize;
    let header: FieldHeader = serde_json::from_slice(take(16, len)?)?;
    let grid = Arc::new(Grid::new(header.d, header.radius, header.h)?);
    let per = grid.len() * grid.dim();
    let mut at = 16 + len;
    let mut slices = Vec::with_capacity(header.times.len());
    for _ in &header.times {
        let raw = take(at, per * 8)?;
        slices.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("length 8")))
                .collect(),
        );
        at += per * 8;
    }
    if at != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    GridField::new(grid, header.times, slices)
}

fn parse_csv<R: BufRead>(reader: R) -> Result<GridField> {
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| corrupt("empty"))??;
    let json = first.strip_prefix('#').ok_or_else(|| corrupt("missing header line"))?;
    let header: FieldHeader = serde_json::from_str(json.trim())?;
    let grid = Arc::new(Grid::new(header.d, header.radius, header.h)?);
    let d = grid.dim();
    lines.next().ok_or_else(|| corrupt("missing column line"))??;
    let mut slices = vec![vec![f64::NAN; grid.len() * d]; header.times.len()];
    let mut k = vec![0u32; d];
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|e| corrupt(format!("row {row}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 1 + 2 * d {
            return Err(corrupt(format!("row {row} has {} columns", vals.len())));
        }
        let s = header
            .times
            .iter()
            .position(|t| *t == vals[0])
            .ok_or_else(|| corrupt(format!("row {row}: unknown time {}", vals[0])))?;
        for i in 0..d {
            k[i] = (vals[1 + i] / header.h).round() as u32;
        }
        let n = grid.index_of(&k).ok_or_else(|| corrupt(format!("row {row}: point off the grid")))?;
        slices[s][n * d..(n + 1) * d].copy_from_slice(&vals[1 + d..]);
    }
    if slices.iter().flatten().any(|v| v.is_nan()) {
        return Err(corrupt("missing nodes"));
    }
    GridField::new(grid, header.times, slices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_field() -> GridField {
        let grid = Arc::new(Grid::new(2, 1.0, 0.25).unwrap());
        let a: Vec<f64> = (0..grid.len() * 2).map(|i| (i as f64).sin() / 3.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v * 1e-7 + 0.1).collect();
        GridField::new(grid, vec![0.0, 0.1], vec![a, b]).unwrap()
    }

    fn same(a: &GridField, b: &GridField) -> bool {
        a.times() == b.times()
            && (0..a.n_slices()).all(|s| a.slice(s).iter().zip(b.slice(s)).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let f = sample_field();
        write_field_csv(&f, &p).unwrap();
        assert!(same(&f, &read_field(&p).unwrap()));
    }

    #[test]
    fn binary_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let f = sample_field();
        write_field_binary(&f, &p).unwrap();
        assert!(same(&f, &read_field(&p).unwrap()));
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_field_binary(&sample_field(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_field(&p).is_err());
    }
}
