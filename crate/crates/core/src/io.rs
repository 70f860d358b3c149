//! Field file formats and atomic artifact writes.
//!
//! Two interchangeable encodings exist for a [`Field`]:
//!
//! * CSV with header `date,cell_<id1>,...,cell_<idN>` and one row per ISO date.
//! * Raw little-endian `f64` values in cell-major order (all days of the first
//!   cell, then the second, ...) in `<name>.bin`, described by a JSON sidecar
//!   `<name>.json` holding `n_cells`, `n_days`, `start_date` and `cell_ids`.
//!
//! Values are written with the shortest representation that round-trips, so
//! both readers return bit-identical matrices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calendar::daily_range;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{hex, GridSpec};

/// Writes through a temporary file in the target directory and renames it
/// into place once `write` succeeds.
pub fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    {
        let mut w = BufWriter::new(&mut tmp);
        write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    })
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}

/// Hash of the numerical content of a field (dates, cell ids and values).
pub fn field_hash(field: &Field) -> String {
    let mut h = Sha256::new();
    for id in field.grid().ids() {
        h.update(id.to_le_bytes());
    }
    for d in field.dates() {
        h.update(d.to_string().as_bytes());
    }
    for v in field.values() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarySidecar {
    pub n_cells: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub cell_ids: Vec<i64>,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Loads a field, choosing the encoding from the extension (`.bin` means the
/// binary form, anything else is read as CSV).
pub fn load_field(path: impl AsRef<Path>, grid: Arc<GridSpec>) -> Result<Field> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "bin") {
        read_field_binary(path, grid)
    } else {
        read_field_csv(path, grid)
    }
}

pub fn save_field(path: impl AsRef<Path>, field: &Field) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "bin") {
        write_field_binary(path, field)
    } else {
        write_field_csv(path, field)
    }
}

fn ingest(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.into(),
        message: message.into(),
    }
}

/// Maps file column order onto grid order, requiring the same set of ids.
fn column_order(path: &Path, file_ids: &[i64], grid: &GridSpec) -> Result<Vec<usize>> {
    if file_ids.len() != grid.len() {
        return Err(ingest(
            path,
            format!(
                "dimension mismatch: file has {} cells, grid has {}",
                file_ids.len(),
                grid.len()
            ),
        ));
    }
    let mut seen = vec![false; grid.len()];
    file_ids
        .iter()
        .map(|id| {
            let idx = grid
                .index_of(*id)
                .ok_or_else(|| ingest(path, format!("dimension mismatch: cell {id} not in grid")))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(ingest(path, format!("cell {id} appears twice")));
            }
            Ok(idx)
        })
        .collect()
}

pub fn read_field_csv(path: &Path, grid: Arc<GridSpec>) -> Result<Field> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.get(0) != Some("date") {
        return Err(ingest(path, "first column must be `date`"));
    }
    let file_ids = headers
        .iter()
        .skip(1)
        .map(|h| {
            h.strip_prefix("cell_")
                .and_then(|s| s.parse::<i64>().ok())
                .ok_or_else(|| ingest(path, format!("bad column header `{h}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let order = column_order(path, &file_ids, &grid)?;

    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = r + 1;
        let date: NaiveDate = rec
            .get(0)
            .unwrap_or_default()
            .parse()
            .map_err(|_| ingest(path, format!("record {line}: bad date")))?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(ingest(
                    path,
                    format!("non-monotone time axis at record {line} ({date})"),
                ));
            }
            if (date - *prev).num_days() != 1 {
                return Err(ingest(
                    path,
                    format!("time axis is not daily at record {line} ({date})"),
                ));
            }
        }
        if rec.len() != file_ids.len() + 1 {
            return Err(ingest(
                path,
                format!("dimension mismatch: record {line} has {} columns", rec.len()),
            ));
        }
        let mut row = vec![0.0; grid.len()];
        for (k, s) in rec.iter().skip(1).enumerate() {
            let v: f64 = s.trim().parse().map_err(|_| {
                ingest(
                    path,
                    format!("unparsable value at cell {}, day {line}", file_ids[k]),
                )
            })?;
            if !v.is_finite() {
                return Err(ingest(
                    path,
                    format!("non-finite value at cell {}, day {line} ({date})", file_ids[k]),
                ));
            }
            row[order[k]] = v;
        }
        dates.push(date);
        rows.push(row);
    }
    let n_days = dates.len();
    let mut values = vec![0.0; grid.len() * n_days];
    for (t, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            values[c * n_days + t] = *v;
        }
    }
    Field::new(grid, dates, values)
}

pub fn write_field_csv(path: &Path, field: &Field) -> Result<()> {
    write_atomic(path, |w| {
        let ioe = |e| Error::io(path, e);
        write!(w, "date").map_err(ioe)?;
        for id in field.grid().ids() {
            write!(w, ",cell_{id}").map_err(ioe)?;
        }
        writeln!(w).map_err(ioe)?;
        for (t, d) in field.dates().iter().enumerate() {
            write!(w, "{d}").map_err(ioe)?;
            for c in 0..field.n_cells() {
                write!(w, ",{}", field.get(c, t)).map_err(ioe)?;
            }
            writeln!(w).map_err(ioe)?;
        }
        Ok(())
    })
}

pub fn read_field_binary(path: &Path, grid: Arc<GridSpec>) -> Result<Field> {
    let meta: BinarySidecar = read_json(sidecar_path(path))?;
    if meta.cell_ids.len() != meta.n_cells {
        return Err(ingest(path, "sidecar cell_ids length differs from n_cells"));
    }
    let order = column_order(path, &meta.cell_ids, &grid)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = BufReader::new(file);
    let n_days = meta.n_days;
    let mut values = vec![0.0; meta.n_cells * n_days];
    let mut buf = [0u8; 8];
    for (k, &dest) in order.iter().enumerate() {
        for t in 0..n_days {
            rdr.read_exact(&mut buf).map_err(|_| {
                ingest(
                    path,
                    format!("dimension mismatch: file ends before cell {}", meta.cell_ids[k]),
                )
            })?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(ingest(
                    path,
                    format!("non-finite value at cell {}, day {}", meta.cell_ids[k], t + 1),
                ));
            }
            values[dest * n_days + t] = v;
        }
    }
    if !rdr.fill_buf().map_err(|e| Error::io(path, e))?.is_empty() {
        return Err(ingest(path, "dimension mismatch: trailing bytes after last value"));
    }
    let dates = daily_range(
        meta.start_date,
        meta.start_date + chrono::Days::new(n_days.saturating_sub(1) as u64),
    );
    let dates = if n_days == 0 { Vec::new() } else { dates };
    Field::new(grid, dates, values)
}

pub fn write_field_binary(path: &Path, field: &Field) -> Result<()> {
    let start_date = field
        .dates()
        .first()
        .copied()
        .ok_or_else(|| Error::InvalidInput("cannot write an empty field".into()))?;
    write_atomic(path, |w| {
        for v in field.values() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })?;
    write_json(
        sidecar_path(path),
        &BinarySidecar {
            n_cells: field.n_cells(),
            n_days: field.n_days(),
            start_date,
            cell_ids: field.grid().ids(),
        },
    )
}
