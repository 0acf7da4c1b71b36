use std::path::Path;

use super::{Dataset, Split};
use crate::error::{bail, Error, Result};
use crate::model::write_atomic;
use crate::numerics::DenseMatrix;

const FEATURE_MAGIC: &[u8; 4] = b"CM3F";

/// One CSV row before id mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: u64,
    pub split: Option<Split>,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.display().to_string(), io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Reads `user,item[,third]` rows. The first row is skipped when its item
/// field is not an integer (a header). With `split_column`, the third field
/// must name a split; otherwise it is ignored (timestamps).
fn read_rows(path: &Path, split_column: bool) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for (line, rec) in reader(path)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() < 2 || (split_column && rec.len() < 3) {
            bail!(Format, "{}:{}: expected at least {} columns", path.display(), line + 1, 2 + usize::from(split_column));
        }
        let item = match rec[1].parse::<u64>() {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(_) => bail!(Format, "{}:{}: item id '{}' is not a non-negative integer", path.display(), line + 1, &rec[1]),
        };
        if rec[0].is_empty() {
            bail!(Format, "{}:{}: empty user id", path.display(), line + 1);
        }
        let split = if split_column {
            Some(rec[2].parse::<Split>().map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), line + 1)))?)
        } else {
            None
        };
        out.push(RawInteraction {
            user: rec[0].to_string(),
            item,
            split,
        });
    }
    if out.is_empty() {
        bail!(Data, "{}: no interactions", path.display());
    }
    Ok(out)
}

pub fn read_interactions(path: &Path) -> Result<Vec<RawInteraction>> {
    read_rows(path, false)
}

/// Reads a `user,item,split` manifest.
pub fn read_split_manifest(path: &Path) -> Result<Vec<RawInteraction>> {
    read_rows(path, true)
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Internal(format!("csv encoding: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(format!("csv encoding: {e}")))?;
    write_atomic(path, &bytes)
}

/// Writes `user_id,item_id` with internal item indices.
pub fn write_interactions(ds: &Dataset, path: &Path) -> Result<()> {
    write_csv(
        path,
        &["user_id", "item_id"],
        ds.interactions.iter().map(|&(u, i)| vec![ds.user_ids[u].clone(), i.to_string()]),
    )
}

pub fn write_split_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let Some(splits) = &ds.splits else {
        bail!(Data, "dataset has not been split");
    };
    write_csv(
        path,
        &["user", "item", "split"],
        ds.interactions
            .iter()
            .zip(splits)
            .map(|(&(u, i), s)| vec![ds.user_ids[u].clone(), i.to_string(), s.to_string()]),
    )
}

/// Writes the binary feature format (values stored as 32-bit floats).
pub fn save_features(path: &Path, m: &DenseMatrix) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Config("too many feature rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Config("too many feature columns".into()))?;
    let mut buf = Vec::with_capacity(12 + 4 * m.data().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Writes features as headerless CSV, one item per line.
pub fn save_features_csv(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| (*v as f32).to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Loads a feature matrix from the binary format or, for `.csv` files,
/// from comma-separated rows. `expected_rows` enforces the item count.
pub fn load_features(path: &Path, expected_rows: Option<usize>) -> Result<DenseMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let m = if bytes.starts_with(FEATURE_MAGIC) {
        parse_binary(path, &bytes)?
    } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_csv(path, &bytes)?
    } else {
        bail!(Format, "{}: missing CM3F header", path.display());
    };
    if let Some(n) = expected_rows {
        if m.rows() != n {
            bail!(Data, "{}: {} feature rows but the item catalog has {n} items", path.display(), m.rows());
        }
    }
    Ok(m)
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < 12 {
        bail!(Format, "{}: truncated header", path.display());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{}: header dimensions overflow", path.display())))?;
    if bytes.len() - 12 != want {
        bail!(
            Format,
            "{}: header says {rows}x{cols} but payload has {} bytes",
            path.display(),
            bytes.len() - 12
        );
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DenseMatrix::from_vec(rows, cols, data).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn parse_csv(path: &Path, bytes: &[u8]) -> Result<DenseMatrix> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if line == 0 => continue,
            Err(_) => bail!(Format, "{}:{}: non-numeric feature value", path.display(), line + 1),
        }
    }
    if rows.is_empty() {
        bail!(Format, "{}: no feature rows", path.display());
    }
    DenseMatrix::from_rows(&rows).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
