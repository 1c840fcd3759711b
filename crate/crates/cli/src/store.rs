//! Feature-store file written by batch inference: every catalog product's
//! id and unit-norm embedding row.
//!
//! Layout (little-endian): row count u64, dimension u32, the id block
//! (u64 per row), then row-major f32 embeddings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use vitrine::error::{Error, Result};

pub fn write_store(path: &Path, ids: &[u64], rows: &[Vec<f32>]) -> Result<()> {
    if ids.len() != rows.len() {
        return Err(Error::Input(format!(
            "{} ids but {} embedding rows",
            ids.len(),
            rows.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::Input("refusing to write an empty feature store".into()));
    }
    let dim = rows[0].len();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for &id in ids {
        w.write_all(&id.to_le_bytes())?;
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::Shape(format!(
                "row {i} has {} dims, row 0 has {dim}",
                row.len()
            )));
        }
        for &x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<(Vec<u64>, Vec<Vec<f32>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b8, "row count")?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "dimension")?;
    let dim = u32::from_le_bytes(b4) as usize;
    if n == 0 || dim == 0 {
        return Err(Error::Format(format!("degenerate feature store shape {n} x {dim}")));
    }
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        read_exact(&mut r, &mut b8, "id")?;
        ids.push(u64::from_le_bytes(b8));
    }
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = vec![0f32; dim];
        for x in row.iter_mut() {
            read_exact(&mut r, &mut b4, "embedding")?;
            *x = f32::from_le_bytes(b4);
        }
        rows.push(row);
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format("trailing bytes after feature store payload".into()));
    }
    Ok((ids, rows))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("feature store truncated reading {what}: {e}")))
}
