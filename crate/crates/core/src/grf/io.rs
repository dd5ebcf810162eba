//! Field persistence: flat little-endian binary with a 16-byte `(nx, ny)`
//! header, or row-major CSV (one grid row of constant `y` per line).

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Field, Grid2D};

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_field_bin<W: Write>(field: &Field, mut w: W) -> io::Result<()> {
    let g = field.grid();
    w.write_all(&(g.nx() as u64).to_le_bytes())?;
    w.write_all(&(g.ny() as u64).to_le_bytes())?;
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field_bin<R: Read>(mut r: R) -> io::Result<Field> {
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let nx = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let ny = u64::from_le_bytes(word) as usize;
    let grid = Grid2D::new(nx, ny).map_err(|e| invalid(e.to_string()))?;
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        r.read_exact(&mut word)?;
        values.push(f64::from_le_bytes(word));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(invalid(format!("{} trailing bytes after field data", rest.len())));
    }
    Field::new(grid, values).map_err(|e| invalid(e.to_string()))
}

pub fn write_field_csv<W: Write>(field: &Field, mut w: W) -> io::Result<()> {
    let g = field.grid();
    for j in 0..g.ny() {
        let row: Vec<String> = (0..g.nx()).map(|i| format!("{:e}", field.at(i, j))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_field_csv<R: Read>(r: R) -> io::Result<Field> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| invalid(format!("{t:?}: {e}"))))
            .collect::<io::Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let ny = rows.len();
    let nx = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nx) {
        return Err(invalid("ragged CSV rows"));
    }
    let grid = Grid2D::new(nx, ny).map_err(|e| invalid(e.to_string()))?;
    Field::new(grid, rows.concat()).map_err(|e| invalid(e.to_string()))
}

/// Writes `.csv` as CSV and anything else as binary.
pub fn save_field(field: &Field, path: &Path) -> io::Result<()> {
    let file = io::BufWriter::new(fs::File::create(path)?);
    if is_csv(path) {
        write_field_csv(field, file)
    } else {
        write_field_bin(field, file)
    }
}

pub fn load_field(path: &Path) -> io::Result<Field> {
    let file = BufReader::new(fs::File::open(path)?);
    if is_csv(path) {
        read_field_csv(file)
    } else {
        read_field_bin(file)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}
