//! Binary field snapshots: a one-line text header
//! `SAVF1 dim N1 [N2 [N3]] L1 [L2 [L3]]` followed by little-endian `f64`
//! values in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Field, Grid};
use crate::error::{Result, SavError};

const MAGIC: &str = "SAVF1";

pub fn write_snapshot_to<W: Write>(w: &mut W, field: &Field) -> Result<()> {
    let grid = field.grid();
    let mut header = format!("{MAGIC} {}", grid.dim());
    for n in grid.points() {
        header.push_str(&format!(" {n}"));
    }
    for l in grid.lengths() {
        header.push_str(&format!(" {l}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(8 * field.values().len());
    for v in field.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshot_from<R: BufRead>(r: &mut R) -> Result<Field> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut parts = line.trim_end_matches('\n').split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(SavError::Snapshot("missing SAVF1 header".into()));
    }
    let bad = |what: &str| SavError::Snapshot(format!("bad {what} in header"));
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("dimension"))?;
    if !(1..=3).contains(&dim) {
        return Err(bad("dimension"));
    }
    let mut points = Vec::with_capacity(dim);
    for _ in 0..dim {
        points.push(
            parts
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| bad("point count"))?,
        );
    }
    let mut lengths = Vec::with_capacity(dim);
    for _ in 0..dim {
        lengths.push(
            parts
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad("box length"))?,
        );
    }
    if parts.next().is_some() {
        return Err(bad("trailing token"));
    }
    let grid = Grid::new(&points, &lengths)?;
    let mut bytes = vec![0u8; 8 * grid.len()];
    r.read_exact(&mut bytes)
        .map_err(|_| SavError::Snapshot("truncated value block".into()))?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Field::new(grid, values)
}

pub fn write_snapshot(path: impl AsRef<Path>, field: &Field) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_snapshot_to(&mut w, field)?;
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Field> {
    let mut r = BufReader::new(File::open(path)?);
    read_snapshot_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn round_trip_is_bit_exact() {
        let g = Grid::new(&[4, 6], &[std::f64::consts::TAU, 0.1]).unwrap();
        let f = Field::from_fn(&g, |x| (x[0] * 1.7).sin() / 3.0 + x[1]);
        let mut buf = Vec::new();
        write_snapshot_to(&mut buf, &f).unwrap();
        assert!(buf.starts_with(b"SAVF1 2 4 6 6.283185307179586 0.1\n"));
        let back = read_snapshot_from(&mut Cursor::new(buf)).unwrap();
        assert_eq!(back.grid().as_ref(), g.as_ref());
        for (a, b) in f.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_truncated_data() {
        let g = Grid::periodic(&[4]).unwrap();
        let mut buf = Vec::new();
        write_snapshot_to(&mut buf, &Field::constant(&g, 1.0)).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_snapshot_from(&mut Cursor::new(buf)),
            Err(SavError::Snapshot(_))
        ));
        assert!(read_snapshot_from(&mut Cursor::new(b"SAVQ1 1 4 1\n".to_vec())).is_err());
    }
}
