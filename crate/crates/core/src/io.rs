//! Binary snapshot formats.
//!
//! Two row-major little-endian formats share one layout convention:
//!
//! ```text
//! gridfn v1 <d> <nx> <nt> <rank>\n   then (nt+1) * nx^d * comps f64 values
//! paths  v1 <d> <m> <steps>\n        then m * (steps+1) * d f64 states
//! ```
//!
//! `nt` counts time steps (0 for a static field, which stores one slice).
//! The `gridfn` header holds the lattice shape only; the physical box and
//! horizon are supplied on load and validated against the payload shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFn, Rank};

fn read_header_line(reader: &mut impl Read) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 {
            return Err(Error::SnapshotFormat("unexpected end of file in header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 256 {
            return Err(Error::SnapshotFormat("header line too long".into()));
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|_| Error::SnapshotFormat("header is not utf-8".into()))
}

fn write_f64s(writer: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(reader: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    reader.read_exact(&mut buf).map_err(|_| {
        Error::SnapshotFormat(format!("payload shorter than the {count} values promised by the header"))
    })?;
    let mut values = Vec::with_capacity(count);
    for chunk in buf.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(values)
}

/// Writes a field snapshot in `gridfn v1` format.
pub fn write_gridfn(f: &GridFn, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let nt = if f.time_dependent { f.grid.nt } else { 0 };
    writeln!(
        w,
        "gridfn v1 {} {} {} {}",
        f.grid.dim,
        f.grid.nx,
        nt,
        f.rank.token()
    )?;
    write_f64s(&mut w, &f.values)?;
    w.flush()?;
    Ok(())
}

/// Reads a `gridfn v1` snapshot, attaching the given box and horizon.
///
/// A static snapshot (`nt = 0` in the header) may be attached to any `nt`;
/// a time-dependent one must match the target grid's `nt` exactly.
pub fn read_gridfn(path: &Path, half_width: f64, t_horizon: f64, nt: usize) -> Result<GridFn> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_line(&mut r)?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 6 || tokens[0] != "gridfn" || tokens[1] != "v1" {
        return Err(Error::SnapshotFormat(format!("bad gridfn header: {header:?}")));
    }
    let dim: usize = tokens[2]
        .parse()
        .map_err(|_| Error::SnapshotFormat("bad dim in header".into()))?;
    let nx: usize = tokens[3]
        .parse()
        .map_err(|_| Error::SnapshotFormat("bad nx in header".into()))?;
    let file_nt: usize = tokens[4]
        .parse()
        .map_err(|_| Error::SnapshotFormat("bad nt in header".into()))?;
    let rank = Rank::from_token(tokens[5])?;

    let time_dependent = file_nt > 0;
    if time_dependent && file_nt != nt {
        return Err(Error::SnapshotFormat(format!(
            "snapshot stores nt = {file_nt} but the target grid has nt = {nt}"
        )));
    }
    let grid = Grid::new(dim, half_width, nx, t_horizon, nt)?;
    let slices = if time_dependent { file_nt + 1 } else { 1 };
    let count = slices * grid.cells() * rank.components(dim);
    let values = read_f64s(&mut r, count)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::SnapshotFormat("trailing bytes after payload".into()));
    }
    let f = GridFn { grid, rank, time_dependent, values };
    f.check_finite("gridfn snapshot")?;
    Ok(f)
}

/// Writes path states in `paths v1` format (`m * (steps+1) * d` values).
pub fn write_paths(dim: usize, paths: usize, steps: usize, states: &[f64], path: &Path) -> Result<()> {
    if states.len() != paths * (steps + 1) * dim {
        return Err(Error::shape(format!(
            "states length {} does not match {} paths x {} slices x {} dims",
            states.len(),
            paths,
            steps + 1,
            dim
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "paths v1 {dim} {paths} {steps}")?;
    write_f64s(&mut w, states)?;
    w.flush()?;
    Ok(())
}

/// Reads a `paths v1` snapshot, returning `(dim, paths, steps, states)`.
pub fn read_paths(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_line(&mut r)?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != "paths" || tokens[1] != "v1" {
        return Err(Error::SnapshotFormat(format!("bad paths header: {header:?}")));
    }
    let dim: usize = tokens[2]
        .parse()
        .map_err(|_| Error::SnapshotFormat("bad dim in header".into()))?;
    let paths: usize = tokens[3]
        .parse()
        .map_err(|_| Error::SnapshotFormat("bad path count in header".into()))?;
    let steps: usize = tokens[4]
        .parse()
        .map_err(|_| Error::SnapshotFormat("bad step count in header".into()))?;
    let states = read_f64s(&mut r, paths * (steps + 1) * dim)?;
    Ok((dim, paths, steps, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sample_scalar, Grid};
    use std::f64::consts::PI;

    #[test]
    fn gridfn_roundtrip_is_bit_exact() {
        let g = Grid::new(2, PI, 16, 1.0, 4).unwrap();
        let f = sample_scalar(g, |x| (x[0] * 1.7).sin() + x[1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.gridfn");
        write_gridfn(&f, &path).unwrap();
        let back = read_gridfn(&path, PI, 1.0, 4).unwrap();
        assert_eq!(f.values, back.values);
        assert_eq!(f.rank, back.rank);
        assert!(!back.time_dependent);
    }

    #[test]
    fn gridfn_load_rejects_truncated_payload() {
        let g = Grid::new(2, PI, 16, 1.0, 4).unwrap();
        let f = sample_scalar(g, |x| x[0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.gridfn");
        write_gridfn(&f, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(read_gridfn(&path, PI, 1.0, 4).is_err());
    }

    #[test]
    fn paths_roundtrip() {
        let states: Vec<f64> = (0..2 * 3 * 2).map(|i| i as f64 * 0.5).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.paths");
        write_paths(2, 2, 2, &states, &path).unwrap();
        let (dim, paths, steps, back) = read_paths(&path).unwrap();
        assert_eq!((dim, paths, steps), (2, 2, 2));
        assert_eq!(states, back);
    }
}
