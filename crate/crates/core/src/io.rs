//! File formats.
//!
//! Cell fields (densities, potentials) are stored as one line of JSON
//!
//! ```text
//! {"magic":"MEASINV1","axes":[{"lo":..,"hi":..,"count":..},..],"order":"x-fastest","dtype":"f64le"}
//! ```
//!
//! followed by the raw little-endian `f64` values, x-fastest. Trajectories
//! are CSV with header `t,x,y,z`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::Point3;
use crate::error::{Error, Result};
use crate::fvm::{Axis, Grid3};
use crate::simulate::Trajectory;
use crate::stationary::DensityField;

pub const MAGIC: &str = "MEASINV1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldHeader {
    magic: String,
    axes: Vec<Axis>,
    order: String,
    dtype: String,
}

pub fn write_field<W: Write>(mut out: W, grid: &Grid3, values: &[f64]) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::invalid(format!(
            "field has {} values for {} cells",
            values.len(),
            grid.len()
        )));
    }
    let header = FieldHeader {
        magic: MAGIC.to_string(),
        axes: grid.axes().to_vec(),
        order: "x-fastest".to_string(),
        dtype: "f64le".to_string(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    let mut body = Vec::with_capacity(8 * values.len());
    for v in values {
        body.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&body)?;
    out.flush()?;
    Ok(())
}

pub fn read_field<R: Read>(input: R) -> Result<(Grid3, Vec<f64>)> {
    let mut reader = BufReader::new(input);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("missing header line".into()));
    }
    let header: FieldHeader =
        serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Format(format!("unknown magic {:?}", header.magic)));
    }
    if header.order != "x-fastest" || header.dtype != "f64le" {
        return Err(Error::Format(format!(
            "unsupported layout order={} dtype={}",
            header.order, header.dtype
        )));
    }
    let axes: [Axis; 3] = header
        .axes
        .try_into()
        .map_err(|a: Vec<Axis>| Error::Format(format!("expected 3 axes, found {}", a.len())))?;
    let grid = Grid3::new(axes).map_err(|e| Error::Format(e.to_string()))?;
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != 8 * grid.len() {
        return Err(Error::Format(format!(
            "body has {} bytes, expected {}",
            body.len(),
            8 * grid.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((grid, values))
}

pub fn write_density(path: &Path, rho: &DensityField) -> Result<()> {
    write_field(BufWriter::new(File::create(path)?), rho.grid(), rho.mass())
}

pub fn read_density(path: &Path) -> Result<DensityField> {
    let (grid, mass) = read_field(File::open(path)?)?;
    DensityField::new(grid, mass).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_potential(path: &Path, grid: &Grid3, values: &[f64]) -> Result<()> {
    write_field(BufWriter::new(File::create(path)?), grid, values)
}

pub fn write_trajectory<W: Write>(out: W, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "x", "y", "z"]).map_err(csv_err)?;
    for (i, p) in traj.samples().iter().enumerate() {
        w.serialize((traj.time(i), p[0], p[1], p[2])).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Points of a `t,x,y,z` CSV file (the time column is not used).
pub fn read_trajectory_points<R: Read>(input: R) -> Result<Vec<Point3>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "x", "y", "z"] {
        return Err(Error::Format(format!("expected header t,x,y,z, found {headers:?}")));
    }
    let mut out = Vec::new();
    for row in r.deserialize::<(f64, f64, f64, f64)>() {
        let (_, x, y, z) = row.map_err(csv_err)?;
        out.push([x, y, z]);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format(format!("{other:?}")),
        }
    } else {
        Error::Format(e.to_string())
    }
}
