//! Legacy VTK structured-points writer for nodal grid fields.

use std::io::Write;

use crate::grid::Grid;
use crate::{Error, Result};

/// Writes one or more nodal scalar fields as ASCII structured points.
pub fn write_structured_points<W: Write>(out: &mut W, grid: &Grid, title: &str, fields: &[(&str, &[f64])]) -> Result<()> {
    let n = grid.num_vertices();
    for (name, f) in fields {
        if f.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: f.len() });
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("bad field name {name:?}")));
        }
    }
    let o = grid.origin();
    let h = grid.spacing;
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "{}", title.lines().next().unwrap_or(""))?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET STRUCTURED_POINTS")?;
    writeln!(out, "DIMENSIONS {} {} {}", grid.nx, grid.ny, grid.nz)?;
    writeln!(out, "ORIGIN {} {} {}", o[0], o[1], o[2])?;
    writeln!(out, "SPACING {} {} {}", h[0], h[1], h[2])?;
    writeln!(out, "POINT_DATA {n}")?;
    for (name, f) in fields {
        writeln!(out, "SCALARS {name} double 1")?;
        writeln!(out, "LOOKUP_TABLE default")?;
        for v in *f {
            writeln!(out, "{v:e}")?;
        }
    }
    Ok(())
}

pub fn write_file(path: &std::path::Path, grid: &Grid, title: &str, fields: &[(&str, &[f64])]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_structured_points(&mut w, grid, title, fields)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_values_roundtrip() {
        let g = Grid::new(2, 3, 2, 1.0, 1.0, 1.0).unwrap();
        let f: Vec<f64> = (0..g.num_vertices()).map(|i| i as f64 * 0.5).collect();
        let mut buf = Vec::new();
        write_structured_points(&mut buf, &g, "demo", &[("mu", &f)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[4], "DIMENSIONS 2 3 2");
        assert_eq!(lines[5], "ORIGIN -1 -1 0");
        assert_eq!(lines[6], "SPACING 2 1 1");
        assert_eq!(lines[7], "POINT_DATA 12");
        let vals: Vec<f64> = lines[10..].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(vals, f);
    }

    #[test]
    fn rejects_wrong_length() {
        let g = Grid::new(2, 2, 2, 1.0, 1.0, 1.0).unwrap();
        let mut buf = Vec::new();
        assert!(write_structured_points(&mut buf, &g, "x", &[("f", &[1.0][..])]).is_err());
    }
}
