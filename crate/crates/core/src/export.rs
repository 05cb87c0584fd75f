//! CSV export and re-import of fields.
//!
//! Numbers are written in scientific notation with 17 significant digits, so
//! every `f64` round-trips exactly. Rows follow storage order: node id for
//! volumes, `(j, i)` for faces, `(sheet, k, i)` for surfaces.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Face, FaceField, Field3, Grid3, Level, Region, SurfaceField};

pub const VOLUME_HEADER: &str = "x,y,z,value";
pub const FACE_HEADER: &str = "x,y,value,face";
pub const SURFACE_HEADER: &str = "x,z,value,sheet";

pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn face_name(f: Face) -> &'static str {
    match f {
        Face::Plus => "plus",
        Face::Minus => "minus",
    }
}

/// Writes a header and rows of preformatted cells.
pub fn write_table(path: &Path, header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Numeric table with one row per slice.
pub fn write_numeric(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    write_table(path, header, rows.iter().map(|r| r.iter().map(|&v| fmt_num(v)).collect()))
}

pub fn volume_csv(f: &Field3) -> String {
    let mut s = format!("{VOLUME_HEADER}\n");
    for n in f.region_nodes() {
        let (x, y, z) = f.grid.point(n);
        let _ = writeln!(s, "{},{},{},{}", fmt_num(x), fmt_num(y), fmt_num(z), fmt_num(f.values[n]));
    }
    s
}

pub fn faces_csv(faces: &[&FaceField]) -> String {
    let mut s = format!("{FACE_HEADER}\n");
    for f in faces {
        let g = &f.grid;
        for j in f.j_lo..=f.j_hi {
            for i in 0..g.nx() {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    fmt_num(g.xs[i]),
                    fmt_num(g.ys[j]),
                    fmt_num(f.at(i, j)),
                    face_name(f.face)
                );
            }
        }
    }
    s
}

pub fn surface_csv(f: &SurfaceField) -> String {
    let g = &f.grid;
    let mut s = format!("{SURFACE_HEADER}\n");
    for (vals, sheet) in [(&f.lower, "lower"), (&f.upper, "upper")] {
        for k in 0..g.nz() {
            for i in 0..g.nx() {
                let v = vals[k * g.nx() + i];
                let _ = writeln!(s, "{},{},{},{}", fmt_num(g.xs[i]), fmt_num(g.zs[k]), fmt_num(v), sheet);
            }
        }
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn export_volume(f: &Field3, path: &Path) -> Result<()> {
    write_text(path, &volume_csv(f))
}

pub fn export_faces(faces: &[&FaceField], path: &Path) -> Result<()> {
    write_text(path, &faces_csv(faces))
}

pub fn export_surface(f: &SurfaceField, path: &Path) -> Result<()> {
    write_text(path, &surface_csv(f))
}

/// Splits a CSV body after checking the header.
fn rows<'a>(text: &'a str, header: &str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    let got = lines.next().unwrap_or("");
    if got != header {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{header}`, found `{got}`"),
        });
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(l, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() == width {
                Ok(cells)
            } else {
                Err(Error::Parse {
                    line: l + 2,
                    message: format!("expected {width} cells"),
                })
            }
        })
        .collect()
}

fn num(cell: &str, line: usize) -> Result<f64> {
    cell.parse().map_err(|_| Error::Parse {
        line,
        message: format!("not a number: `{cell}`"),
    })
}

fn check_coord(got: f64, want: f64, line: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("line {line}: coordinate {got} differs from grid node {want}")))
    }
}

/// Reads a volume file written by [`export_volume`] on the same grid and region.
pub fn import_volume(text: &str, grid: &Arc<Grid3>, region: Region) -> Result<Field3> {
    let mut f = Field3::zeros(grid.clone(), region);
    let rs = rows(text, VOLUME_HEADER)?;
    let nodes: Vec<usize> = f.region_nodes().collect();
    if rs.len() != nodes.len() {
        return Err(Error::ShapeMismatch(format!("{} rows for {} nodes", rs.len(), nodes.len())));
    }
    for (l, (r, &n)) in rs.iter().zip(&nodes).enumerate() {
        let (x, y, z) = grid.point(n);
        check_coord(num(r[0], l + 2)?, x, l + 2)?;
        check_coord(num(r[1], l + 2)?, y, l + 2)?;
        check_coord(num(r[2], l + 2)?, z, l + 2)?;
        f.values[n] = num(r[3], l + 2)?;
    }
    Ok(f)
}

pub fn import_surface(text: &str, grid: &Arc<Grid3>, level: Level) -> Result<SurfaceField> {
    let rs = rows(text, SURFACE_HEADER)?;
    let m = grid.nx() * grid.nz();
    if rs.len() != 2 * m {
        return Err(Error::ShapeMismatch(format!("{} rows for {} surface nodes", rs.len(), 2 * m)));
    }
    let mut v = Vec::with_capacity(2 * m);
    for (l, r) in rs.iter().enumerate() {
        let (i, k) = ((l % m) % grid.nx(), (l % m) / grid.nx());
        check_coord(num(r[0], l + 2)?, grid.xs[i], l + 2)?;
        check_coord(num(r[1], l + 2)?, grid.zs[k], l + 2)?;
        let want = if l < m { "lower" } else { "upper" };
        if r[3] != want {
            return Err(Error::ShapeMismatch(format!("line {}: sheet `{}`", l + 2, r[3])));
        }
        v.push(num(r[2], l + 2)?);
    }
    Ok(SurfaceField::from_vec(grid.clone(), level, &v))
}

/// Reads face values back into the layouts of `templates`, in order.
pub fn import_faces(text: &str, templates: &[&FaceField]) -> Result<Vec<FaceField>> {
    let rs = rows(text, FACE_HEADER)?;
    let mut it = rs.iter().enumerate();
    let mut out = Vec::new();
    for t in templates {
        let mut f = (*t).clone();
        let g = t.grid.clone();
        for j in t.j_lo..=t.j_hi {
            for i in 0..g.nx() {
                let (l, r) = it
                    .next()
                    .ok_or_else(|| Error::ShapeMismatch("too few face rows".into()))?;
                check_coord(num(r[0], l + 2)?, g.xs[i], l + 2)?;
                check_coord(num(r[1], l + 2)?, g.ys[j], l + 2)?;
                if r[3] != face_name(t.face) {
                    return Err(Error::ShapeMismatch(format!("line {}: face `{}`", l + 2, r[3])));
                }
                f.set(i, j, num(r[2], l + 2)?);
            }
        }
        out.push(f);
    }
    if it.next().is_some() {
        return Err(Error::ShapeMismatch("too many face rows".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::model::{CycleLevels, ModelParams};

    fn grid() -> Arc<Grid3> {
        Arc::new(build_grid(&ModelParams::default(), &CycleLevels::default(), 3, 2, 5, 2.0).unwrap())
    }

    #[test]
    fn round_trips_are_exact() {
        let g = grid();
        let f = Field3::from_fn(g.clone(), Region::ExteriorUp, |x, y, z| (x * 3.1 + y).exp() / 7.0 + z * 1e-300);
        let back = import_volume(&volume_csv(&f), &g, Region::ExteriorUp).unwrap();
        assert_eq!(back, f);

        let s = SurfaceField::from_fn(g.clone(), Level::Gamma, |x, z, up| x / 3.0 - z + f64::from(u8::from(up)) * 0.1);
        assert_eq!(import_surface(&surface_csv(&s), &g, Level::Gamma).unwrap(), s);

        let mut a = FaceField::zeros(g.clone(), Face::Plus, 0, g.ny() - 1);
        let mut b = FaceField::zeros(g.clone(), Face::Minus, 1, 3);
        a.set(1, 2, 1.0 / 3.0);
        b.set(2, 3, -f64::MIN_POSITIVE);
        let back = import_faces(&faces_csv(&[&a, &b]), &[&a, &b]).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn format_and_empty_tables() {
        assert_eq!(fmt_num(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_num(-2.0), "-2.0000000000000000e0");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/empty.csv");
        write_table(&p, FACE_HEADER, Vec::<Vec<String>>::new()).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x,y,value,face\n");
        assert!(import_surface("x,z,value\n", &grid(), Level::Gamma).is_err());
    }
}
