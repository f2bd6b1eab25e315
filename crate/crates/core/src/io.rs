//! Plain-text XYZ point files: one `x y z` triple per line, `#` comments.

use std::fs;
use std::path::Path;

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points: Vec<Point3> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut q = [0.0f64; 3];
        for (c, f) in q.iter_mut().zip(&fields) {
            *c = f.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("not a number: {f:?}"),
            })?;
            if !c.is_finite() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("non-finite coordinate {f:?}"),
                });
            }
        }
        points.push(q);
    }
    PointCloud::new(points)
}

/// Shortest representation that parses back to the same `f64`.
pub fn serialize_xyz(p: &PointCloud) -> String {
    let mut out = String::with_capacity(p.len() * 24);
    for q in p.points() {
        out.push_str(&format!("{} {} {}\n", q[0], q[1], q[2]));
    }
    out
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_xyz(&fs::read_to_string(path)?)
}

pub fn write_xyz(path: impl AsRef<Path>, p: &PointCloud) -> Result<()> {
    fs::write(path, serialize_xyz(p))?;
    Ok(())
}
