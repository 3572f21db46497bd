//! Wavefront OBJ subset (`v`, `f`, comments) and plain-text point clouds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{PointCloud, TriMesh};
use crate::error::{Error, Result};
use crate::geom::Point3;

/// Record types that are accepted and ignored.
const IGNORED: &[&str] = &["vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib", "l"];

pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        match tag {
            "v" => {
                let coords: Vec<f64> = tokens
                    .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("bad coordinate `{t}`: {e}"))))
                    .collect::<Result<_>>()?;
                if coords.len() < 3 {
                    return Err(parse_err(format!("vertex needs 3 coordinates, got {}", coords.len())));
                }
                if coords[..3].iter().any(|c| !c.is_finite()) {
                    return Err(parse_err("non-finite vertex coordinate".into()));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            "f" => {
                let idx: Vec<usize> = tokens
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head
                            .parse()
                            .map_err(|e| parse_err(format!("bad face index `{t}`: {e}")))?;
                        let n = vertices.len() as i64;
                        let resolved = if i < 0 { n + i } else { i - 1 };
                        if i == 0 || resolved < 0 || resolved >= n {
                            return Err(Error::Index {
                                line: line_no,
                                index: i,
                                count: vertices.len(),
                            });
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(parse_err(format!("face needs 3 indices, got {}", idx.len())));
                }
                // fan around the first corner
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            t if IGNORED.contains(&t) => {}
            other => return Err(parse_err(format!("unsupported record `{other}`"))),
        }
    }
    TriMesh::new(vertices, faces)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_obj(&text)
}

/// Serializes with shortest round-trip float formatting, so
/// `parse_obj(write_obj(m)) == m`.
pub fn write_obj(mesh: &TriMesh) -> String {
    let mut s = String::with_capacity(32 * (mesh.vertices().len() + mesh.faces().len()));
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn save_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_obj(mesh)).map_err(|e| Error::file(path, e))
}

pub fn write_points(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    fs::write(path, s).map_err(|e| Error::file(path, e))
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let c: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("{e}"),
            })?;
        if c.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 coordinates, got {}", c.len()),
            });
        }
        pts.push([c[0], c[1], c[2]]);
    }
    PointCloud::new(pts)
}
