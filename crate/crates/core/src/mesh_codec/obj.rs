//! Wavefront OBJ subset: `v x y z` and `f i j k ...` records.

use std::fmt::Write as _;
use std::path::Path;

use super::Mesh;
use crate::{Error, Result};

/// Parses OBJ text. Polygons are fan-triangulated; normals, texture
/// coordinates, groups and materials are ignored.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut polygons: Vec<(usize, Vec<i64>)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut xyz = [0.0f64; 3];
                for slot in xyz.iter_mut() {
                    let tok = parts.next().ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: "vertex record needs three coordinates".into(),
                    })?;
                    *slot = tok.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad coordinate {tok:?}"),
                    })?;
                    if !slot.is_finite() {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("non-finite coordinate {tok:?}"),
                        });
                    }
                }
                vertices.push(xyz);
            }
            Some("f") => {
                let mut ids = Vec::new();
                for tok in parts {
                    let head = tok.split('/').next().unwrap_or("");
                    let id: i64 = head.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad face index {tok:?}"),
                    })?;
                    if id < 0 {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("negative face index {id} is not supported"),
                        });
                    }
                    ids.push(id);
                }
                if ids.len() < 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("face needs at least 3 vertices, got {}", ids.len()),
                    });
                }
                polygons.push((line_no, ids));
            }
            _ => {}
        }
    }

    let count = vertices.len();
    let mut faces = Vec::new();
    for (line, ids) in polygons {
        let mut resolved = Vec::with_capacity(ids.len());
        for id in ids {
            if id < 1 || id as usize > count {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    vertices: count,
                    line,
                });
            }
            resolved.push(id as usize - 1);
        }
        for k in 1..resolved.len() - 1 {
            faces.push([resolved[0], resolved[k], resolved[k + 1]]);
        }
    }
    Ok(Mesh { vertices, faces })
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

/// Serializes a mesh as OBJ text with 1-based indices.
pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_obj(mesh)).map_err(|e| Error::io(path, e))
}
