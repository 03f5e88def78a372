//! File formats: OBJ meshes, JSON helpers and the binary array container.
//!
//! The binary array container holds named f64 arrays with a JSON header;
//! see `docs/formats.md` for the byte-level layout. All writers are
//! deterministic: same inputs produce byte-identical files.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{ArrayD, IxDyn};
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;

const ARRAY_MAGIC: &[u8; 8] = b"GGBIN1\0\0";

/// Writes `bytes` to `path` via a sibling temp file and an atomic rename,
/// so readers never observe partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp_write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// OBJ
// ---------------------------------------------------------------------------

pub fn save_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    save_obj_impl(path, mesh, None)
}

/// OBJ with per-vertex RGB colors appended to each `v` line (a common
/// extension understood by MeshLab and Blender).
pub fn save_obj_with_colors(path: &Path, mesh: &TriMesh, colors: &[[f64; 3]]) -> Result<()> {
    if colors.len() != mesh.vertices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} colors for {} vertices",
            colors.len(),
            mesh.vertices.len()
        )));
    }
    save_obj_impl(path, mesh, Some(colors))
}

fn save_obj_impl(path: &Path, mesh: &TriMesh, colors: Option<&[[f64; 3]]>) -> Result<()> {
    let mut out = Vec::with_capacity(mesh.vertices.len() * 32);
    for (i, v) in mesh.vertices.iter().enumerate() {
        match colors {
            Some(c) => writeln!(
                out,
                "v {:.9} {:.9} {:.9} {:.4} {:.4} {:.4}",
                v.x, v.y, v.z, c[i][0], c[i][1], c[i][2]
            )?,
            None => writeln!(out, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z)?,
        }
    }
    for f in &mesh.faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    write_atomic(path, &out)
}

pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path)?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut coord = [0.0; 3];
                for c in &mut coord {
                    *c = it
                        .next()
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| {
                            Error::Format(format!("{}:{}: bad vertex", path.display(), lineno + 1))
                        })?;
                }
                vertices.push(Vector3::new(coord[0], coord[1], coord[2]));
            }
            Some("f") => {
                let mut idx = Vec::with_capacity(4);
                for tok in it {
                    // `f v`, `f v/vt`, `f v/vt/vn`, `f v//vn`
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| {
                        Error::Format(format!("{}:{}: bad face", path.display(), lineno + 1))
                    })?;
                    let i = if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        i - 1
                    };
                    if i < 0 || i as usize >= vertices.len() {
                        return Err(Error::Format(format!(
                            "{}:{}: face index out of range",
                            path.display(),
                            lineno + 1
                        )));
                    }
                    idx.push(i as usize);
                }
                // Fan-triangulate polygons.
                for k in 1..idx.len().saturating_sub(1) {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(TriMesh { vertices, faces })
}

// ---------------------------------------------------------------------------
// Binary array container
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayHeader {
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

/// Contents of a binary array file: named f64 arrays plus free-form metadata.
pub struct ArrayFile {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl ArrayFile {
    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format(format!("array '{name}' missing from file")))
    }
}

pub fn write_arrays(
    path: &Path,
    meta: &serde_json::Value,
    arrays: &[(&str, &ArrayD<f64>)],
) -> Result<()> {
    let header = ArrayHeader {
        arrays: arrays
            .iter()
            .map(|(n, a)| ArrayEntry {
                name: n.to_string(),
                shape: a.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(ARRAY_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, a) in arrays {
        let standard = a.as_standard_layout();
        for &v in standard.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn read_arrays(path: &Path) -> Result<ArrayFile> {
    let mut file = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != ARRAY_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a binary array file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: ArrayHeader = serde_json::from_slice(&header_bytes)?;

    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let count: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; count * 8];
        file.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Format(format!("bad array shape in {}: {e}", path.display())))?;
        arrays.push((entry.name.clone(), arr));
    }
    Ok(ArrayFile {
        meta: header.meta,
        arrays,
    })
}

/// CSV writer with a fixed header; used for training logs and metrics.
pub struct CsvWriter {
    out: BufWriter<fs::File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(CsvWriter { out })
    }

    pub fn row(&mut self, values: &[String]) -> Result<()> {
        writeln!(self.out, "{}", values.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn obj_round_trip() {
        let mesh = TriMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.25),
            ],
            faces: vec![[0, 1, 2]],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        save_obj(&path, &mesh).unwrap();
        let back = load_obj(&path).unwrap();
        assert_eq!(back.faces, mesh.faces);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn array_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[4]), vec![9.5, -1.0, 0.0, 2.25]).unwrap();
        let meta = serde_json::json!({"kind": "test", "n": 3});
        write_arrays(&path, &meta, &[("a", &a), ("b", &b)]).unwrap();
        let file = read_arrays(&path).unwrap();
        assert_eq!(file.meta["kind"], "test");
        assert_eq!(file.get("a").unwrap(), &a);
        assert_eq!(file.get("b").unwrap(), &b);
        assert!(file.get("c").is_err());
    }
}
