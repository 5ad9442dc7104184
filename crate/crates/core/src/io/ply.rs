//! ASCII PLY mesh output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::FormatError;
use crate::fusion::TriangleMesh;

pub fn encode_ply(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    let with_normals = mesh.normals.as_ref().is_some_and(|n| n.len() == mesh.vertices.len());
    s.push_str("ply\nformat ascii 1.0\ncomment codemap tsdf mesh\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if with_normals {
        s.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    let _ = writeln!(s, "element face {}", mesh.triangles.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices.iter().enumerate() {
        let _ = write!(s, "{} {} {}", v[0] as f32, v[1] as f32, v[2] as f32);
        if with_normals {
            let n = mesh.normals.as_ref().expect("checked")[i];
            let _ = write!(s, " {} {} {}", n[0] as f32, n[1] as f32, n[2] as f32);
        }
        s.push('\n');
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<(), FormatError> {
    fs::write(path, encode_ply(mesh)).map_err(|e| FormatError::io(path, e))
}
