//! Marching cubes without lookup tables.
//!
//! Each cell's iso-surface is assembled from per-face segments: walking a
//! face's corners counter-clockwise (seen from outside the cell), every
//! outside-to-inside crossing is joined to the next inside-to-outside
//! crossing. On ambiguous faces this always separates the inside corners,
//! and both cells sharing the face make the same choice, so the surface is
//! crack-free. Segments are chained into loops and fan-triangulated.

use std::collections::HashMap;

use nalgebra::Vector3;

use super::{TriangleMesh, TsdfVolume};

/// Corner `c` of a cell sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2], // x = 0
    [1, 3, 7, 5], // x = 1
    [0, 1, 5, 4], // y = 0
    [2, 6, 7, 3], // y = 1
    [0, 2, 3, 1], // z = 0
    [4, 5, 7, 6], // z = 1
];

fn offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// Local edge id for adjacent corners: lower corner and axis.
fn edge_of(a: usize, b: usize) -> (usize, usize) {
    let lo = a.min(b);
    let axis = (a ^ b).trailing_zeros() as usize;
    (lo, axis)
}

/// Ordered loops of local edges (each `(lower corner, axis)`) for one cell.
fn cell_loops(inside: &[bool; 8]) -> Vec<Vec<(usize, usize)>> {
    let mut next: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for face in FACES {
        let mut crossings = Vec::with_capacity(4);
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            if inside[a] != inside[b] {
                crossings.push((edge_of(a, b), inside[b]));
            }
        }
        // Crossings alternate between entering and leaving the inside.
        for (i, &(e, enters)) in crossings.iter().enumerate() {
            if enters {
                let exit = crossings[(i + 1) % crossings.len()].0;
                next.insert(e, exit);
            }
        }
    }
    let mut loops = Vec::new();
    let mut starts: Vec<(usize, usize)> = next.keys().copied().collect();
    starts.sort_unstable();
    let mut used = std::collections::HashSet::new();
    for s in starts {
        if used.contains(&s) {
            continue;
        }
        let mut lp = vec![s];
        used.insert(s);
        let mut e = next[&s];
        while e != s {
            lp.push(e);
            used.insert(e);
            e = next[&e];
        }
        loops.push(lp);
    }
    loops
}

pub fn extract_mesh(vol: &TsdfVolume) -> TriangleMesh {
    let [nx, ny, nz] = vol.dims;
    let mut mesh = TriangleMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let mut vertex_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut accum: Vec<Vector3<f64>> = Vec::new();
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let idx: [usize; 8] = std::array::from_fn(|c| {
                    let [dx, dy, dz] = offset(c);
                    vol.index(x + dx, y + dy, z + dz)
                });
                if idx.iter().any(|&i| vol.weight[i] <= 0.0) {
                    continue;
                }
                let f: [f64; 8] = idx.map(|i| vol.tsdf[i] as f64);
                let inside = f.map(|v| v < 0.0);
                if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                    continue;
                }
                // Cell-average gradient, pointing toward free space.
                let mut grad = Vector3::zeros();
                for c in 0..8 {
                    let o = offset(c);
                    for a in 0..3 {
                        grad[a] += if o[a] == 1 { f[c] } else { -f[c] };
                    }
                }
                for lp in cell_loops(&inside) {
                    let verts: Vec<usize> = lp
                        .iter()
                        .map(|&(lo, axis)| {
                            let hi = lo | (1 << axis);
                            let key = (idx[lo], axis);
                            *vertex_of.entry(key).or_insert_with(|| {
                                let (f0, f1) = (f[lo], f[hi]);
                                debug_assert!((f0 < 0.0) != (f1 < 0.0), "vertex on an edge without a sign change");
                                let t = f0 / (f0 - f1);
                                let o = offset(lo);
                                let mut p = vol.voxel_center(x + o[0], y + o[1], z + o[2]);
                                p[axis] += t * vol.voxel_size;
                                mesh.vertices.push([p.x, p.y, p.z]);
                                accum.push(Vector3::zeros());
                                mesh.vertices.len() - 1
                            })
                        })
                        .collect();
                    for k in 1..verts.len().saturating_sub(1) {
                        let mut tri = [verts[0], verts[k], verts[k + 1]];
                        let [a, b, c] = tri.map(|i| Vector3::from(mesh.vertices[i]));
                        let mut n = (b - a).cross(&(c - a));
                        if n.norm() <= 1e-12 * vol.voxel_size * vol.voxel_size {
                            continue;
                        }
                        if n.dot(&grad) < 0.0 {
                            tri.swap(1, 2);
                            n = -n;
                        }
                        for &i in &tri {
                            accum[i] += n;
                        }
                        mesh.triangles.push(tri);
                    }
                }
            }
        }
    }
    mesh.normals = Some(
        accum
            .into_iter()
            .map(|n| {
                let l = n.norm();
                if l > 0.0 {
                    [n.x / l, n.y / l, n.z / l]
                } else {
                    [0.0; 3]
                }
            })
            .collect(),
    );
    mesh
}
