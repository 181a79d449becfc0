//! Grid evaluation, marching cubes and triangle-mesh I/O.

mod tables;

use crate::geom::{self, Vec3};
use crate::net::SdfField;
use crate::pointcloud::{parse_ply_ascii, read_text, write_text};
use crate::{Error, Result};
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use tables::{CORNERS, EDGE_CONNECTION, TRIANGLE_CONNECTION};

/// Triangles at or below this area are not emitted.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            min: [-0.55; 3],
            max: [0.55; 3],
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|k| self.min[k] < self.max[k]) && geom::is_finite(self.min) && geom::is_finite(self.max) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("empty grid bounds {:?} .. {:?}", self.min, self.max)))
        }
    }
}

/// Field samples on the nodes of a regular lattice with `resolution` cells
/// per axis. Node `(i, j, k)` is stored at `i + n (j + n k)` with
/// `n = resolution + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub resolution: usize,
    pub bounds: Bounds,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn nodes_per_axis(&self) -> usize {
        self.resolution + 1
    }

    pub fn cell_size(&self) -> Vec3 {
        let r = self.resolution as f64;
        [
            (self.bounds.max[0] - self.bounds.min[0]) / r,
            (self.bounds.max[1] - self.bounds.min[1]) / r,
            (self.bounds.max[2] - self.bounds.min[2]) / r,
        ]
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let r = self.resolution as f64;
        let (lo, hi) = (self.bounds.min, self.bounds.max);
        let t = |n: usize, a: usize| lo[a] + (hi[a] - lo[a]) * (n as f64 / r);
        [t(i, 0), t(j, 1), t(k, 2)]
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.nodes_per_axis();
        i + n * (j + n * k)
    }

    /// Grid filled from a closure over node positions.
    pub fn from_fn(resolution: usize, bounds: Bounds, f: impl Fn(Vec3) -> f64 + Sync) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(format!("grid resolution must be >= 2, got {resolution}")));
        }
        bounds.validate()?;
        let mut grid = ScalarGrid {
            resolution,
            bounds,
            values: Vec::new(),
        };
        let n = resolution + 1;
        let g = &grid;
        let values: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|k| {
                (0..n).flat_map(move |j| (0..n).map(move |i| (i, j, k)))
                    .map(|(i, j, k)| f(g.node_position(i, j, k)))
                    .collect::<Vec<_>>()
            })
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("field is not finite at grid node {pos}")));
        }
        grid.values = values;
        Ok(grid)
    }
}

/// The field value at every lattice node, one z-slab per task.
pub fn evaluate_grid<F: SdfField + Sync + ?Sized>(field: &F, resolution: usize, bounds: Bounds) -> Result<ScalarGrid> {
    ScalarGrid::from_fn(resolution, bounds, |p| field.value(p))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::InvalidArgument(format!(
                "triangle {t:?} references a vertex beyond {}",
                vertices.len()
            )));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_vertices(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    fn triangle_cross(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle_vertices(t);
        geom::cross(geom::sub(b, a), geom::sub(c, a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * geom::norm(self.triangle_cross(t))
    }

    /// Unit normal by the right-hand rule; `None` for a degenerate triangle.
    pub fn triangle_normal(&self, t: usize) -> Option<Vec3> {
        geom::normalized(self.triangle_cross(t))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Number of triangles using each undirected edge.
    pub fn edge_degrees(&self) -> HashMap<(usize, usize), usize> {
        let mut deg = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *deg.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        deg
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_degrees().values().all(|&d| d == 2)
    }
}

/// Zero-crossing vertex on a lattice edge, keyed by `3 · node + axis` of the
/// edge's lower end so neighbouring cells share it.
fn edge_key(grid: &ScalarGrid, cell: [usize; 3], edge: usize) -> (usize, [usize; 3], [usize; 3]) {
    let [c0, c1] = EDGE_CONNECTION[edge];
    let a = CORNERS[c0];
    let b = CORNERS[c1];
    let na = [cell[0] + a[0], cell[1] + a[1], cell[2] + a[2]];
    let nb = [cell[0] + b[0], cell[1] + b[1], cell[2] + b[2]];
    let lo = if na <= nb { na } else { nb };
    let axis = (0..3).find(|&k| na[k] != nb[k]).expect("cell edge spans one axis");
    (3 * grid.index(lo[0], lo[1], lo[2]) + axis, na, nb)
}

/// Marching cubes over every cell in lexicographic (z, y, x) order.
///
/// Vertices are interpolated linearly along sign-changing edges and shared
/// between cells through their edge key. Triangles are wound so their
/// right-hand normals point toward increasing field values. A grid without
/// any crossing yields an empty mesh and a warning.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriangleMesh {
    let r = grid.resolution;
    let mut mesh = TriangleMesh::default();
    let mut vertex_of: HashMap<usize, usize> = HashMap::new();
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let cell = [i, j, k];
                let mut vals = [0.0; 8];
                let mut cube = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    vals[c] = grid.values[grid.index(i + off[0], j + off[1], k + off[2])];
                    if vals[c] < iso {
                        cube |= 1 << c;
                    }
                }
                if cube == 0 || cube == 255 {
                    continue;
                }
                let row = &TRIANGLE_CONNECTION[cube];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut idx = [0usize; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let e = e as usize;
                        let (key, na, nb) = edge_key(grid, cell, e);
                        idx[slot] = *vertex_of.entry(key).or_insert_with(|| {
                            let [c0, c1] = EDGE_CONNECTION[e];
                            let (va, vb) = (vals[c0], vals[c1]);
                            let t = (iso - va) / (vb - va);
                            let pa = grid.node_position(na[0], na[1], na[2]);
                            let pb = grid.node_position(nb[0], nb[1], nb[2]);
                            mesh.vertices.push(geom::add(pa, geom::scale(geom::sub(pb, pa), t)));
                            mesh.vertices.len() - 1
                        });
                    }
                    // table winding faces toward decreasing values; reverse it
                    let t = [idx[0], idx[2], idx[1]];
                    let [a, b, c] = [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]];
                    let area = 0.5 * geom::norm(geom::cross(geom::sub(b, a), geom::sub(c, a)));
                    if area > MIN_TRIANGLE_AREA {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        log::warn!("marching cubes found no iso-crossing; mesh is empty");
    }
    mesh
}

pub fn save_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(64 * mesh.vertices.len() + 32 * mesh.triangles.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    write_text(path.as_ref(), &out)
}

pub fn save_ply(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(64 * mesh.vertices.len() + 32 * mesh.triangles.len() + 256);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", mesh.vertices.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(out, "element face {}", mesh.triangles.len());
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    write_text(path.as_ref(), &out)
}

/// Fan-triangulates polygons.
fn triangulate(path: &Path, faces: &[Vec<usize>], n_vertices: usize) -> Result<Vec<[usize; 3]>> {
    let mut tris = Vec::with_capacity(faces.len());
    for f in faces {
        if f.len() < 3 {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("face with {} vertices", f.len()),
            });
        }
        if let Some(i) = f.iter().find(|&&i| i >= n_vertices) {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("face index {i} out of range ({n_vertices} vertices)"),
            });
        }
        for w in 1..f.len() - 1 {
            tris.push([f[0], f[w], f[w + 1]]);
        }
    }
    Ok(tris)
}

/// ASCII OBJ: `v` and `f` records (1-based, `i/t/n` forms and negative
/// indices accepted); every other record is ignored.
pub fn load_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line: ln + 1,
            msg,
        };
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
                    .collect::<Option<_>>()
                    .ok_or_else(|| parse_err("bad vertex coordinate".into()))?;
                if c.len() != 3 {
                    return Err(parse_err("vertex needs three coordinates".into()));
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let mut face = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| parse_err(format!("bad face index {tok:?}")))?;
                    let idx = match i {
                        0 => return Err(parse_err("face index 0 (OBJ is 1-based)".into())),
                        i if i > 0 => (i - 1) as usize,
                        i => {
                            let back = (-i) as usize;
                            if back > vertices.len() {
                                return Err(parse_err(format!("relative index {i} before first vertex")));
                            }
                            vertices.len() - back
                        }
                    };
                    face.push(idx);
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    let triangles = triangulate(path, &faces, vertices.len())?;
    TriangleMesh::new(vertices, triangles)
}

pub fn load_ply_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let data = parse_ply_ascii(path, &read_text(path)?)?;
    let triangles = triangulate(path, &data.faces, data.vertices.len())?;
    TriangleMesh::new(data.vertices, triangles)
}

/// Loads `.obj` or `.ply` by extension.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => load_obj(path),
        Some("ply") => load_ply_mesh(path),
        _ => Err(Error::InvalidArgument(format!(
            "{}: unknown mesh extension (expected .obj or .ply)",
            path.display()
        ))),
    }
}

/// Saves `.obj` or `.ply` by extension.
pub fn save_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => save_obj(mesh, path),
        Some("ply") => save_ply(mesh, path),
        _ => Err(Error::InvalidArgument(format!(
            "{}: unknown mesh extension (expected .obj or .ply)",
            path.display()
        ))),
    }
}


#[cfg(test)]
mod tests;
