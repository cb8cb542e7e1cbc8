//! Triangle meshes with per-corner texture coordinates.
//!
//! Meshes are read from a small Wavefront OBJ subset: `v`, `vt` and `f`
//! records using `v/vt` corner indexing. Comment lines and blank lines are
//! skipped; any other record is a format error.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One triangle: vertex indices and matching texture-coordinate indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub vertices: [usize; 3],
    pub uvs: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub uv_coords: Vec<[f64; 2]>,
    pub faces: Vec<Face>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, uv_coords: Vec<[f64; 2]>, faces: Vec<Face>) -> Result<Self> {
        let mesh = Self {
            vertices,
            uv_coords,
            faces,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::Format("mesh has no faces".into()));
        }
        for (k, face) in self.faces.iter().enumerate() {
            for &v in &face.vertices {
                if v >= self.vertices.len() {
                    return Err(Error::Format(format!("face {k}: vertex index {v} out of range")));
                }
            }
            for &t in &face.uvs {
                if t >= self.uv_coords.len() {
                    return Err(Error::Format(format!("face {k}: uv index {t} out of range")));
                }
            }
        }
        for (k, uv) in self.uv_coords.iter().enumerate() {
            if !uv.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::Format(format!("uv {k} = {uv:?} outside [0,1]^2")));
            }
        }
        if !self.vertices.iter().flatten().all(|c| c.is_finite()) {
            return Err(Error::Format("non-finite vertex coordinate".into()));
        }
        Ok(())
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    pub fn center(&self) -> [f64; 3] {
        let (lo, hi) = self.bounds();
        [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0]
    }

    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut uv_coords = Vec::new();
        let mut faces = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap_or_default();
            let rest: Vec<&str> = parts.collect();
            let bad = |msg: &str| Error::Format(format!("line {}: {msg}: `{line}`", lineno + 1));
            match tag {
                "v" => {
                    if rest.len() != 3 {
                        return Err(bad("`v` needs three coordinates"));
                    }
                    let mut p = [0.0; 3];
                    for (slot, s) in p.iter_mut().zip(&rest) {
                        *slot = s.parse().map_err(|_| bad("bad number"))?;
                    }
                    vertices.push(p);
                }
                "vt" => {
                    if rest.len() != 2 {
                        return Err(bad("`vt` needs two coordinates"));
                    }
                    let u: f64 = rest[0].parse().map_err(|_| bad("bad number"))?;
                    let v: f64 = rest[1].parse().map_err(|_| bad("bad number"))?;
                    uv_coords.push([u, v]);
                }
                "f" => {
                    if rest.len() < 3 {
                        return Err(bad("`f` needs at least three corners"));
                    }
                    let mut corners = Vec::with_capacity(rest.len());
                    for c in &rest {
                        let (v, t) = c.split_once('/').ok_or_else(|| bad("corner must be v/vt"))?;
                        if t.contains('/') {
                            return Err(bad("only v/vt corners are supported"));
                        }
                        let v: usize = v.parse().map_err(|_| bad("bad vertex index"))?;
                        let t: usize = t.parse().map_err(|_| bad("bad uv index"))?;
                        if v == 0 || t == 0 {
                            return Err(bad("OBJ indices are 1-based"));
                        }
                        corners.push((v - 1, t - 1));
                    }
                    // fan triangulation for quads and larger convex polygons
                    for k in 1..corners.len() - 1 {
                        let (a, b, c) = (corners[0], corners[k], corners[k + 1]);
                        faces.push(Face {
                            vertices: [a.0, b.0, c.0],
                            uvs: [a.1, b.1, c.1],
                        });
                    }
                }
                other => return Err(bad(&format!("unsupported record `{other}`"))),
            }
        }
        Mesh::new(vertices, uv_coords, faces)
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&text)
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.uv_coords {
            let _ = writeln!(out, "vt {} {}", t[0], t[1]);
        }
        for f in &self.faces {
            let _ = writeln!(
                out,
                "f {}/{} {}/{} {}/{}",
                f.vertices[0] + 1,
                f.uvs[0] + 1,
                f.vertices[1] + 1,
                f.uvs[1] + 1,
                f.vertices[2] + 1,
                f.uvs[2] + 1
            );
        }
        out
    }

    /// Axis-aligned unit cube centred on the origin, one atlas cell per side.
    pub fn unit_cube() -> Self {
        let lo = [-0.5, -0.5, -0.5];
        let hi = [0.5, 0.5, 0.5];
        let mut b = AtlasBuilder::new(3, 2);
        b.prism(box_ring(lo[0], hi[0], lo[2], hi[2], lo[1]), box_ring(lo[0], hi[0], lo[2], hi[2], hi[1]), true);
        b.finish()
    }

    /// Low-poly car: a body block with a tapered cabin on top. Units are
    /// meters, y is up, the nose points along +z and the wheels rest on y = 0.
    pub fn toy_car() -> Self {
        let mut b = AtlasBuilder::new(4, 3);
        b.prism(
            box_ring(-0.9, 0.9, -2.2, 2.2, 0.25),
            box_ring(-0.9, 0.9, -2.2, 2.2, 1.0),
            true,
        );
        b.prism(
            box_ring(-0.85, 0.85, -1.3, 0.9, 1.0),
            box_ring(-0.7, 0.7, -1.0, 0.3, 1.5),
            false,
        );
        b.finish()
    }
}

/// Four corners of a horizontal rectangle, counter-clockwise seen from above.
fn box_ring(x0: f64, x1: f64, z0: f64, z1: f64, y: f64) -> [[f64; 3]; 4] {
    [[x0, y, z0], [x1, y, z0], [x1, y, z1], [x0, y, z1]]
}

/// Lays out quads one per cell of a `cols x rows` texture atlas.
struct AtlasBuilder {
    cols: usize,
    rows: usize,
    next_cell: usize,
    vertices: Vec<[f64; 3]>,
    uv_coords: Vec<[f64; 2]>,
    faces: Vec<Face>,
}

impl AtlasBuilder {
    fn new(cols: usize, rows: usize) -> Self {
        Self {
            cols,
            rows,
            next_cell: 0,
            vertices: Vec::new(),
            uv_coords: Vec::new(),
            faces: Vec::new(),
        }
    }

    fn quad(&mut self, corners: [[f64; 3]; 4]) {
        let cell = self.next_cell;
        self.next_cell += 1;
        assert!(cell < self.cols * self.rows, "atlas is full");
        let (cx, cy) = (cell % self.cols, cell / self.cols);
        let pad = 0.01;
        let u0 = (cx as f64 + pad) / self.cols as f64;
        let u1 = (cx as f64 + 1.0 - pad) / self.cols as f64;
        let v0 = (cy as f64 + pad) / self.rows as f64;
        let v1 = (cy as f64 + 1.0 - pad) / self.rows as f64;

        let vbase = self.vertices.len();
        let tbase = self.uv_coords.len();
        self.vertices.extend_from_slice(&corners);
        self.uv_coords.extend_from_slice(&[[u0, v0], [u1, v0], [u1, v1], [u0, v1]]);
        for tri in [[0, 1, 2], [0, 2, 3]] {
            self.faces.push(Face {
                vertices: tri.map(|k| vbase + k),
                uvs: tri.map(|k| tbase + k),
            });
        }
    }

    /// Closed prism between a bottom ring and a top ring.
    fn prism(&mut self, bottom: [[f64; 3]; 4], top: [[f64; 3]; 4], with_bottom: bool) {
        self.quad([top[0], top[1], top[2], top[3]]);
        if with_bottom {
            self.quad([bottom[3], bottom[2], bottom[1], bottom[0]]);
        }
        for k in 0..4 {
            let n = (k + 1) % 4;
            self.quad([bottom[k], bottom[n], top[n], top[k]]);
        }
    }

    fn finish(self) -> Mesh {
        Mesh::new(self.vertices, self.uv_coords, self.faces).expect("built-in mesh is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_meshes_are_valid() {
        let car = Mesh::toy_car();
        assert_eq!(car.faces.len(), 22);
        car.validate().unwrap();
        let cube = Mesh::unit_cube();
        assert_eq!(cube.faces.len(), 12);
        assert_eq!(cube.center(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn obj_round_trip() {
        let car = Mesh::toy_car();
        let back = Mesh::parse_obj(&car.to_obj()).unwrap();
        assert_eq!(back, car);
    }

    #[test]
    fn quads_are_fan_triangulated() {
        let obj = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1/1 2/2 3/3 4/4\n";
        let m = Mesh::parse_obj(obj).unwrap();
        assert_eq!(m.faces.len(), 2);
        assert_eq!(m.faces[1].vertices, [0, 2, 3]);
    }

    #[test]
    fn rejects_unsupported_records() {
        let obj = "v 0 0 0\nvn 0 0 1\n";
        assert!(matches!(Mesh::parse_obj(obj), Err(Error::Format(_))));
        let obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1/1 2/1/1 3/1/1\n";
        assert!(matches!(Mesh::parse_obj(obj), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_out_of_range_indices_and_uvs() {
        let obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 4/1\n";
        assert!(matches!(Mesh::parse_obj(obj), Err(Error::Format(_))));
        let obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 1.5\nf 1/1 2/1 3/1\n";
        assert!(matches!(Mesh::parse_obj(obj), Err(Error::Format(_))));
    }
}
