use super::{Aabb, Vec3};
use crate::{Error, Result};
use std::fmt::Write as _;

const MIN_AREA: f64 = 1e-12;

/// Indexed triangle mesh. Indices are validated and degenerate triangles
/// rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if let Some(v) = vertices.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite vertex {v:?}")));
        }
        for (i, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&k| k as usize >= vertices.len()) {
                return Err(Error::Data(format!(
                    "triangle {i} references a vertex out of range ({} vertices)",
                    vertices.len()
                )));
            }
            let [a, b, c] = tri.map(|k| vertices[k as usize]);
            if 0.5 * (b - a).cross(c - a).length() <= MIN_AREA {
                return Err(Error::Data(format!("triangle {i} is degenerate")));
            }
        }
        Ok(Self { vertices, triangles })
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            triangles: Vec::new(),
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    #[inline]
    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        self.triangles[i].map(|k| self.vertices[k as usize])
    }

    pub fn triangle_bounds(&self, i: usize) -> Aabb {
        Aabb::from_points(&self.triangle(i))
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    /// Unit normal following the counter-clockwise winding.
    pub fn normal(&self, i: usize) -> Vec3 {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(c - a).normalize()
    }

    /// Appends another mesh, offsetting its indices.
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|k| k + base)));
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Result<Self> {
        Self::new(self.vertices.iter().map(|&v| f(v)).collect(), self.triangles.clone())
    }

    /// Parses the Wavefront OBJ subset: `v x y z` and triangular `f i j k`
    /// lines with 1-based indices (`i/t/n` forms accepted, extra data ignored).
    /// All other line types are skipped.
    pub fn from_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let coords: Vec<f64> = parts
                        .take(3)
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Data(format!("obj line {}: {e}", lineno + 1)))?;
                    if coords.len() != 3 {
                        return Err(Error::Data(format!("obj line {}: vertex needs 3 coordinates", lineno + 1)));
                    }
                    vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<&str> = parts.collect();
                    if idx.len() != 3 {
                        return Err(Error::Data(format!(
                            "obj line {}: only triangular faces are supported",
                            lineno + 1
                        )));
                    }
                    let mut tri = [0u32; 3];
                    for (slot, tok) in tri.iter_mut().zip(idx) {
                        let head = tok.split('/').next().unwrap_or_default();
                        let i: u32 = head
                            .parse()
                            .map_err(|e| Error::Data(format!("obj line {}: bad index {tok:?}: {e}", lineno + 1)))?;
                        if i == 0 {
                            return Err(Error::Data(format!("obj line {}: indices are 1-based", lineno + 1)));
                        }
                        *slot = i - 1;
                    }
                    triangles.push(tri);
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }

    /// Serializes to OBJ. Coordinates use the shortest round-trip float form.
    pub fn to_obj(&self) -> String {
        let mut out = String::with_capacity(32 * (self.vertices.len() + self.triangles.len()));
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_indices_and_degenerate_triangles() {
        let v = vec![Vec3::ZERO, Vec3::X, Vec3::Y];
        assert!(TriangleMesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriangleMesh::new(v.clone(), vec![[0, 1, 1]]).is_err());
        assert!(TriangleMesh::new(v, vec![[0, 1, 2]]).is_ok());
    }

    #[test]
    fn obj_subset_parsing() {
        let text = "# comment\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nvt 0 0\nf 1/1/1 2//1 3\ng group\n";
        let mesh = TriangleMesh::from_obj(text).unwrap();
        assert_eq!(mesh.len(), 1);
        assert_eq!(mesh.vertices().len(), 3);
        assert_eq!(mesh.triangles()[0], [0, 1, 2]);
        assert!(TriangleMesh::from_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n").is_err());
        assert!(TriangleMesh::from_obj("v 0 0 0\nf 0 1 2\n").is_err());
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let mesh = TriangleMesh::new(
            vec![Vec3::new(0.1, -0.7, 1.0 / 3.0), Vec3::new(0.9, 0.2, 0.0), Vec3::new(-0.3, 0.8, 0.5)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert_eq!(TriangleMesh::from_obj(&mesh.to_obj()).unwrap(), mesh);
    }
}
