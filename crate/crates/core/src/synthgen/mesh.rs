//! Triangle meshes: OBJ subset I/O and the built-in parametric objects.

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Rotation, Vec3};

/// Triangles with area below this (square meters) are dropped on load.
const MIN_AREA: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    /// Validates indices and drops degenerate triangles.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::format(
                "mesh",
                format!("triangle {:?} indexes past {} vertices", t, vertices.len()),
            ));
        }
        let triangles: Vec<[usize; 3]> = triangles
            .into_iter()
            .filter(|t| {
                let [a, b, c] = t.map(|i| vertices[i]);
                (b - a).cross(c - a).norm() * 0.5 > MIN_AREA
            })
            .collect();
        if triangles.is_empty() {
            return Err(Error::format("mesh", "no non-degenerate triangles"));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        self.triangles[i].map(|j| self.vertices[j])
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for &v in &self.vertices {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Axis-aligned extents `(x, y, z)`.
    pub fn extents(&self) -> Vec3 {
        let (lo, hi) = self.bounds();
        hi - lo
    }

    /// Copy translated so the bounding-box centre sits at the origin.
    pub fn recentered(&self) -> Self {
        let (lo, hi) = self.bounds();
        let c = (lo + hi) * 0.5;
        Self {
            vertices: self.vertices.iter().map(|&v| v - c).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn transformed(&self, rotation: &Rotation, translation: Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| rotation.apply(v) + translation).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn merge(parts: &[TriangleMesh]) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for p in parts {
            let base = vertices.len();
            vertices.extend_from_slice(&p.vertices);
            triangles.extend(p.triangles.iter().map(|t| t.map(|i| i + base)));
        }
        Self::new(vertices, triangles)
    }

    /// Parses `v x y z` and `f a b c` lines (1-based, triangles only).
    /// Other directives are ignored; `f` entries may carry `/vt/vn` suffixes.
    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |d: &str| Error::format("OBJ", format!("line {}: {}", lineno + 1, d));
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let c: Vec<f64> = parts
                        .take(3)
                        .map(|s| s.parse::<f64>().map_err(|_| bad("bad coordinate")))
                        .collect::<Result<_>>()?;
                    if c.len() != 3 || c.iter().any(|x| !x.is_finite()) {
                        return Err(bad("vertex needs three finite coordinates"));
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = parts
                        .map(|s| {
                            let head = s.split('/').next().unwrap_or("");
                            match head.parse::<usize>() {
                                Ok(i) if i >= 1 => Ok(i - 1),
                                _ => Err(bad("face indices are 1-based integers")),
                            }
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(bad("only triangular faces are supported"));
                    }
                    triangles.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&text)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        s
    }

    /// Axis-aligned box of the given extents centred at the origin.
    pub fn cuboid(w: f64, h: f64, d: f64) -> Self {
        Self::cuboid_at(Vec3::ZERO, Vec3::new(w, h, d))
    }

    fn cuboid_at(c: Vec3, size: Vec3) -> Self {
        let hs = size * 0.5;
        let vertices = (0..8)
            .map(|i| {
                let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
                let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
                let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
                c + Vec3::new(sx * hs.x, sy * hs.y, sz * hs.z)
            })
            .collect();
        let quads = [
            [0, 2, 6, 4],
            [1, 5, 7, 3],
            [0, 4, 5, 1],
            [2, 3, 7, 6],
            [0, 1, 3, 2],
            [4, 6, 7, 5],
        ];
        let triangles = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        Self { vertices, triangles }
    }

    /// Frustum of a cone along the y axis (a cylinder when both radii match).
    pub fn frustum(r_top: f64, r_bottom: f64, h: f64, segments: usize) -> Self {
        let segments = segments.max(3);
        let mut vertices = Vec::with_capacity(2 * segments + 2);
        for i in 0..segments {
            let a = TAU * i as f64 / segments as f64;
            let (s, c) = a.sin_cos();
            vertices.push(Vec3::new(r_top * c, -h / 2.0, r_top * s));
            vertices.push(Vec3::new(r_bottom * c, h / 2.0, r_bottom * s));
        }
        let top = vertices.len();
        vertices.push(Vec3::new(0.0, -h / 2.0, 0.0));
        vertices.push(Vec3::new(0.0, h / 2.0, 0.0));
        let mut triangles = Vec::new();
        for i in 0..segments {
            let j = (i + 1) % segments;
            let (t0, b0, t1, b1) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
            triangles.push([t0, b0, b1]);
            triangles.push([t0, b1, t1]);
            triangles.push([top, t1, t0]);
            triangles.push([top + 1, b0, b1]);
        }
        Self::new(vertices, triangles).expect("frustum with positive extents").recentered()
    }
}

/// Built-in parametric objects, sized for a desk-scale scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectKind {
    Box,
    Cylinder,
    LBracket,
    SteppedBlock,
    Cone,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 5] = [
        ObjectKind::Box,
        ObjectKind::Cylinder,
        ObjectKind::LBracket,
        ObjectKind::SteppedBlock,
        ObjectKind::Cone,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectKind::Box => "box",
            ObjectKind::Cylinder => "cylinder",
            ObjectKind::LBracket => "l-bracket",
            ObjectKind::SteppedBlock => "stepped-block",
            ObjectKind::Cone => "cone",
        }
    }

    /// Mesh centred on its bounding box; y is the object's vertical axis
    /// (pointing down, like the camera frame).
    pub fn mesh(&self) -> TriangleMesh {
        let parts = match self {
            ObjectKind::Box => vec![TriangleMesh::cuboid(0.20, 0.12, 0.10)],
            ObjectKind::Cylinder => vec![TriangleMesh::frustum(0.05, 0.05, 0.16, 32)],
            ObjectKind::Cone => vec![TriangleMesh::frustum(0.015, 0.07, 0.14, 32)],
            ObjectKind::LBracket => vec![
                TriangleMesh::cuboid_at(Vec3::new(0.0, 0.05, 0.0), Vec3::new(0.18, 0.02, 0.10)),
                TriangleMesh::cuboid_at(Vec3::new(-0.08, -0.01, 0.0), Vec3::new(0.02, 0.14, 0.10)),
            ],
            // Same footprint as the box with one corner stepped down.
            ObjectKind::SteppedBlock => vec![
                TriangleMesh::cuboid_at(Vec3::new(0.0, 0.02, 0.0), Vec3::new(0.20, 0.08, 0.10)),
                TriangleMesh::cuboid_at(Vec3::new(-0.04, -0.04, 0.0), Vec3::new(0.12, 0.04, 0.10)),
            ],
        };
        TriangleMesh::merge(&parts).expect("built-in meshes are valid").recentered()
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ObjectKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ObjectKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown object {:?}; expected one of {}", s, names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obj_roundtrip() {
        let m = ObjectKind::SteppedBlock.mesh();
        let back = TriangleMesh::parse_obj(&m.to_obj()).unwrap();
        assert_eq!(back.triangles(), m.triangles());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn obj_rejects_bad_input() {
        assert!(TriangleMesh::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n").is_err());
        assert!(TriangleMesh::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n").is_err());
        assert!(TriangleMesh::parse_obj("v 0 0 0\nf 0 1 1\n").is_err());
    }

    #[test]
    fn degenerate_triangles_are_dropped() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n";
        let m = TriangleMesh::parse_obj(text).unwrap();
        assert_eq!(m.triangles().len(), 1);
        assert!(TriangleMesh::parse_obj("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn builtins_are_centred_and_sized() {
        for kind in ObjectKind::ALL {
            let m = kind.mesh();
            let (lo, hi) = m.bounds();
            assert!(((lo + hi) * 0.5).norm() < 1e-12, "{}", kind);
            let e = m.extents();
            assert!(e.x.max(e.y).max(e.z) < 0.25, "{}", kind);
            assert_eq!(kind.name().parse::<ObjectKind>().unwrap(), kind);
        }
        let e = ObjectKind::SteppedBlock.mesh().extents();
        let b = ObjectKind::Box.mesh().extents();
        assert!((e - b).norm() < 1e-12);
    }
}
