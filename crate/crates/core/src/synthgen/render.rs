//! Ray-cast depth rendering of triangle meshes and an optional floor plane.
//! Everything lives in the camera frame (x right, y down, z forward).

use std::sync::Arc;

use crate::error::Result;
use crate::geometry::{Rotation, Vec3};
use crate::orthopatch::{DepthImage, Intrinsics};

use super::mesh::TriangleMesh;

/// Floor hits beyond this range are dropped.
pub const MAX_RANGE: f64 = 6.0;

const NEAR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Square pinhole camera with the principal point at the image centre.
    pub fn square(size: usize, focal: f64) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            intrinsics: Intrinsics {
                fx: focal,
                fy: focal,
                cx: c,
                cy: c,
            },
            width: size,
            height: size,
        }
    }

    pub fn new(width: usize, height: usize, intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            width,
            height,
        }
    }
}

/// Rigid object pose in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub rotation: Rotation,
    pub translation: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedMesh {
    pub mesh: Arc<TriangleMesh>,
    pub placement: Placement,
}

impl PlacedMesh {
    pub fn new(mesh: Arc<TriangleMesh>, rotation: Rotation, translation: Vec3) -> Self {
        Self {
            mesh,
            placement: Placement { rotation, translation },
        }
    }

    pub fn world_vertices(&self) -> Vec<Vec3> {
        let p = &self.placement;
        self.mesh
            .vertices()
            .iter()
            .map(|&v| p.rotation.apply(v) + p.translation)
            .collect()
    }
}

/// Infinite plane through `point` with the given normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Floor {
    pub point: Vec3,
    pub normal: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub objects: Vec<PlacedMesh>,
    pub floor: Option<Floor>,
}

/// Which surface produced each pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hit {
    None,
    Floor,
    Object(usize),
}

/// Moller-Trumbore intersection of the ray `t * dir` (origin at the camera
/// centre) with a triangle; double-sided.
fn intersect(dir: Vec3, v0: Vec3, e1: Vec3, e2: Vec3) -> Option<f64> {
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = 1.0 / det;
    let s = -v0;
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    (t > NEAR).then_some(t)
}

/// Depth and per-pixel surface ids. Rays pass through integer pixel
/// coordinates with unit z component, so the ray parameter is the depth.
pub fn render_labeled(scene: &Scene, camera: &Camera) -> Result<(DepthImage, Vec<Hit>)> {
    let (w, h) = (camera.width, camera.height);
    let k = camera.intrinsics;
    let ray = |u: usize, v: usize| Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut hits = vec![Hit::None; w * h];

    if let Some(floor) = &scene.floor {
        let n = floor.normal;
        let num = n.dot(floor.point);
        for v in 0..h {
            for u in 0..w {
                let den = n.dot(ray(u, v));
                if den.abs() < 1e-12 {
                    continue;
                }
                let t = num / den;
                if t > NEAR && t < MAX_RANGE {
                    depth[v * w + u] = t;
                    hits[v * w + u] = Hit::Floor;
                }
            }
        }
    }

    for (id, obj) in scene.objects.iter().enumerate() {
        let verts = obj.world_vertices();
        for tri in obj.mesh.triangles() {
            let [a, b, c] = tri.map(|i| verts[i]);
            let (e1, e2) = (b - a, c - a);
            // Pixel footprint of the triangle; triangles reaching behind the
            // camera fall back to the whole image.
            let (u0, u1, v0, v1) = if a.z > NEAR && b.z > NEAR && c.z > NEAR {
                let pts = [a, b, c].map(|p| k.project(p));
                let umin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0);
                let umax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil();
                let vmin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0);
                let vmax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil();
                if umax < 0.0 || vmax < 0.0 || umin >= w as f64 || vmin >= h as f64 {
                    continue;
                }
                (
                    umin as usize,
                    (umax as usize).min(w - 1),
                    vmin as usize,
                    (vmax as usize).min(h - 1),
                )
            } else {
                (0, w - 1, 0, h - 1)
            };
            for v in v0..=v1 {
                for u in u0..=u1 {
                    if let Some(t) = intersect(ray(u, v), a, e1, e2) {
                        let i = v * w + u;
                        if t < depth[i] {
                            depth[i] = t;
                            hits[i] = Hit::Object(id);
                        }
                    }
                }
            }
        }
    }

    for d in &mut depth {
        if !d.is_finite() {
            *d = 0.0;
        }
    }
    Ok((DepthImage::new(w, h, depth, k)?, hits))
}

pub fn render_depth(scene: &Scene, camera: &Camera) -> Result<DepthImage> {
    Ok(render_labeled(scene, camera)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(z: f64, half: f64) -> PlacedMesh {
        let m = TriangleMesh::new(
            vec![
                Vec3::new(-half, -half, 0.0),
                Vec3::new(half, -half, 0.0),
                Vec3::new(half, half, 0.0),
                Vec3::new(-half, half, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        PlacedMesh::new(Arc::new(m), Rotation::IDENTITY, Vec3::new(0.0, 0.0, z))
    }

    fn cam() -> Camera {
        Camera::square(32, 40.0)
    }

    #[test]
    fn frustum_filling_quad_has_constant_depth() {
        let scene = Scene {
            objects: vec![quad(1.0, 5.0)],
            floor: None,
        };
        let d = render_depth(&scene, &cam()).unwrap();
        assert!(d.depth().iter().all(|&z| (z - 1.0).abs() < 1e-12));
    }

    #[test]
    fn empty_scene_is_zero() {
        let d = render_depth(&Scene::default(), &cam()).unwrap();
        assert!(d.depth().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn nearer_quad_occludes() {
        let scene = Scene {
            objects: vec![quad(2.0, 5.0), quad(1.0, 0.1)],
            floor: None,
        };
        let (d, hits) = render_labeled(&scene, &cam()).unwrap();
        let c = 16 * 32 + 16;
        assert!((d.depth()[c] - 1.0).abs() < 1e-12);
        assert_eq!(hits[c], Hit::Object(1));
        assert!((d.depth()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn adding_geometry_never_increases_depth() {
        let base = Scene {
            objects: vec![quad(1.5, 0.3)],
            floor: Some(Floor {
                point: Vec3::new(0.0, 0.3, 0.0),
                normal: Vec3::new(0.0, -1.0, -0.2),
            }),
        };
        let mut more = base.clone();
        more.objects.push(quad(1.2, 0.1));
        let a = render_depth(&base, &cam()).unwrap();
        let b = render_depth(&more, &cam()).unwrap();
        for (x, y) in a.depth().iter().zip(b.depth()) {
            assert!(*y == *x || (*y > 0.0 && (*x == 0.0 || y <= x)));
        }
    }

    #[test]
    fn camera_inside_geometry_does_not_crash() {
        let cube = TriangleMesh::cuboid(1.0, 1.0, 1.0);
        let scene = Scene {
            objects: vec![PlacedMesh::new(Arc::new(cube), Rotation::IDENTITY, Vec3::ZERO)],
            floor: None,
        };
        let d = render_depth(&scene, &cam()).unwrap();
        assert!(d.depth().iter().all(|&z| z > 0.0 && z <= 0.5 + 1e-9));
    }
}
