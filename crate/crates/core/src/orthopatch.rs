//! Calibrated depth images to fixed-scale orthographic surface-normal patches.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tensor::Tensor;

/// Default patch scale: 5 mm per cell, so 128 cells span 0.64 m.
pub const DEFAULT_SCALE: f64 = 0.005;
pub const DEFAULT_PATCH: usize = 128;

/// Neighbours whose depth differs from the centre pixel by more than this
/// fraction of its depth are treated as a different surface.
const MAX_RELATIVE_JUMP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Config(format!("invalid intrinsics fx={} fy={}", fx, fy)));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }
}

/// Range image in meters; 0 marks missing depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    intrinsics: Intrinsics,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, intrinsics: Intrinsics) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Config(format!("depth image {}x{} is too small", width, height)));
        }
        if depth.len() != width * height {
            return Err(Error::shape(
                "depth image",
                "payload",
                format!("{} values for {}x{}", depth.len(), width, height),
            ));
        }
        if let Some(d) = depth.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(Error::Config(format!("invalid depth value {}", d)));
        }
        Ok(Self {
            width,
            height,
            depth,
            intrinsics,
        })
    }

    pub fn zeros(width: usize, height: usize, intrinsics: Intrinsics) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height], intrinsics)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// DPT1 payload: ASCII header then little-endian u16 millimetres.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("DPT1 {} {}\n", self.width, self.height).into_bytes();
        for &d in &self.depth {
            let mm = (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16;
            out.extend_from_slice(&mm.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], intrinsics: Intrinsics) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("depth image", "missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format("depth image", "header is not text"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "DPT1" {
            return Err(Error::format("depth image", format!("bad header {:?}", header)));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::format("depth image", format!("bad extent {:?}", s)));
        let (w, h) = (dim(parts[1])?, dim(parts[2])?);
        let payload = &bytes[nl + 1..];
        if payload.len() != 2 * w * h {
            return Err(Error::format(
                "depth image",
                format!("payload is {} bytes, expected {}", payload.len(), 2 * w * h),
            ));
        }
        let depth = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64 / 1000.0)
            .collect();
        Self::new(w, h, depth, intrinsics)
    }

    /// Writes `path` and an intrinsics sidecar `path.intrinsics`.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))?;
        let side = sidecar(path);
        let k = &self.intrinsics;
        fs::write(&side, format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy)).map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let k: Vec<f64> = text
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::format("intrinsics", s.to_string())))
            .collect::<Result<_>>()?;
        if k.len() != 4 {
            return Err(Error::format("intrinsics", "expected fx fy cx cy"));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, Intrinsics::new(k[0], k[1], k[2], k[3])?)
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".intrinsics");
    s.into()
}

/// Back-projected points on the image grid; `None` where depth is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Option<Vec3>>,
}

impl PointCloud {
    pub fn at(&self, u: usize, v: usize) -> Option<Vec3> {
        self.points[v * self.width + u]
    }

    pub fn valid(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.points.iter().flatten().copied()
    }

    pub fn valid_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_count() == 0
    }
}

pub fn backproject(d: &DepthImage) -> PointCloud {
    let k = d.intrinsics;
    let points = (0..d.height)
        .flat_map(|v| (0..d.width).map(move |u| (u, v)))
        .map(|(u, v)| {
            let z = d.at(u, v);
            (z > 0.0).then(|| k.unproject(u as f64, v as f64, z))
        })
        .collect();
    PointCloud {
        width: d.width,
        height: d.height,
        points,
    }
}

/// Camera-frame unit normals facing the camera (`n_z <= 0`).
///
/// Tangents are central differences, falling back to one-sided ones at
/// silhouettes so the rim keeps its normals at any distance. `None` where a
/// row or column has no usable neighbour on either side (missing or across
/// a depth jump).
pub fn estimate_normals(cloud: &PointCloud) -> Vec<Option<Vec3>> {
    let (w, h) = (cloud.width, cloud.height);
    let mut out = vec![None; w * h];
    for v in 0..h {
        for u in 0..w {
            let Some(c) = cloud.at(u, v) else { continue };
            let near = |du: isize, dv: isize| {
                let (x, y) = (u as isize + du, v as isize + dv);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    return None;
                }
                cloud
                    .at(x as usize, y as usize)
                    .filter(|p| (p.z - c.z).abs() <= MAX_RELATIVE_JUMP * c.z)
            };
            let tangent = |a: Option<Vec3>, b: Option<Vec3>| match (a, b) {
                (Some(a), Some(b)) => Some(b - a),
                (None, Some(b)) => Some(b - c),
                (Some(a), None) => Some(c - a),
                (None, None) => None,
            };
            let (Some(tu), Some(tv)) = (tangent(near(-1, 0), near(1, 0)), tangent(near(0, -1), near(0, 1))) else {
                continue;
            };
            out[v * w + u] = tu.cross(tv).normalized().map(|n| if n.z > 0.0 { -n } else { n });
        }
    }
    out
}

/// Maps a camera-facing normal to three channels in [0,1].
///
/// Components are taken in a viewer frame (x right, y up, z towards the
/// camera) so a surface facing the camera maps to `(0.5, 0.5, 1.0)` and no
/// valid normal can produce an all-zero cell.
pub fn normal_channels(n: Vec3) -> [f64; 3] {
    [
        ((n.x + 1.0) / 2.0).clamp(0.0, 1.0),
        ((1.0 - n.y) / 2.0).clamp(0.0, 1.0),
        ((1.0 - n.z) / 2.0).clamp(0.0, 1.0),
    ]
}

/// Inverse of [`normal_channels`].
pub fn channels_to_normal(c: [f64; 3]) -> Vec3 {
    Vec3::new(2.0 * c[0] - 1.0, 1.0 - 2.0 * c[1], 1.0 - 2.0 * c[2])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    /// Unit camera-frame normal.
    pub normal: Vec3,
}

/// Points that carry a valid normal.
pub fn surface_points(cloud: &PointCloud, normals: &[Option<Vec3>]) -> Vec<SurfacePoint> {
    cloud
        .points
        .iter()
        .zip(normals)
        .filter_map(|(p, n)| Some(SurfacePoint {
            position: (*p)?,
            normal: (*n)?,
        }))
        .collect()
}

/// Orthographic surface-normal patch at fixed metric scale.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoPatch {
    pub normals: Tensor<f32>,
    /// Meters per cell.
    pub scale: f64,
    /// Camera-frame position of the centre of cell (0,0); z is the patch
    /// centre depth.
    pub origin: Vec3,
}

impl OrthoPatch {
    pub fn height(&self) -> usize {
        self.normals.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.normals.shape()[2]
    }

    /// Cells with any nonzero channel.
    pub fn foreground_mask(&self) -> Vec<bool> {
        let n = self.height() * self.width();
        let d = self.normals.data();
        (0..n).map(|i| d[i] != 0.0 || d[n + i] != 0.0 || d[2 * n + i] != 0.0).collect()
    }

    /// Position of the centre of cell `(row, col)`.
    pub fn cell_position(&self, row: f64, col: f64) -> Vec3 {
        Vec3::new(
            self.origin.x + col * self.scale,
            self.origin.y + row * self.scale,
            self.origin.z,
        )
    }

    /// `size x size` sub-patch with top-left cell `(row, col)`.
    pub fn window(&self, row: usize, col: usize, size: usize) -> Result<OrthoPatch> {
        let (h, w) = (self.height(), self.width());
        if row + size > h || col + size > w {
            return Err(Error::shape(
                "window",
                "extent",
                format!("{}x{} at ({},{}) exceeds {}x{}", size, size, row, col, h, w),
            ));
        }
        let src = self.normals.data();
        let mut data = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            for r in row..row + size {
                let start = c * h * w + r * w + col;
                data.extend_from_slice(&src[start..start + size]);
            }
        }
        Ok(OrthoPatch {
            normals: Tensor::new(vec![3, size, size], data)?,
            scale: self.scale,
            origin: self.cell_position(row as f64, col as f64),
        })
    }
}

/// Bins points on an axis-aligned grid in the image plane (projection along
/// the optical axis). The point nearest the camera wins each cell.
pub fn orthoproject(points: &[SurfacePoint], scale: f64, size: (usize, usize), center: Vec3) -> Result<OrthoPatch> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("patch scale must be positive, got {}", scale)));
    }
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::Config("patch extents must be positive".into()));
    }
    let mut zbuf = vec![f64::INFINITY; h * w];
    let mut winner: Vec<Option<Vec3>> = vec![None; h * w];
    for p in points {
        let col = ((p.position.x - center.x) / scale + w as f64 / 2.0).floor();
        let row = ((p.position.y - center.y) / scale + h as f64 / 2.0).floor();
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            continue;
        }
        let i = row as usize * w + col as usize;
        if p.position.z < zbuf[i] {
            zbuf[i] = p.position.z;
            winner[i] = Some(p.normal);
        }
    }
    let mut data = vec![0f32; 3 * h * w];
    for (i, n) in winner.iter().enumerate() {
        if let Some(n) = n {
            let c = normal_channels(*n);
            for (ch, v) in c.iter().enumerate() {
                data[ch * h * w + i] = *v as f32;
            }
        }
    }
    Ok(OrthoPatch {
        normals: Tensor::new(vec![3, h, w], data)?,
        scale,
        origin: Vec3::new(
            center.x - (w as f64 / 2.0 - 0.5) * scale,
            center.y - (h as f64 / 2.0 - 0.5) * scale,
            center.z,
        ),
    })
}

/// Full pipeline: back-project, estimate normals, project orthographically.
pub fn depth_to_patch(depth: &DepthImage, scale: f64, size: (usize, usize), center: Vec3) -> Result<OrthoPatch> {
    let cloud = backproject(depth);
    let normals = estimate_normals(&cloud);
    orthoproject(&surface_points(&cloud, &normals), scale, size, center)
}

/// Intersection over union of two equally sized masks (1 when both are empty).
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 64.0).unwrap()
    }

    fn plane_image(f: impl Fn(f64, f64) -> f64) -> DepthImage {
        let (w, h) = (32, 32);
        let k = Intrinsics::new(50.0, 50.0, 15.5, 15.5).unwrap();
        // Depth of the plane along each pixel ray, solved per pixel.
        let depth = (0..h)
            .flat_map(|v| (0..w).map(move |u| (u, v)))
            .map(|(u, v)| f((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy))
            .collect();
        DepthImage::new(w, h, depth, k).unwrap()
    }

    #[test]
    fn backproject_examples() {
        let mut d = vec![0.0; 128 * 128];
        d[64 * 128 + 64] = 1.0;
        let img = DepthImage::new(128, 128, d, k()).unwrap();
        let cloud = backproject(&img);
        assert_eq!(cloud.valid().collect::<Vec<_>>(), vec![Vec3::new(0.0, 0.0, 1.0)]);

        let mut d = vec![0.0; 200 * 128];
        d[64 * 200 + 164] = 2.0;
        let img = DepthImage::new(200, 128, d, k()).unwrap();
        let p: Vec<_> = backproject(&img).valid().collect();
        assert_eq!(p, vec![Vec3::new(2.0, 0.0, 2.0)]);

        let img = DepthImage::zeros(16, 16, k()).unwrap();
        assert!(backproject(&img).is_empty());
    }

    #[test]
    fn fronto_parallel_plane_faces_camera() {
        let img = plane_image(|_, _| 1.5);
        let normals = estimate_normals(&backproject(&img));
        // Border pixels use one-sided differences.
        for n in normals {
            let n = n.unwrap();
            assert!((n.x).abs() < 1e-12 && (n.y).abs() < 1e-12 && (n.z + 1.0).abs() < 1e-12);
            assert_eq!(normal_channels(n), [0.5, 0.5, 1.0]);
        }
    }

    #[test]
    fn inclined_plane_normal() {
        // Plane y + z = 1.5 (tilted 45 degrees about x): along ray (a, b, 1), z = 1.5 / (1 + b).
        let img = plane_image(|_, b| 1.5 / (1.0 + b));
        let normals = estimate_normals(&backproject(&img));
        let s = 0.5f64.sqrt();
        for v in 1..31 {
            for u in 1..31 {
                let n = normals[v * 32 + u].unwrap();
                assert!(n.x.abs() < 1e-9);
                assert!((n.y + s).abs() < 1e-9 && (n.z + s).abs() < 1e-9, "{:?}", n);
            }
        }
    }

    #[test]
    fn isolated_pixel_has_no_normal() {
        let mut d = vec![0.0; 16 * 16];
        d[8 * 16 + 8] = 1.0;
        let img = DepthImage::new(16, 16, d, k()).unwrap();
        assert!(estimate_normals(&backproject(&img)).iter().all(|n| n.is_none()));
    }

    #[test]
    fn single_point_lands_in_centre_cell() {
        let p = SurfacePoint {
            position: Vec3::new(0.1, -0.2, 1.0),
            normal: Vec3::new(0.0, 0.0, -1.0),
        };
        let patch = orthoproject(&[p], 0.005, (128, 128), p.position).unwrap();
        let mask = patch.foreground_mask();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[64 * 128 + 64]);
        let n = 128 * 128;
        let d = patch.normals.data();
        assert_eq!([d[64 * 128 + 64], d[n + 64 * 128 + 64], d[2 * n + 64 * 128 + 64]], [0.5, 0.5, 1.0]);
    }

    #[test]
    fn nearest_point_wins_a_cell() {
        let far = SurfacePoint {
            position: Vec3::new(0.0, 0.0, 2.0),
            normal: Vec3::new(1.0, 0.0, 0.0),
        };
        let near = SurfacePoint {
            position: Vec3::new(0.001, 0.001, 1.0),
            normal: Vec3::new(0.0, 0.0, -1.0),
        };
        for pts in [[far, near], [near, far]] {
            let patch = orthoproject(&pts, 0.005, (8, 8), Vec3::new(0.0, 0.0, 1.0)).unwrap();
            assert_eq!(patch.normals.get(&[2, 4, 4]), 1.0);
            assert_eq!(patch.normals.get(&[0, 4, 4]), 0.5);
        }
    }

    #[test]
    fn empty_input_is_background() {
        let patch = orthoproject(&[], 0.005, (16, 16), Vec3::ZERO).unwrap();
        assert_eq!(patch.normals.count_nonzero(), 0);
        assert!(orthoproject(&[], 0.0, (16, 16), Vec3::ZERO).is_err());
    }

    #[test]
    fn window_extracts_sub_patch() {
        let normals = Tensor::from_fn(&[3, 6, 6], |i| i as f32);
        let patch = OrthoPatch {
            normals,
            scale: 0.01,
            origin: Vec3::ZERO,
        };
        let w = patch.window(1, 2, 3).unwrap();
        assert_eq!(w.normals.get(&[0, 0, 0]), patch.normals.get(&[0, 1, 2]));
        assert_eq!(w.normals.get(&[2, 2, 2]), patch.normals.get(&[2, 3, 4]));
        assert!((w.origin.x - 0.02).abs() < 1e-12 && (w.origin.y - 0.01).abs() < 1e-12);
        assert!(patch.window(4, 4, 3).is_err());
    }

    #[test]
    fn dpt_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let depth: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        let img = DepthImage::new(4, 3, depth, k()).unwrap();
        let path = dir.path().join("frame.dpt");
        img.write(&path).unwrap();
        assert_eq!(DepthImage::read(&path).unwrap(), img);
        assert!(DepthImage::decode(b"DPT1 4 3\n\0\0", k()).is_err());
    }

    proptest! {
        #[test]
        fn project_then_backproject(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.2f64..5.0) {
            let k = Intrinsics::new(525.0, 520.0, 319.5, 239.5).unwrap();
            let p = Vec3::new(x, y, z);
            let (u, v) = k.project(p);
            let q = k.unproject(u, v, z);
            prop_assert!((q - p).norm() <= 1e-9);
        }

        #[test]
        fn channels_are_in_unit_range(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..-0.01) {
            let n = Vec3::new(x, y, z).normalized().unwrap();
            let c = normal_channels(n);
            prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((channels_to_normal(c) - n).norm() < 1e-12);
        }
    }
}
