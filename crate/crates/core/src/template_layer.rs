//! The fixed multiplicative template layer `z = relu(zhat * T)` and the
//! rendered template bank that supplies `T`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{AngleRange, Vec3, ViewAngles};
use crate::network::ArchConfig;
use crate::orthopatch::{depth_to_patch, DEFAULT_SCALE};
use crate::scalar::Scalar;
use crate::synthgen::mesh::TriangleMesh;
use crate::synthgen::render::{render_depth, Camera, PlacedMesh, Scene};
use crate::tensor::{read_tnt, write_tnt, Tensor};

fn check_shapes<T: Scalar>(op: &'static str, maps: &Tensor<T>, other: &Tensor<T>) -> Result<()> {
    if maps.shape() != other.shape() {
        return Err(Error::shape(
            op,
            "template maps",
            format!("maps are {:?} but features are {:?}", maps.shape(), other.shape()),
        ));
    }
    Ok(())
}

/// `(zhat * T, relu(zhat * T))`.
pub(crate) fn apply_with_preactivation<T: Scalar>(maps: &Tensor<T>, zhat: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    check_shapes("template layer", maps, zhat)?;
    let pre: Vec<T> = zhat.data().iter().zip(maps.data()).map(|(&a, &t)| a * t).collect();
    let z = pre.iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
    Ok((
        Tensor::new(maps.shape().to_vec(), pre)?,
        Tensor::new(maps.shape().to_vec(), z)?,
    ))
}

/// Template layer forward pass.
pub fn apply<T: Scalar>(maps: &Tensor<T>, zhat: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(apply_with_preactivation(maps, zhat)?.1)
}

pub(crate) fn backward_with_preactivation<T: Scalar>(
    maps: &Tensor<T>,
    zhat: &Tensor<T>,
    pre: &Tensor<T>,
    grad_z: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_shapes("template layer backward", maps, zhat)?;
    check_shapes("template layer backward", maps, pre)?;
    check_shapes("template layer backward", maps, grad_z)?;
    let n = maps.len();
    let mut g_zhat = Vec::with_capacity(n);
    let mut g_t = Vec::with_capacity(n);
    for i in 0..n {
        let g = if pre.data()[i] > T::zero() { grad_z.data()[i] } else { T::zero() };
        g_zhat.push(g * maps.data()[i]);
        g_t.push(g * zhat.data()[i]);
    }
    Ok((
        Tensor::new(maps.shape().to_vec(), g_zhat)?,
        Tensor::new(maps.shape().to_vec(), g_t)?,
    ))
}

/// Returns `(dL/dzhat, dL/dT)`. The template gradient is informational: the
/// templates are never updated.
pub fn backward<T: Scalar>(maps: &Tensor<T>, zhat: &Tensor<T>, grad_z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (pre, _) = apply_with_preactivation(maps, zhat)?;
    backward_with_preactivation(maps, zhat, &pre, grad_z)
}

/// Fixed template maps: three surface-normal channels per viewpoint, values
/// in [0,1], zero off the object silhouette.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    maps: Tensor<f32>,
    viewpoints: Vec<ViewAngles>,
    source_resolution: usize,
}

impl TemplateBank {
    pub fn from_maps(maps: Tensor<f32>, viewpoints: Vec<ViewAngles>, source_resolution: usize) -> Result<Self> {
        if maps.rank() != 3 {
            return Err(Error::shape("template bank", "rank", format!("{:?}", maps.shape())));
        }
        if maps.shape()[0] != 3 * viewpoints.len() {
            return Err(Error::shape(
                "template bank",
                "map count",
                format!("{} maps for {} viewpoints", maps.shape()[0], viewpoints.len()),
            ));
        }
        if let Some(v) = maps.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidTensor(format!("template value {} outside [0,1]", v)));
        }
        for m in 0..maps.shape()[0] {
            if maps.channel(m).iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidTensor(format!("template map {} is empty", m)));
            }
        }
        Ok(Self {
            maps,
            viewpoints,
            source_resolution,
        })
    }

    pub fn maps(&self) -> &Tensor<f32> {
        &self.maps
    }

    pub fn viewpoints(&self) -> &[ViewAngles] {
        &self.viewpoints
    }

    pub fn source_resolution(&self) -> usize {
        self.source_resolution
    }

    pub fn len(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of nonzero template entries.
    pub fn density(&self) -> f64 {
        self.maps.count_nonzero() as f64 / self.maps.len() as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tnt(&dir.join("maps.tnt"), &self.maps)?;
        let mut s = String::from("templatenet-bank v1\n");
        s.push_str(&format!("source_resolution {}\n", self.source_resolution));
        for v in &self.viewpoints {
            s.push_str(&format!("view {:?} {:?} {:?}\n", v.yaw, v.pitch, v.roll));
        }
        let path = dir.join("viewpoints.txt");
        fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("viewpoints.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("templatenet-bank v1") {
            return Err(Error::format("bank manifest", "missing header"));
        }
        let mut res = 0;
        let mut views = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::format("bank manifest", line.to_string());
            match parts.as_slice() {
                ["source_resolution", n] => res = n.parse().map_err(|_| bad())?,
                ["view", y, p, r] => {
                    let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
                    views.push(ViewAngles::new(f(y)?, f(p)?, f(r)?));
                }
                [] => {}
                _ => return Err(bad()),
            }
        }
        Self::from_maps(read_tnt(&dir.join("maps.tnt"))?, views, res)
    }
}

/// Regular yaw x pitch x roll grid of template viewpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewpointGrid {
    pub yaw: AngleRange,
    pub pitch: AngleRange,
    pub roll: AngleRange,
    pub counts: [usize; 3],
}

impl ViewpointGrid {
    /// 5 yaw x 3 pitch x 3 roll = 45 viewpoints (135 maps).
    pub fn wide() -> Self {
        Self {
            yaw: AngleRange::degrees(-60.0, 60.0),
            pitch: AngleRange::degrees(-30.0, 30.0),
            roll: AngleRange::degrees(-30.0, 30.0),
            counts: [5, 3, 3],
        }
    }

    /// 3 yaw x 3 pitch at zero roll = 9 viewpoints (27 maps).
    pub fn desk() -> Self {
        Self {
            counts: [3, 3, 1],
            ..Self::wide()
        }
    }

    /// Preset grids by viewpoint count: 9, 45 or 128 (8 x 4 x 4).
    pub fn with_viewpoints(n: usize) -> Result<Self> {
        match n {
            9 => Ok(Self::desk()),
            45 => Ok(Self::wide()),
            128 => Ok(Self {
                counts: [8, 4, 4],
                ..Self::wide()
            }),
            _ => Err(Error::Config(format!(
                "no viewpoint grid preset for {} templates (use 9, 45 or 128)",
                n
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Yaw-major order.
    pub fn viewpoints(&self) -> Vec<ViewAngles> {
        let mut out = Vec::with_capacity(self.len());
        for &y in &self.yaw.steps(self.counts[0]) {
            for &p in &self.pitch.steps(self.counts[1]) {
                for &r in &self.roll.steps(self.counts[2]) {
                    out.push(ViewAngles::new(y, p, r));
                }
            }
        }
        out
    }
}

/// How renders are mapped onto the template grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankGeometry {
    /// Side of the square orthographic render, in cells.
    pub render_res: usize,
    /// Meters per render cell.
    pub scale: f64,
    /// Object distance from the camera.
    pub distance: f64,
    /// First render cell (fractional) covered by the template grid and the
    /// number of render cells it spans, per axis.
    pub crop_start: f64,
    pub crop_len: f64,
    pub target: (usize, usize),
}

impl BankGeometry {
    /// Whole render area-averaged down to `target`.
    pub fn full(render_res: usize, target: (usize, usize)) -> Self {
        Self {
            render_res,
            scale: DEFAULT_SCALE,
            distance: 1.0,
            crop_start: 0.0,
            crop_len: render_res as f64,
            target,
        }
    }

    /// Aligns each template cell with the receptive-field centre of the
    /// corresponding feature cell of `arch`.
    pub fn for_arch(arch: &ArchConfig) -> Result<Self> {
        let (h, w) = arch.feature_size()?;
        if h != w {
            return Err(Error::Config("non-square feature maps".into()));
        }
        let (offset, step) = arch.feature_footprint();
        Ok(Self {
            render_res: arch.input_size,
            scale: DEFAULT_SCALE,
            distance: 1.0,
            crop_start: offset - step / 2.0,
            crop_len: step * h as f64,
            target: (h, w),
        })
    }

    fn camera(&self) -> Camera {
        let focal = 400.0;
        let extent = self.render_res as f64 * self.scale * focal / (self.distance - 0.3).max(0.1);
        Camera::square(extent.ceil() as usize + 16, focal)
    }
}

fn axis_weights(start: f64, len: f64, n: usize, src: usize) -> Vec<Vec<(usize, f64)>> {
    let cell = len / n as f64;
    (0..n)
        .map(|i| {
            let lo = start + i as f64 * cell;
            let hi = lo + cell;
            let first = lo.floor().max(0.0) as usize;
            let last = (hi.ceil().max(0.0) as usize).min(src);
            (first..last)
                .filter_map(|p| {
                    let o = hi.min(p as f64 + 1.0) - lo.max(p as f64);
                    (o > 0.0).then_some((p, o / cell))
                })
                .collect()
        })
        .collect()
}

/// Area average of the window `[start, start + len)` (both axes, in source
/// cells) of a `src` plane onto a `target` grid. Cells outside the source
/// count as zero.
pub fn area_downsample_window(
    plane: &[f32],
    src: (usize, usize),
    start: (f64, f64),
    len: (f64, f64),
    target: (usize, usize),
) -> Vec<f32> {
    let rows = axis_weights(start.0, len.0, target.0, src.0);
    let cols = axis_weights(start.1, len.1, target.1, src.1);
    let mut out = Vec::with_capacity(target.0 * target.1);
    for rw in &rows {
        for cw in &cols {
            let mut acc = 0.0f64;
            for &(r, wr) in rw {
                for &(c, wc) in cw {
                    acc += wr * wc * plane[r * src.1 + c] as f64;
                }
            }
            out.push(acc.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Area average of a whole plane.
pub fn area_downsample(plane: &[f32], src: (usize, usize), target: (usize, usize)) -> Vec<f32> {
    area_downsample_window(plane, src, (0.0, 0.0), (src.0 as f64, src.1 as f64), target)
}

/// Renders the object at every viewpoint and turns each normal channel
/// into one template map.
pub fn build_bank(mesh: &TriangleMesh, viewpoints: &[ViewAngles], geom: &BankGeometry) -> Result<TemplateBank> {
    if viewpoints.is_empty() {
        return Err(Error::Config("template bank needs at least one viewpoint".into()));
    }
    let camera = geom.camera();
    let mesh = Arc::new(mesh.clone());
    let res = geom.render_res;
    let (th, tw) = geom.target;
    let mut data = Vec::with_capacity(3 * viewpoints.len() * th * tw);
    for (index, view) in viewpoints.iter().enumerate() {
        let centre = Vec3::new(0.0, 0.0, geom.distance);
        let scene = Scene {
            objects: vec![PlacedMesh::new(mesh.clone(), view.rotation(), centre)],
            floor: None,
        };
        let depth = render_depth(&scene, &camera)?;
        let patch = depth_to_patch(&depth, geom.scale, (res, res), centre)?;
        let plane = res * res;
        let mut maps = Vec::with_capacity(3 * th * tw);
        for c in 0..3 {
            maps.extend(area_downsample_window(
                &patch.normals.data()[c * plane..(c + 1) * plane],
                (res, res),
                (geom.crop_start, geom.crop_start),
                (geom.crop_len, geom.crop_len),
                geom.target,
            ));
        }
        if maps.iter().all(|&v| v == 0.0) {
            return Err(Error::EmptyRender {
                index,
                yaw: view.yaw,
                pitch: view.pitch,
                roll: view.roll,
            });
        }
        data.extend(maps);
    }
    TemplateBank::from_maps(
        Tensor::new(vec![3 * viewpoints.len(), th, tw], data)?,
        viewpoints.to_vec(),
        res,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v)
    }

    #[test]
    fn hand_evaluated_examples() {
        let z = apply(&t(&[0.5, 1.0, 0.0]), &t(&[1.0, -2.0, 3.0])).unwrap();
        assert_eq!(z.data(), &[0.5, 0.0, 0.0]);
        let (gz, gt) = backward(&t(&[0.5, 1.0, 0.0]), &t(&[1.0, -2.0, 3.0]), &t(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(gz.data(), &[0.5, 0.0, 0.0]);
        assert_eq!(gt.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn positive_inputs_pass_gradient_times_template() {
        let maps = t(&[0.2, 0.7, 1.0]);
        let zhat = t(&[0.3, 2.0, 0.1]);
        let g = t(&[-1.5, 0.25, 4.0]);
        let (gz, _) = backward(&maps, &zhat, &g).unwrap();
        let want: Vec<f64> = g.data().iter().zip(maps.data()).map(|(a, b)| a * b).collect();
        assert_eq!(gz.data(), want.as_slice());
    }

    #[test]
    fn ones_mask_reproduces_templates() {
        let maps = Tensor::from_fn(&[3, 4, 4], |i| if i % 3 == 0 { 0.0 } else { i as f64 / 48.0 });
        assert_eq!(apply(&maps, &Tensor::filled(&[3, 4, 4], 1.0)).unwrap(), maps);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(apply(&t(&[1.0, 2.0]), &t(&[1.0])).is_err());
        assert!(backward(&t(&[1.0]), &t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn area_average_of_half_block() {
        assert_eq!(area_downsample(&[1.0, 1.0, 0.0, 0.0], (2, 2), (1, 1)), vec![0.5]);
        let plane: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let d = area_downsample(&plane, (4, 4), (2, 2));
        assert_eq!(d, vec![2.5 / 16.0, 4.5 / 16.0, 10.5 / 16.0, 12.5 / 16.0]);
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(ViewpointGrid::wide().viewpoints().len(), 45);
        assert_eq!(ViewpointGrid::desk().viewpoints().len(), 9);
        assert_eq!(ViewpointGrid::with_viewpoints(128).unwrap().len(), 128);
        assert!(ViewpointGrid::with_viewpoints(10).is_err());
    }

    #[test]
    fn facing_cube_z_channel_is_one() {
        let cube = TriangleMesh::cuboid(0.3, 0.3, 0.3);
        let geom = BankGeometry::full(128, (32, 32));
        let bank = build_bank(&cube, &[ViewAngles::default()], &geom).unwrap();
        let z = bank.maps().channel(2);
        // The 0.3 m face spans cells 34..94 of the 128 render, i.e. 8.5..23.5 here.
        for r in 0..32 {
            for c in 0..32 {
                let v = z[r * 32 + c];
                if (9..23).contains(&r) && (9..23).contains(&c) {
                    assert_eq!(v, 1.0, "({}, {})", r, c);
                }
                if !(8..24).contains(&r) || !(8..24).contains(&c) {
                    assert_eq!(v, 0.0, "({}, {})", r, c);
                }
            }
        }
    }

    #[test]
    fn object_outside_view_is_an_error() {
        let far = TriangleMesh::cuboid(0.1, 0.1, 0.1).transformed(&crate::geometry::Rotation::IDENTITY, Vec3::new(5.0, 0.0, 0.0));
        let err = build_bank(&far, &[ViewAngles::default()], &BankGeometry::full(64, (8, 8))).unwrap_err();
        assert!(matches!(err, Error::EmptyRender { index: 0, .. }));
    }

    #[test]
    fn bank_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = build_bank(
            &crate::synthgen::mesh::ObjectKind::Box.mesh(),
            &ViewpointGrid::desk().viewpoints()[..2],
            &BankGeometry::full(64, (8, 8)),
        )
        .unwrap();
        bank.save(dir.path()).unwrap();
        assert_eq!(TemplateBank::load(dir.path()).unwrap(), bank);
    }

    proptest! {
        #[test]
        fn support_containment_and_homogeneity(
            vals in proptest::collection::vec((0.0f64..1.0, -2.0f64..2.0, proptest::bool::ANY), 1..64),
            alpha in 0.01f64..10.0,
        ) {
            let maps = Tensor::vector(&vals.iter().map(|v| if v.2 { 0.0 } else { v.0 }).collect::<Vec<_>>());
            let zhat = Tensor::vector(&vals.iter().map(|v| v.1).collect::<Vec<_>>());
            let z = apply(&maps, &zhat).unwrap();
            for (zi, ti) in z.data().iter().zip(maps.data()) {
                if *ti == 0.0 {
                    prop_assert_eq!(*zi, 0.0);
                }
            }
            prop_assert!(z.count_nonzero() <= maps.count_nonzero());
            let scaled = apply(&maps, &zhat.map(|x| alpha * x)).unwrap();
            for (a, b) in scaled.data().iter().zip(z.data()) {
                prop_assert!((a - alpha * b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
