//! Synthetic data: rendered depth scenes with floor and clutter, turned into
//! labelled orthographic patches.

pub mod dataset;
pub mod mesh;
pub mod render;

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::GroundTruth;
use crate::geometry::{Rotation, Vec3, ViewAngles, ViewRange};
use crate::objective::{soft_labels, PoseGrid, SoftLabel};
use crate::orthopatch::{backproject, estimate_normals, orthoproject, surface_points, OrthoPatch, DEFAULT_PATCH, DEFAULT_SCALE};
use crate::tensor::Tensor;

pub use dataset::{make_dataset, Dataset, DatasetSpec};
pub use mesh::{ObjectKind, TriangleMesh};
pub use render::{render_depth, render_labeled, Camera, Floor, Hit, PlacedMesh, Placement, Scene};

/// Distractor placement and floor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClutterConfig {
    pub enabled: bool,
    pub floor: bool,
    /// Inclusive range of distractor counts.
    pub count: (usize, usize),
    pub library: Vec<ObjectKind>,
    /// Distance of distractors from the target along the floor, meters.
    pub radius: (f64, f64),
    /// Downward camera tilt relative to the floor, degrees.
    pub tilt_deg: (f64, f64),
    /// Minimum visible fraction of the target before a scene is resampled.
    pub min_visible: f64,
    pub max_attempts: usize,
    /// Probability that a background patch is centred on a distractor.
    pub bg_on_object: f64,
}

impl Default for ClutterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            floor: true,
            count: (1, 3),
            library: ObjectKind::ALL.to_vec(),
            radius: (0.18, 0.35),
            tilt_deg: (20.0, 45.0),
            min_visible: 0.6,
            max_attempts: 20,
            bg_on_object: 0.6,
        }
    }
}

impl ClutterConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            floor: false,
            ..Self::default()
        }
    }

    /// Same settings with `target` removed from the distractor library, so
    /// no background contains a copy of the object being learnt.
    pub fn excluding(&self, target: ObjectKind) -> Self {
        let mut c = self.clone();
        c.library.retain(|&k| k != target);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub camera: Camera,
    pub patch_size: usize,
    pub scale: f64,
    /// Target distance range, meters.
    pub distance: (f64, f64),
    pub view_range: ViewRange,
    /// Random patch shifts are uniform in `[-max_shift, max_shift]` cells.
    pub max_shift: i32,
    /// Points farther than this behind the patch centre are dropped.
    pub depth_window: f64,
    pub clutter: ClutterConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            camera: Camera::square(288, 400.0),
            patch_size: DEFAULT_PATCH,
            scale: DEFAULT_SCALE,
            distance: (0.9, 1.1),
            view_range: ViewRange::default(),
            max_shift: 8,
            depth_window: 0.5,
            clutter: ClutterConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn pose_grid(&self) -> PoseGrid {
        PoseGrid::desk(&self.view_range)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.clutter;
        let ok = self.patch_size > 0
            && self.scale > 0.0
            && self.distance.0 > 0.0
            && self.distance.0 <= self.distance.1
            && self.max_shift >= 0
            && self.depth_window > 0.0
            && c.count.0 <= c.count.1
            && c.radius.0 <= c.radius.1
            && c.tilt_deg.0 <= c.tilt_deg.1
            && (0.0..=1.0).contains(&c.min_visible)
            && (0.0..=1.0).contains(&c.bg_on_object)
            && c.max_attempts >= 1
            && (!c.enabled || !c.library.is_empty());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("inconsistent data generation settings".into()))
        }
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// `[3, H, W]` normal channels.
    pub input: Tensor<f32>,
    pub label: SoftLabel,
    /// Target viewpoint for foreground examples.
    pub view: Option<ViewAngles>,
    pub seed: u64,
}

impl LabeledExample {
    pub fn is_foreground(&self) -> bool {
        self.label.is_foreground()
    }

    pub fn rotation(&self) -> Option<Rotation> {
        self.view.map(|v| v.rotation())
    }
}

/// Uniform viewpoint inside the range.
pub fn sample_view(range: &ViewRange, rng: &mut impl Rng) -> ViewAngles {
    let u = |r: &crate::geometry::AngleRange, rng: &mut dyn rand::RngCore| {
        if r.max > r.min {
            rng.gen_range(r.min..=r.max)
        } else {
            r.min
        }
    };
    ViewAngles::new(u(&range.yaw, rng), u(&range.pitch, rng), u(&range.roll, rng))
}

/// Per-example seed derived from a dataset seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn support_extent(mesh: &TriangleMesh, rot: &Rotation, up: Vec3) -> f64 {
    mesh.vertices()
        .iter()
        .map(|&v| -rot.apply(v).dot(up))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Target plus floor and distractors, before rendering.
struct Layout {
    scene: Scene,
    /// Centres of distractors, for background patches.
    anchors: Vec<Vec3>,
}

fn random_clutter_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    ViewAngles::new(
        rng.gen_range(-PI..PI),
        rng.gen_range(-0.35..0.35),
        rng.gen_range(-0.2..0.2),
    )
    .rotation()
}

/// Floor under `support` (a mesh at `centre` with rotation `rot`) and
/// distractors scattered around it.
fn layout_around(
    support: Option<(&Arc<TriangleMesh>, Rotation)>,
    centre: Vec3,
    cfg: &ClutterConfig,
    extra: &[ObjectKind],
    rng: &mut ChaCha8Rng,
) -> Layout {
    let tilt = rng.gen_range(cfg.tilt_deg.0..=cfg.tilt_deg.1).to_radians();
    let up = Vec3::new(0.0, -tilt.cos(), -tilt.sin());
    let right = Vec3::new(1.0, 0.0, 0.0);
    let fwd = up.cross(right);
    let drop = match &support {
        Some((mesh, rot)) => support_extent(mesh, rot, up),
        None => 0.0,
    };
    let base = centre - up * drop;
    let mut scene = Scene::default();
    if let Some((mesh, rot)) = support {
        scene.objects.push(PlacedMesh::new(mesh.clone(), rot, centre));
    }
    if cfg.floor {
        scene.floor = Some(Floor { point: base, normal: up });
    }
    let mut anchors = Vec::new();
    if cfg.enabled {
        let n = rng.gen_range(cfg.count.0..=cfg.count.1);
        let mut kinds: Vec<ObjectKind> = extra.to_vec();
        while kinds.len() < n.max(extra.len()) {
            kinds.push(cfg.library[rng.gen_range(0..cfg.library.len())]);
        }
        for kind in kinds {
            let mesh = Arc::new(kind.mesh());
            let rot = random_clutter_rotation(rng);
            let angle = rng.gen_range(0.0..2.0 * PI);
            let radius = rng.gen_range(cfg.radius.0..=cfg.radius.1);
            let c = base + right * (radius * angle.cos()) + fwd * (radius * angle.sin()) + up * support_extent(&mesh, &rot, up);
            anchors.push(c);
            scene.objects.push(PlacedMesh::new(mesh, rot, c));
        }
    }
    Layout { scene, anchors }
}

/// Orthographic patch of a rendered scene, cropped in depth to
/// `[0, centre.z + depth_window]`.
pub fn scene_patch(
    scene: &Scene,
    camera: &Camera,
    scale: f64,
    size: (usize, usize),
    centre: Vec3,
    depth_window: f64,
) -> Result<OrthoPatch> {
    let depth = render_depth(scene, camera)?;
    let cloud = backproject(&depth);
    let normals = estimate_normals(&cloud);
    let mut points = surface_points(&cloud, &normals);
    points.retain(|p| p.position.z <= centre.z + depth_window);
    orthoproject(&points, scale, size, centre)
}

fn pixel_count(hits: &[Hit], id: usize) -> usize {
    hits.iter().filter(|h| **h == Hit::Object(id)).count()
}

fn shift(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec3 {
    let s = cfg.max_shift;
    Vec3::new(
        rng.gen_range(-s..=s) as f64 * cfg.scale,
        rng.gen_range(-s..=s) as f64 * cfg.scale,
        0.0,
    )
}

fn scene_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Foreground example of `object` seen from `view`.
pub fn make_example(
    object: &Arc<TriangleMesh>,
    view: ViewAngles,
    cfg: &GenConfig,
    grid: &PoseGrid,
    seed: u64,
) -> Result<LabeledExample> {
    if !cfg.view_range.contains(view) {
        return Err(Error::Config(format!("view {:?} outside the configured range", view)));
    }
    let mut rng = scene_rng(seed);
    let rot = view.rotation();
    let label = soft_labels(rot.matrix(), grid)?;
    let mut last = String::new();
    for _ in 0..cfg.clutter.max_attempts {
        let distance = rng.gen_range(cfg.distance.0..=cfg.distance.1);
        let centre = Vec3::new(0.0, 0.0, distance);
        let layout = layout_around(Some((object, rot)), centre, &cfg.clutter, &[], &mut rng);
        let offset = shift(cfg, &mut rng);
        if cfg.clutter.enabled {
            let (_, solo) = render_labeled(
                &Scene {
                    objects: vec![layout.scene.objects[0].clone()],
                    floor: None,
                },
                &cfg.camera,
            )?;
            let (_, full) = render_labeled(&layout.scene, &cfg.camera)?;
            let alone = pixel_count(&solo, 0);
            let seen = pixel_count(&full, 0);
            if alone == 0 || (seen as f64) < cfg.clutter.min_visible * alone as f64 {
                last = format!("target {} of {} pixels visible", seen, alone);
                continue;
            }
        }
        let patch = scene_patch(
            &layout.scene,
            &cfg.camera,
            cfg.scale,
            (cfg.patch_size, cfg.patch_size),
            centre + offset,
            cfg.depth_window,
        )?;
        if patch.normals.count_nonzero() == 0 {
            last = "empty patch".into();
            continue;
        }
        return Ok(LabeledExample {
            input: patch.normals,
            label,
            view: Some(view),
            seed,
        });
    }
    Err(Error::Resample {
        attempts: cfg.clutter.max_attempts,
        reason: last,
    })
}

/// Background example: a clutter-only scene.
pub fn make_background(cfg: &GenConfig, seed: u64) -> Result<LabeledExample> {
    let mut rng = scene_rng(seed);
    let distance = rng.gen_range(cfg.distance.0..=cfg.distance.1);
    let mut clutter = cfg.clutter.clone();
    clutter.enabled = !clutter.library.is_empty();
    clutter.floor = true;
    clutter.count.0 = clutter.count.0.max(1);
    clutter.count.1 = clutter.count.1.max(clutter.count.0);
    // The floor is placed as if a target stood at the scene centre.
    let surface = Vec3::new(0.0, 0.0, distance);
    let layout = layout_around(None, surface, &clutter, &[], &mut rng);
    let on_object = !layout.anchors.is_empty() && rng.gen_bool(cfg.clutter.bg_on_object);
    let centre = if on_object {
        layout.anchors[rng.gen_range(0..layout.anchors.len())]
    } else {
        let spread = cfg.patch_size as f64 * cfg.scale * 0.5;
        surface + Vec3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), 0.0)
    };
    let patch = scene_patch(
        &layout.scene,
        &cfg.camera,
        cfg.scale,
        (cfg.patch_size, cfg.patch_size),
        centre + shift(cfg, &mut rng),
        cfg.depth_window,
    )?;
    Ok(LabeledExample {
        input: patch.normals,
        label: SoftLabel::background(),
        view: None,
        seed,
    })
}

/// Evaluation scene: a larger patch containing the target, a fixed set of
/// distractors and random clutter.
#[derive(Debug, Clone, PartialEq)]
pub struct TestScene {
    pub patch: OrthoPatch,
    pub truth: GroundTruth,
    pub view: ViewAngles,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSceneConfig {
    pub gen: GenConfig,
    pub camera: Camera,
    pub patch_size: usize,
    /// Target offset from the patch centre, uniform in `[-max, max]` cells.
    pub max_offset: i32,
    /// Distractors always placed in every scene.
    pub distractors: Vec<ObjectKind>,
}

impl TestSceneConfig {
    /// Random clutter never draws the `target` kind.
    pub fn new(mut gen: GenConfig, target: ObjectKind, distractors: Vec<ObjectKind>) -> Self {
        gen.clutter = gen.clutter.excluding(target);
        Self {
            gen,
            camera: Camera::square(432, 400.0),
            patch_size: 192,
            max_offset: 32,
            distractors,
        }
    }
}

pub fn make_test_scene(object: &Arc<TriangleMesh>, cfg: &TestSceneConfig, seed: u64) -> Result<TestScene> {
    let gen = &cfg.gen;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = crate::synthgen::sample_view(&gen.view_range, &mut rng);
    let rot = view.rotation();
    let mut clutter = gen.clutter.clone();
    clutter.count.0 = clutter.count.0.saturating_sub(cfg.distractors.len());
    clutter.count.1 = clutter.count.1.saturating_sub(cfg.distractors.len()).max(clutter.count.0);
    let mut last = String::new();
    for _ in 0..gen.clutter.max_attempts {
        let distance = rng.gen_range(gen.distance.0..=gen.distance.1);
        let centre = Vec3::new(0.0, 0.0, distance);
        let layout = layout_around(Some((object, rot)), centre, &clutter, &cfg.distractors, &mut rng);
        let (_, solo) = render_labeled(
            &Scene {
                objects: vec![layout.scene.objects[0].clone()],
                floor: None,
            },
            &cfg.camera,
        )?;
        let (_, full) = render_labeled(&layout.scene, &cfg.camera)?;
        let alone = pixel_count(&solo, 0);
        if alone == 0 || (pixel_count(&full, 0) as f64) < gen.clutter.min_visible * alone as f64 {
            last = "target occluded".into();
            continue;
        }
        let o = cfg.max_offset;
        let offset = Vec3::new(
            rng.gen_range(-o..=o) as f64 * gen.scale,
            rng.gen_range(-o..=o) as f64 * gen.scale,
            0.0,
        );
        let patch = scene_patch(
            &layout.scene,
            &cfg.camera,
            gen.scale,
            (cfg.patch_size, cfg.patch_size),
            centre + offset,
            gen.depth_window,
        )?;
        return Ok(TestScene {
            patch,
            truth: GroundTruth::new(centre, object.extents(), rot)?,
            view,
            seed,
        });
    }
    Err(Error::Resample {
        attempts: gen.clutter.max_attempts,
        reason: last,
    })
}
