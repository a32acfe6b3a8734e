//! Sliding-window detection over scene patches and the localization /
//! pose scoring used for accuracy tables and precision-recall curves.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Rotation, Vec3};
use crate::network::{forward, NetworkParams};
use crate::objective::{argmax, PoseGrid, POSE_CLASSES};
use crate::orthopatch::OrthoPatch;
use crate::scalar::Scalar;

pub const DEFAULT_STRIDE: usize = 16;
pub const NMS_RADIUS: f64 = 64.0;

/// Relative slack on the localization radius so that offsets lying exactly on
/// the boundary are not lost to rounding.
const RADIUS_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Window centre in scene-patch cells (row, col).
    pub cell: (f64, f64),
    /// Window centre in the camera frame.
    pub world: Vec3,
    pub p_fg: f64,
    /// Zero-based pose class, argmax over the pose entries.
    pub pose_class: usize,
    pub pose_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub center: Vec3,
    /// Object extents (w, d, h) in meters.
    pub bbox: Vec3,
    pub rotation: Rotation,
}

impl GroundTruth {
    pub fn new(center: Vec3, bbox: Vec3, rotation: Rotation) -> Result<Self> {
        if !(bbox.x > 0.0 && bbox.y > 0.0 && bbox.z > 0.0) {
            return Err(Error::Config(format!("bounding box extents must be positive: {:?}", bbox)));
        }
        Ok(Self { center, bbox, rotation })
    }

    pub fn radius(&self) -> f64 {
        self.bbox.x.max(self.bbox.y).max(self.bbox.z) / 3.0
    }
}

/// Scores every `stride`-spaced window of the network's input size.
/// Returned in window order (row-major), before suppression.
pub fn scan_windows<T: Scalar>(params: &NetworkParams<T>, scene: &OrthoPatch, stride: usize) -> Result<Vec<Detection>> {
    let size = params.arch().input_size;
    let (h, w) = (scene.height(), scene.width());
    if h < size || w < size {
        return Err(Error::shape(
            "detect",
            "scene patch",
            format!("{}x{} is smaller than the {}x{} window", h, w, size, size),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("scan stride must be positive".into()));
    }
    let rows: Vec<usize> = (0..=(h - size) / stride).map(|i| i * stride).collect();
    let cols: Vec<usize> = (0..=(w - size) / stride).map(|i| i * stride).collect();
    let windows: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let head = params.arch().head;
    windows
        .par_iter()
        .map(|&(r, c)| {
            let win = scene.window(r, c, size)?;
            let trace = forward(params, &win.normals.cast())?;
            let pose_scores: Vec<f64> = trace.p_pose.iter().map(|p| p.as_f64()).collect();
            let centre = (r as f64 + size as f64 / 2.0 - 0.5, c as f64 + size as f64 / 2.0 - 0.5);
            Ok(Detection {
                cell: centre,
                world: scene.cell_position(centre.0, centre.1),
                p_fg: trace.foreground_probability(head).as_f64(),
                pose_class: argmax(&pose_scores[..POSE_CLASSES]),
                pose_scores,
            })
        })
        .collect()
}

/// Sorts by `p_fg` (descending, stable) and greedily suppresses detections
/// within `radius` cells of a kept one.
pub fn non_max_suppression(mut dets: Vec<Detection>, radius: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.p_fg.total_cmp(&a.p_fg));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let close = kept.iter().any(|k| {
            let dr = k.cell.0 - d.cell.0;
            let dc = k.cell.1 - d.cell.1;
            (dr * dr + dc * dc).sqrt() <= radius
        });
        if !close {
            kept.push(d);
        }
    }
    kept
}

pub fn detect<T: Scalar>(params: &NetworkParams<T>, scene: &OrthoPatch, stride: usize) -> Result<Vec<Detection>> {
    Ok(non_max_suppression(scan_windows(params, scene, stride)?, NMS_RADIUS))
}

pub fn is_localized(det: &Detection, gt: &GroundTruth) -> bool {
    (det.world - gt.center).norm() <= gt.radius() * (1.0 + RADIUS_SLACK)
}

/// Pose is correct when the predicted class is the closest or second
/// closest grid pose to the true rotation.
pub fn is_pose_correct(det: &Detection, gt: &GroundTruth, grid: &PoseGrid) -> bool {
    grid.ranked(&gt.rotation)[..2].contains(&det.pose_class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// Localization only (L).
    Location,
    /// Localization and pose (L+P).
    LocationPose,
}

pub fn is_hit(det: &Detection, gt: &GroundTruth, grid: &PoseGrid, crit: Criterion) -> bool {
    is_localized(det, gt) && (crit == Criterion::Location || is_pose_correct(det, gt, grid))
}

/// Detections of one scene (sorted by score) and its single ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub detections: Vec<Detection>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Sweeps the score threshold over all detections of all scenes. Each
/// ground truth can be matched once; later matches count as false positives.
pub fn pr_curve(scenes: &[SceneResult], grid: &PoseGrid, crit: Criterion) -> Vec<PrPoint> {
    let mut all: Vec<(usize, &Detection)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.detections.iter().map(move |d| (i, d)))
        .collect();
    all.sort_by(|a, b| b.1.p_fg.total_cmp(&a.1.p_fg));
    let mut matched = vec![false; scenes.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let n = scenes.len().max(1) as f64;
    let mut out = Vec::with_capacity(all.len());
    for (i, d) in all {
        if !matched[i] && is_hit(d, &scenes[i].truth, grid, crit) {
            matched[i] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        out.push(PrPoint {
            threshold: d.p_fg,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / n,
        });
    }
    out
}

/// Percentages of scenes whose top detection is a hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub location: f64,
    pub location_pose: f64,
    pub scenes: usize,
}

/// Highest-scoring detection, earliest on ties.
pub fn top_detection(dets: &[Detection]) -> Option<&Detection> {
    dets.iter().fold(None, |best: Option<&Detection>, d| match best {
        Some(b) if b.p_fg >= d.p_fg => Some(b),
        _ => Some(d),
    })
}

pub fn accuracy_table(scenes: &[SceneResult], grid: &PoseGrid) -> Accuracy {
    let count = |crit| {
        scenes
            .iter()
            .filter(|s| {
                top_detection(&s.detections).is_some_and(|d| is_hit(d, &s.truth, grid, crit))
            })
            .count()
    };
    let n = scenes.len();
    let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    Accuracy {
        location: pct(count(Criterion::Location)),
        location_pose: pct(count(Criterion::LocationPose)),
        scenes: n,
    }
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in points {
        s.push_str(&format!("{:.6},{:.6},{:.6}\n", p.threshold, p.precision, p.recall));
    }
    s
}

/// Aligned text table: one row per method with L and L+P columns.
pub fn format_table(rows: &[(String, Accuracy)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}  {:>8}  {:>8}  {:>6}\n", "method", "L", "L+P", "scenes", width = width);
    for (name, a) in rows {
        s.push_str(&format!(
            "{:<width$}  {:>8.2}  {:>8.2}  {:>6}\n",
            name,
            a.location,
            a.location_pose,
            a.scenes,
            width = width
        ));
    }
    s
}
