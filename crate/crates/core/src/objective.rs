//! Pose quantization, soft pose labels and the two-headed mixed
//! cross-entropy cost.
//!
//! Class indices are zero-based: pose classes `0..16`, background `16`.
//! The foreground/background head uses index `0` for foreground.
//!
//! Softmax uses the conventional sign, `p_i = exp(a_i) / sum_j exp(a_j)`.
//! A model written with negated logits maps onto this one by `W -> -W`,
//! `b -> -b`.

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Rotation, ViewAngles, ViewRange};
use crate::scalar::Scalar;

pub const POSE_CLASSES: usize = 16;
pub const POSE_OUTPUTS: usize = POSE_CLASSES + 1;
pub const BACKGROUND_CLASS: usize = POSE_CLASSES;
pub const FG_OUTPUTS: usize = 2;
pub const FG_INDEX: usize = 0;
pub const BG_INDEX: usize = 1;

/// Probabilities at or below zero are replaced by this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Quantized object orientations that the pose head classifies into.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrid {
    rotations: Vec<Rotation>,
    views: Vec<ViewAngles>,
}

impl PoseGrid {
    /// `yaw_bins x pitch_bins` bin centres over the view range, roll zero.
    /// Index layout: `yaw_index * pitch_bins + pitch_index`.
    pub fn uniform(range: &ViewRange, yaw_bins: usize, pitch_bins: usize) -> Result<Self> {
        if yaw_bins * pitch_bins != POSE_CLASSES {
            return Err(Error::Config(format!(
                "pose grid must have {} classes, got {}x{}",
                POSE_CLASSES, yaw_bins, pitch_bins
            )));
        }
        let mut views = Vec::with_capacity(POSE_CLASSES);
        for yaw in range.yaw.bin_centres(yaw_bins) {
            for pitch in range.pitch.bin_centres(pitch_bins) {
                views.push(ViewAngles::new(yaw, pitch, 0.0));
            }
        }
        Ok(Self {
            rotations: views.iter().map(|v| v.rotation()).collect(),
            views,
        })
    }

    /// 8 yaw bins x 2 pitch bins.
    pub fn desk(range: &ViewRange) -> Self {
        Self::uniform(range, 8, 2).expect("8x2 grid has 16 classes")
    }

    pub fn from_rotations(rotations: Vec<Rotation>) -> Result<Self> {
        if rotations.len() != POSE_CLASSES {
            return Err(Error::Config(format!(
                "pose grid must have {} rotations, got {}",
                POSE_CLASSES,
                rotations.len()
            )));
        }
        Ok(Self {
            views: Vec::new(),
            rotations,
        })
    }

    pub fn rotations(&self) -> &[Rotation] {
        &self.rotations
    }

    /// Generating angles, when the grid was built from a view range.
    pub fn views(&self) -> &[ViewAngles] {
        &self.views
    }

    /// `d_j = |I - R_j R^T|_F` for every grid pose `j`.
    pub fn distances(&self, view: &Rotation) -> [f64; POSE_CLASSES] {
        let mut d = [0.0; POSE_CLASSES];
        for (dj, rj) in d.iter_mut().zip(&self.rotations) {
            *dj = canonical_rotation(view, rj).distance_from_identity();
        }
        d
    }

    /// Grid indices ordered by distance to `view`; ties keep the lower index first.
    pub fn ranked(&self, view: &Rotation) -> Vec<usize> {
        let d = self.distances(view);
        let mut idx: Vec<usize> = (0..POSE_CLASSES).collect();
        idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        idx
    }

    pub fn nearest(&self, view: &Rotation) -> usize {
        self.ranked(view)[0]
    }
}

/// Relative rotation taking the view `view` to grid pose `pose`.
pub fn canonical_rotation(view: &Rotation, pose: &Rotation) -> Rotation {
    *pose * view.transpose()
}

/// Targets for both heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftLabel {
    pub fg: [f64; FG_OUTPUTS],
    pub pose: [f64; POSE_OUTPUTS],
}

impl SoftLabel {
    pub fn background() -> Self {
        let mut pose = [0.0; POSE_OUTPUTS];
        pose[BACKGROUND_CLASS] = 1.0;
        Self {
            fg: [0.0, 1.0],
            pose,
        }
    }

    pub fn is_foreground(&self) -> bool {
        self.fg[FG_INDEX] > self.fg[BG_INDEX]
    }

    /// Index of the largest pose target, lower index on ties.
    pub fn pose_argmax(&self) -> usize {
        argmax(&self.pose)
    }

    /// Checks the label invariants (sums to one, background pinning).
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: &f64| (0.0..=1.0).contains(x);
        if !self.fg.iter().all(in_unit) || !self.pose.iter().all(in_unit) {
            return Err(Error::Config("label entries must lie in [0,1]".into()));
        }
        let sc: f64 = self.fg.iter().sum();
        let sp: f64 = self.pose.iter().sum();
        if (sc - 1.0).abs() > 1e-9 || (sp - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("label sums {} / {}", sc, sp)));
        }
        let bg_pose = self.pose[BACKGROUND_CLASS];
        if self.is_foreground() && bg_pose != 0.0 {
            return Err(Error::Config("foreground label with background pose mass".into()));
        }
        if !self.is_foreground() && bg_pose != 1.0 {
            return Err(Error::Config("background label must be one-hot on the background class".into()));
        }
        Ok(())
    }

    /// `[fg(2) | pose(17)]` as a flat vector.
    pub fn to_vec(&self) -> Vec<f64> {
        self.fg.iter().chain(self.pose.iter()).copied().collect()
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != FG_OUTPUTS + POSE_OUTPUTS {
            return Err(Error::format("label vector", format!("{} entries", v.len())));
        }
        let mut fg = [0.0; FG_OUTPUTS];
        let mut pose = [0.0; POSE_OUTPUTS];
        fg.copy_from_slice(&v[..FG_OUTPUTS]);
        pose.copy_from_slice(&v[FG_OUTPUTS..]);
        Ok(Self { fg, pose })
    }
}

/// Unnormalized pose affinities `exp(-d_j^2)`.
pub fn pose_affinities(view: &Rotation, grid: &PoseGrid) -> [f64; POSE_CLASSES] {
    let mut l = grid.distances(view);
    for x in &mut l {
        *x = (-*x * *x).exp();
    }
    l
}

/// Soft foreground label for an object seen under rotation `view`.
pub fn soft_labels(view: &Mat3, grid: &PoseGrid) -> Result<SoftLabel> {
    let view = Rotation::new(*view)?;
    let l = pose_affinities(&view, grid);
    let z: f64 = l.iter().sum();
    let mut pose = [0.0; POSE_OUTPUTS];
    for (p, x) in pose.iter_mut().zip(l) {
        *p = x / z;
    }
    Ok(SoftLabel {
        fg: [1.0, 0.0],
        pose,
    })
}

/// Which heads contribute to the cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadMode {
    /// fg/bg cross-entropy plus lambda-weighted pose cross-entropy.
    #[default]
    Mixed,
    /// 17-way pose cross-entropy only; foreground probability is read from
    /// the pose head.
    PoseOnly,
}

impl HeadMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadMode::Mixed => "mixed",
            HeadMode::PoseOnly => "pose-only",
        }
    }
}

impl std::str::FromStr for HeadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(HeadMode::Mixed),
            "pose-only" => Ok(HeadMode::PoseOnly),
            other => Err(Error::Config(format!("unknown head mode {:?}", other))),
        }
    }
}

/// Loss value and its gradients with respect to the two heads' logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms<T> {
    pub loss: T,
    pub grad_logits_fg: Vec<T>,
    pub grad_logits_pose: Vec<T>,
    /// Number of probabilities that had to be floored before the log.
    pub clamped: usize,
}

fn cross_entropy<T: Scalar>(p: &[T], y: &[f64], clamped: &mut usize) -> T {
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let mut acc = T::zero();
    for (&pi, &yi) in p.iter().zip(y) {
        if yi == 0.0 {
            continue;
        }
        let pi = if pi <= T::zero() {
            *clamped += 1;
            floor
        } else {
            pi
        };
        acc -= T::from_f64_lossy(yi) * pi.ln();
    }
    acc
}

/// `-(sum_i y^c_i log p^c_i + lambda sum_j y^p_j log p^p_j)` and the logit
/// gradients `p^c - y^c`, `lambda (p^p - y^p)`.
pub fn mixed_loss<T: Scalar>(
    p_fg: &[T],
    p_pose: &[T],
    label: &SoftLabel,
    lambda: T,
    mode: HeadMode,
) -> Result<LossTerms<T>> {
    if p_fg.len() != FG_OUTPUTS {
        return Err(Error::shape("mixed_loss", "fg head", format!("{} probabilities", p_fg.len())));
    }
    if p_pose.len() != POSE_OUTPUTS {
        return Err(Error::shape("mixed_loss", "pose head", format!("{} probabilities", p_pose.len())));
    }
    let mut clamped = 0;
    let (fg_weight, pose_weight) = match mode {
        HeadMode::Mixed => (T::one(), lambda),
        HeadMode::PoseOnly => (T::zero(), T::one()),
    };
    let mut loss = T::zero();
    if fg_weight != T::zero() {
        loss += fg_weight * cross_entropy(p_fg, &label.fg, &mut clamped);
    }
    if pose_weight != T::zero() {
        loss += pose_weight * cross_entropy(p_pose, &label.pose, &mut clamped);
    }
    if clamped > 0 {
        log::warn!("mixed_loss: {} non-positive probabilities floored at {:e}", clamped, PROB_FLOOR);
    }
    let grad = |p: &[T], y: &[f64], w: T| -> Vec<T> {
        let total: f64 = y.iter().sum();
        p.iter()
            .zip(y)
            .map(|(&pi, &yi)| w * (pi * T::from_f64_lossy(total) - T::from_f64_lossy(yi)))
            .collect()
    };
    Ok(LossTerms {
        loss,
        grad_logits_fg: grad(p_fg, &label.fg, fg_weight),
        grad_logits_pose: grad(p_pose, &label.pose, pose_weight),
        clamped,
    })
}

/// Foreground probability read off the pose head: mass on the 16 pose classes.
pub fn fg_probability<T: Scalar>(p_pose: &[T]) -> T {
    p_pose[..POSE_CLASSES].iter().copied().sum()
}

pub(crate) fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::softmax;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn grid() -> PoseGrid {
        PoseGrid::desk(&ViewRange::default())
    }

    #[test]
    fn grid_rotations_are_proper() {
        for r in grid().rotations() {
            assert!(Rotation::with_tolerance(*r.matrix(), 1e-9).is_ok());
        }
        assert!(PoseGrid::uniform(&ViewRange::default(), 4, 3).is_err());
    }

    #[test]
    fn label_at_grid_pose_peaks_there() {
        let g = grid();
        for j in 0..POSE_CLASSES {
            let r = g.rotations()[j];
            let aff = pose_affinities(&r, &g);
            assert_eq!(aff[j], 1.0);
            let lab = soft_labels(r.matrix(), &g).unwrap();
            assert_eq!(lab.pose_argmax(), j);
            assert_eq!(lab.pose[BACKGROUND_CLASS], 0.0);
            lab.validate().unwrap();
        }
    }

    #[test]
    fn quarter_turn_affinity() {
        let g = grid();
        let pose = g.rotations()[5];
        let view = Rotation::about_y(FRAC_PI_2) * pose;
        let d = canonical_rotation(&view, &pose).distance_from_identity();
        assert!((d - 2.0).abs() < 1e-12);
        let aff = pose_affinities(&view, &g)[5];
        assert!((aff - (-4.0f64).exp()).abs() < 1e-12);
        assert!((aff - 0.01832).abs() < 1e-5);
    }

    #[test]
    fn equidistant_view_splits_evenly() {
        let g = grid();
        let (a, b) = (g.views()[0], g.views()[2]);
        assert_eq!(a.pitch, b.pitch);
        let mid = ViewAngles::new(0.5 * (a.yaw + b.yaw), a.pitch, 0.0);
        let lab = soft_labels(mid.rotation().matrix(), &g).unwrap();
        assert!((lab.pose[0] - lab.pose[2]).abs() < 1e-12);
    }

    #[test]
    fn non_rotation_is_rejected() {
        let m = Mat3([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(soft_labels(&m, &grid()), Err(Error::NotRotation(_))));
    }

    #[test]
    fn uniform_predictor_loss() {
        let g = grid();
        let fg_label = soft_labels(g.rotations()[3].matrix(), &g).unwrap();
        for label in [fg_label, SoftLabel::background()] {
            for lambda in [0.0, 0.5, 1.0, 2.5] {
                let pc = [0.5, 0.5];
                let pp = [1.0 / 17.0; 17];
                let out = mixed_loss(&pc, &pp, &label, lambda, HeadMode::Mixed).unwrap();
                let want = 2f64.ln() + lambda * 17f64.ln();
                assert!((out.loss - want).abs() < 1e-12, "{} vs {}", out.loss, want);
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let label = SoftLabel::background();
        let out = mixed_loss(&label.fg, &label.pose, &label, 1.0, HeadMode::Mixed).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_logits_fg.iter().chain(&out.grad_logits_pose).all(|&g| g == 0.0));
    }

    #[test]
    fn zero_lambda_decouples_pose() {
        let g = grid();
        let label = soft_labels(g.rotations()[7].matrix(), &g).unwrap();
        let pc = [0.3, 0.7];
        let pp: Vec<f64> = softmax(&(0..17).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        let out = mixed_loss(&pc, &pp, &label, 0.0, HeadMode::Mixed).unwrap();
        assert!((out.loss + 0.3f64.ln()).abs() < 1e-15);
        assert!(out.grad_logits_pose.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_probability_is_floored_and_counted() {
        let label = SoftLabel::background();
        let mut pp = [0.0; 17];
        pp[0] = 1.0;
        let out = mixed_loss(&[0.5, 0.5], &pp, &label, 1.0, HeadMode::Mixed).unwrap();
        assert_eq!(out.clamped, 1);
        assert!((out.loss - (2f64.ln() - PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn fg_probability_cases() {
        assert!((fg_probability(&[1.0f64 / 17.0; 17]) - 16.0 / 17.0).abs() < 1e-15);
        let mut bg = [0.0; 17];
        bg[16] = 1.0;
        assert_eq!(fg_probability(&bg), 0.0);
        let mut p3 = [0.0; 17];
        p3[3] = 1.0;
        assert_eq!(fg_probability(&p3), 1.0);
    }

    #[test]
    fn pose_only_ignores_fg_head() {
        let label = SoftLabel::background();
        let out = mixed_loss(&[0.9, 0.1], &[1.0 / 17.0; 17], &label, 3.0, HeadMode::PoseOnly).unwrap();
        assert!((out.loss - 17f64.ln()).abs() < 1e-12);
        assert!(out.grad_logits_fg.iter().all(|&x| x == 0.0));
    }

    fn view_strategy() -> impl Strategy<Value = ViewAngles> {
        (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0).prop_map(|(a, b, c)| ViewAngles::new(a, b, c))
    }

    proptest! {
        #[test]
        fn labels_sum_to_one_and_are_rotation_invariant(v in view_strategy(), g in view_strategy()) {
            let grid = grid();
            let lab = soft_labels(v.rotation().matrix(), &grid).unwrap();
            let s: f64 = lab.pose.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);

            // Apply one global rotation to the view and every grid pose.
            let q = g.rotation();
            let rotated = PoseGrid::from_rotations(
                grid.rotations().iter().map(|r| *r * q).collect()).unwrap();
            let lab2 = soft_labels((v.rotation() * q).matrix(), &rotated).unwrap();
            for (a, b) in lab.pose.iter().zip(lab2.pose.iter()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn affinity_decreases_with_distance(a in 0.0f64..3.1, b in 0.0f64..3.1) {
            prop_assume!((a - b).abs() > 1e-6);
            let grid = PoseGrid::from_rotations(vec![Rotation::IDENTITY; 16]).unwrap();
            let la = pose_affinities(&Rotation::about_z(a), &grid)[0];
            let lb = pose_affinities(&Rotation::about_z(b), &grid)[0];
            prop_assert_eq!(a < b, la > lb);
        }

        #[test]
        fn loss_is_nonnegative_and_gradient_matches_fd(
            lc in proptest::collection::vec(-3.0f64..3.0, 2),
            lp in proptest::collection::vec(-3.0f64..3.0, 17),
            v in view_strategy(), bg in any::<bool>(), lambda in 0.0f64..3.0)
        {
            let grid = grid();
            let label = if bg { SoftLabel::background() } else {
                soft_labels(v.rotation().matrix(), &grid).unwrap()
            };
            let eval = |lc: &[f64], lp: &[f64]| {
                mixed_loss(&softmax(lc), &softmax(lp), &label, lambda, HeadMode::Mixed).unwrap()
            };
            let base = eval(&lc, &lp);
            prop_assert!(base.loss >= 0.0);
            let eps = 1e-6;
            for i in 0..2 {
                let (mut a, mut b) = (lc.clone(), lc.clone());
                a[i] += eps; b[i] -= eps;
                let num = (eval(&a, &lp).loss - eval(&b, &lp).loss) / (2.0 * eps);
                let an = base.grad_logits_fg[i];
                prop_assert!((an - num).abs() <= 1e-8 * num.abs().max(1.0));
            }
            for i in 0..17 {
                let (mut a, mut b) = (lp.clone(), lp.clone());
                a[i] += eps; b[i] -= eps;
                let num = (eval(&lc, &a).loss - eval(&lc, &b).loss) / (2.0 * eps);
                let an = base.grad_logits_pose[i];
                prop_assert!((an - num).abs() <= 1e-8 * num.abs().max(1.0));
            }
        }
    }
}
