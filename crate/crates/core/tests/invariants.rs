use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use templatenet::evaluation::{accuracy_table, non_max_suppression, pr_curve, Criterion, Detection, GroundTruth, SceneResult};
use templatenet::geometry::{Vec3, ViewRange};
use templatenet::network::{forward, softmax};
use templatenet::objective::{soft_labels, POSE_CLASSES};
use templatenet::orthopatch::{channels_to_normal, normal_channels};
use templatenet::synthgen::LabeledExample;
use templatenet::training::{gradcheck_network, hard_mine, pool_losses, train, GradcheckConfig};
use templatenet::*;

fn mini(seed: u64) -> NetworkParams<f64> {
    gradcheck_network(&GradcheckConfig { seed, ..Default::default() }).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(0.0..1.0))
}

fn pool(n: usize, seed: u64) -> Vec<LabeledExample> {
    let grid = PoseGrid::desk(&ViewRange::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let input = random_input(&mut rng).cast();
            if i % 2 == 0 {
                LabeledExample { input, label: SoftLabel::background(), view: None, seed: i as u64 }
            } else {
                let v = grid.views()[rng.gen_range(0..POSE_CLASSES)];
                let label = soft_labels(v.rotation().matrix(), &grid).unwrap();
                LabeledExample { input, label, view: Some(v), seed: i as u64 }
            }
        })
        .collect()
}

fn det(x: f64, y: f64, p: f64, pose: usize) -> Detection {
    Detection {
        cell: (y / 0.005, x / 0.005),
        world: Vec3::new(x, y, 1.0),
        p_fg: p,
        pose_class: pose,
        pose_scores: vec![0.0; POSE_CLASSES + 1],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn template_output_support_is_inside_template_support(seed in 0u64..1000, net in 0u64..4) {
        let params = mini(net);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_input(&mut rng);
        let trace = forward(&params, &x).unwrap();
        let t = params.template_maps().unwrap();
        prop_assert_eq!(trace.z.shape(), t.shape());
        for (z, m) in trace.z.data().iter().zip(t.data()) {
            prop_assert!(*z >= 0.0);
            if *m == 0.0 {
                prop_assert_eq!(*z, 0.0);
            }
        }
        prop_assert!(trace.z.count_nonzero() <= t.count_nonzero());
    }

    #[test]
    fn heads_are_distributions(seed in 0u64..1000, scale in 0.0f64..1e3) {
        let params = mini(seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_input(&mut rng).map(|v| v * scale);
        let trace = forward(&params, &x).unwrap();
        for p in [&trace.p_fg, &trace.p_pose] {
            prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_survives_extreme_logits(logits in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn normal_channels_roundtrip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.01f64..1.0) {
        let n = Vec3::new(x, y, z).normalized().unwrap();
        let c = normal_channels(n);
        prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((channels_to_normal(c) - n).norm() <= 1e-9);
    }

    #[test]
    fn pr_curve_is_bounded_and_recall_monotone(
        scenes in prop::collection::vec(
            (prop::collection::vec((-0.3f64..0.3, -0.3f64..0.3, 0.0f64..1.0, 0usize..16), 0..6), 0usize..16),
            1..12,
        )
    ) {
        let grid = PoseGrid::desk(&ViewRange::default());
        let results: Vec<SceneResult> = scenes
            .iter()
            .map(|(dets, pose)| SceneResult {
                detections: dets.iter().map(|&(x, y, p, k)| det(x, y, p, k)).collect(),
                truth: GroundTruth::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.3, 0.2, 0.1), grid.rotations()[*pose]).unwrap(),
            })
            .collect();
        for crit in [Criterion::Location, Criterion::LocationPose] {
            let pr = pr_curve(&results, &grid, crit);
            let mut last = 0.0;
            for p in &pr {
                prop_assert!((0.0..=1.0).contains(&p.precision));
                prop_assert!((0.0..=1.0).contains(&p.recall));
                prop_assert!(p.recall >= last);
                last = p.recall;
            }
        }
        let a = accuracy_table(&results, &grid);
        prop_assert!(a.location >= a.location_pose);
        prop_assert!((0.0..=100.0).contains(&a.location));
    }

    #[test]
    fn suppression_ignores_input_order(
        dets in prop::collection::vec((-0.5f64..0.5, -0.5f64..0.5, 0usize..16), 1..30),
        seed in 0u64..1000,
    ) {
        // Distinct scores, so the ranking is total.
        let list: Vec<Detection> = dets
            .iter()
            .enumerate()
            .map(|(i, &(x, y, k))| det(x, y, (i as f64 + 1.0) / (dets.len() as f64 + 1.0), k))
            .collect();
        let mut shuffled = list.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(non_max_suppression(list, 64.0), non_max_suppression(shuffled, 64.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hard_mining_picks_the_top_losses(n in 1usize..40, fraction in 0.01f64..1.0, seed in 0u64..100) {
        let params = mini(seed % 2);
        let data = pool(n, seed);
        let picked = hard_mine(&params, &data, fraction, 1.0).unwrap();
        prop_assert_eq!(picked.len(), ((fraction * n as f64).ceil() as usize).max(1));
        let mut uniq = picked.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), picked.len());
        let losses = pool_losses(&params, &data, 1.0).unwrap();
        let floor = picked.iter().map(|&i| losses[i]).fold(f64::INFINITY, f64::min);
        for (i, l) in losses.iter().enumerate() {
            if !picked.contains(&i) {
                prop_assert!(*l <= floor);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn training_is_reproducible_and_leaves_templates_alone(seed in 0u64..1000, subset in 0.2f64..1.0) {
        let data = pool(12, seed);
        let params = mini(seed).cast::<f32>();
        let before = params.template_maps().unwrap().clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            subset_fraction: subset,
            hardmine_period: 1,
            seed,
            ..TrainConfig::default()
        };
        let (a, ha) = train(params.clone(), &data, &cfg).unwrap();
        let (b, hb) = train(params, &data, &cfg).unwrap();
        prop_assert_eq!(a.template_maps().unwrap(), &before);
        prop_assert!(a == b);
        prop_assert_eq!(ha, hb);
    }
}

#[test]
fn foreground_count_is_stable_from_0_8_to_2_5_m() {
    use std::sync::Arc;
    use templatenet::geometry::Rotation;
    use templatenet::orthopatch::{depth_to_patch, Intrinsics};
    use templatenet::synthgen::{render_depth, Camera, ObjectKind, PlacedMesh, Scene};

    let camera = Camera::new(640, 480, Intrinsics::new(525.0, 525.0, 319.5, 239.5).unwrap());
    for (object, rot) in [
        (ObjectKind::Box, Rotation::about_y(0.5) * Rotation::about_x(-0.4)),
        (ObjectKind::SteppedBlock, Rotation::about_y(-0.3) * Rotation::about_x(0.5)),
        (ObjectKind::Cylinder, Rotation::about_x(0.6)),
    ] {
        let mesh = Arc::new(object.mesh());
        let count = |d: f64| {
            let scene = Scene {
                objects: vec![PlacedMesh::new(mesh.clone(), rot, Vec3::new(0.0, 0.0, d))],
                floor: None,
            };
            let depth = render_depth(&scene, &camera).unwrap();
            let patch = depth_to_patch(&depth, 0.005, (128, 128), Vec3::new(0.0, 0.0, d)).unwrap();
            patch.foreground_mask().iter().filter(|&&b| b).count() as f64
        };
        let reference = count(1.0);
        for d in [0.8, 1.2, 1.6, 2.0, 2.25, 2.5] {
            let r = count(d) / reference;
            assert!((r - 1.0).abs() <= 0.1, "{} at {} m: ratio {:.3}", object.name(), d, r);
        }
    }
}
