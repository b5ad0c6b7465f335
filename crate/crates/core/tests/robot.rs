use nalgebra::Matrix4;
use proptest::prelude::*;

use surgtwin_core::geometry::{Pose6, Vec3};
use surgtwin_core::rng::{stream, Substream};
use surgtwin_core::robot::{
    base_to_camera, camera_to_base, interpolate, reach_pose, Direction, HandEyeCalibration, Jaw, JawOutcome,
    MotionConfig, ReachMode, Robot, ADJUST_STEP,
};
use surgtwin_core::scene::{build_environment, ground_truth, model_library, peg_name, EnvironmentConfig, EnvironmentKind};
use surgtwin_core::twin::ObjectTwin;

fn pose() -> impl Strategy<Value = Pose6> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        0.0f64..std::f64::consts::PI,
        prop::array::uniform3(-0.5f64..0.5),
    )
        .prop_map(|(axis, angle, t)| Pose6::from_axis_angle(Vec3::from(axis), angle, Vec3::from(t)))
}

fn homogeneous(p: &Pose6) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&p.rotation_matrix());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(p.translation());
    m
}

fn robot(calib: Pose6, noise: f64, home: Vec3) -> Robot {
    let motion = MotionConfig {
        execution_noise_sigma: noise,
        ..Default::default()
    };
    Robot::new(HandEyeCalibration::exact(calib), motion, stream(3, Substream::Execution), home)
}

fn exact_twin(world: &surgtwin_core::WorldState, name: &str) -> ObjectTwin {
    let truth = ground_truth(world, name).unwrap();
    ObjectTwin {
        object_id: 1,
        label: truth.model_id.clone(),
        name: name.into(),
        model_id: truth.model_id,
        pose: Some(truth.pose_camera),
        detected: true,
        stale: false,
        frame_id: 1,
        mask: truth.mask,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn camera_to_base_matches_matrix_product(calib in pose(), p in pose()) {
        let got = homogeneous(&camera_to_base(&p, &calib));
        let expected = homogeneous(&calib) * homogeneous(&p);
        prop_assert!((got - expected).abs().max() < 1e-12);
        let inv = homogeneous(&base_to_camera(&p, &calib));
        let expected = homogeneous(&calib).try_inverse().unwrap() * homogeneous(&p);
        prop_assert!((inv - expected).abs().max() < 1e-12);
    }

    #[test]
    fn frames_round_trip(calib in pose(), p in pose()) {
        let a = homogeneous(&camera_to_base(&base_to_camera(&p, &calib), &calib));
        let b = homogeneous(&base_to_camera(&camera_to_base(&p, &calib), &calib));
        prop_assert!((a - homogeneous(&p)).abs().max() < 1e-9);
        prop_assert!((b - homogeneous(&p)).abs().max() < 1e-9);
    }

    #[test]
    fn waypoints_lie_on_the_segment(
        calib in pose(),
        start in prop::array::uniform3(-0.05f64..0.05),
        end in prop::array::uniform3(-0.05f64..0.05),
    ) {
        let world = build_environment(&EnvironmentConfig::default(), 0).unwrap();
        let home = Vec3::new(start[0], start[1], 0.4 + start[2]);
        let target = Vec3::new(end[0], end[1], 0.4 + end[2]);
        let mut r = robot(calib, 0.0, home);
        let rotation = *r.state.tooltip.rotation();
        let (_, wps) = r.move_cartesian(&world, &target).unwrap();
        let a = camera_to_base(&Pose6::from_translation(home), &calib).translation().to_owned();
        let b = camera_to_base(&Pose6::from_translation(target), &calib).translation().to_owned();
        let len = (b - a).norm();
        let mut prev = a;
        for w in &wps {
            let p = w.translation();
            if len > 0.0 {
                let s = (p - a).dot(&(b - a)) / (len * len);
                prop_assert!((-1e-9..=1.0 + 1e-9).contains(&s));
                prop_assert!((p - (a + (b - a) * s)).norm() < 1e-9);
            }
            prop_assert!((p - prev).norm() <= r.motion.waypoint_spacing + 1e-9);
            prop_assert_eq!(w.rotation(), &rotation);
            prev = *p;
        }
        prop_assert!((r.tooltip_camera() - target).norm() < 1e-9);
    }

    #[test]
    fn adjustments_move_three_mm_along_one_axis(calib in pose(), dirs in prop::collection::vec(0usize..6, 1..20)) {
        let world = build_environment(&EnvironmentConfig::default(), 0).unwrap();
        let mut r = robot(calib, 0.0, Vec3::new(0.0, 0.0, 0.4));
        let rotation = *r.state.tooltip.rotation();
        for d in dirs {
            let dir = Direction::ALL[d];
            let before = r.tooltip_camera();
            r.adjust_tooltip(&world, dir);
            let delta = r.tooltip_camera() - before;
            prop_assert!((delta - dir.camera_axis() * ADJUST_STEP).norm() < 1e-12);
            prop_assert!((delta.norm() - 0.003).abs() < 1e-12);
            prop_assert_eq!(r.state.tooltip.rotation(), &rotation);
        }
    }

    #[test]
    fn interpolation_spacing_and_endpoint(
        a in prop::array::uniform3(-1.0f64..1.0),
        b in prop::array::uniform3(-1.0f64..1.0),
        spacing in 0.001f64..0.1,
    ) {
        let (a, b) = (Vec3::from(a), Vec3::from(b));
        let pts = interpolate(&a, &b, spacing);
        prop_assert_eq!(pts.len(), (((b - a).norm() / spacing).ceil() as usize).max(1));
        prop_assert!((pts.last().unwrap() - b).norm() < 1e-12);
    }

    #[test]
    fn pose_error_passes_through_reach_rigidly(seed in 0u64..20, offset in prop::array::uniform3(-1.0f64..1.0)) {
        let world = build_environment(&EnvironmentConfig::new(EnvironmentKind::Ideal), seed).unwrap();
        let models = model_library(&world.config.geometry);
        let exact = exact_twin(&world, "block_grey");
        let off = Vec3::from(offset);
        prop_assume!(off.norm() > 1e-3);
        let off = off.normalize() * 0.005;
        let mut shifted = exact.clone();
        let p = exact.pose.unwrap();
        shifted.pose = Some(p.with_translation(p.translation() + off));
        let motion = MotionConfig::default();
        let a = reach_pose(&exact, ReachMode::Pick, &models["block"], None, &motion).unwrap();
        let b = reach_pose(&shifted, ReachMode::Pick, &models["block"], None, &motion).unwrap();
        prop_assert!(((b.position - a.position).norm() - 0.005).abs() < 1e-12);
    }
}

#[test]
fn exact_twin_reaches_true_grasp_point() {
    for seed in 0..5 {
        let world = build_environment(&EnvironmentConfig::new(EnvironmentKind::TiltedPegboard), seed).unwrap();
        let models = model_library(&world.config.geometry);
        for color in ["grey", "blue"] {
            let name = surgtwin_core::scene::block_name(color);
            let target = reach_pose(&exact_twin(&world, &name), ReachMode::Pick, &models["block"], None, &MotionConfig::default()).unwrap();
            assert!((target.position - ground_truth(&world, &name).unwrap().grasp_point_camera).norm() < 1e-12);
        }
    }
}

#[test]
fn place_target_sits_on_peg_axis() {
    for kind in [EnvironmentKind::Ideal, EnvironmentKind::TiltedPegboard] {
        let world = build_environment(&EnvironmentConfig::new(kind), 2).unwrap();
        let models = model_library(&world.config.geometry);
        for k in (0..12).filter(|&k| world.peg_occupant(k).is_none()) {
            let twin = exact_twin(&world, &peg_name(k));
            let target = reach_pose(&twin, ReachMode::Place, &models["peg"], Some(&models["block"]), &MotionConfig::default()).unwrap();
            let (top, up) = world.peg_top(k).unwrap();
            let v = world.camera_to_world(&target.position) - top;
            assert!((v - up * v.dot(&up)).norm() < 1e-12, "{kind:?} peg {k}");
            assert!(v.dot(&up) > 0.0);
        }
    }
}

#[test]
fn grasp_outcome_is_a_function_of_tooltip_and_world() {
    let world = build_environment(&EnvironmentConfig::new(EnvironmentKind::Ideal), 9).unwrap();
    let models = model_library(&world.config.geometry);
    let twin = exact_twin(&world, "block_blue");
    let calib = HandEyeCalibration::default().base_from_camera;
    let outcomes: Vec<_> = [3u64, 4, 5]
        .into_iter()
        .map(|s| {
            let motion = MotionConfig {
                execution_noise_sigma: 0.0,
                ..Default::default()
            };
            let mut r = Robot::new(HandEyeCalibration::exact(calib), motion, stream(s, Substream::Execution), Vec3::new(0.0, 0.0, 0.35));
            let target = reach_pose(&twin, ReachMode::Pick, &models["block"], None, &r.motion).unwrap();
            let w = r.two_stage_reach(&world, &target).unwrap();
            let (w, outcome) = r.set_jaw(&w, Jaw::Closed).unwrap();
            (serde_json::to_string(&w).unwrap(), outcome)
        })
        .collect();
    assert!(matches!(outcomes[0].1, JawOutcome::World(_)));
    assert!(outcomes.windows(2).all(|w| w[0] == w[1]));
}
