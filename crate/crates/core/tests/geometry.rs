use std::f64::consts::{FRAC_PI_4, PI};

use proptest::prelude::*;
use roomfield_core::geometry::{
    correspondence_map, generate_rays, sample_rotation, CameraPose, Intrinsics,
};
use roomfield_core::math::{Mat3, Vec3};
use roomfield_core::view_schedule::outward_pose;

/// Rotation from an axis and angle (Rodrigues), independent of the yaw/pitch
/// parameterization.
fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let k = axis.normalized();
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    Mat3 {
        rows: [
            [
                c + k.x * k.x * t,
                k.x * k.y * t - k.z * s,
                k.x * k.z * t + k.y * s,
            ],
            [
                k.y * k.x * t + k.z * s,
                c + k.y * k.y * t,
                k.y * k.z * t - k.x * s,
            ],
            [
                k.z * k.x * t - k.y * s,
                k.z * k.y * t + k.x * s,
                c + k.z * k.z * t,
            ],
        ],
    }
}

fn arb_rotation() -> impl Strategy<Value = Mat3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -PI..PI)
        .prop_filter("axis", |(x, y, z, _)| x * x + y * y + z * z > 1e-2)
        .prop_map(|(x, y, z, a)| axis_angle(Vec3::new(x, y, z), a))
}

#[test]
fn correspondence_round_trip_on_random_rotation_pairs() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases: 100,
        ..ProptestConfig::default()
    });
    let strategy = (arb_rotation(), 0.0..0.8f64, 0.0..0.8f64, 10.0..70.0f64);
    runner
        .run(&strategy, |(a, yaw, pitch, fov_deg)| {
            let intr = Intrinsics::new(fov_deg.to_radians(), 24, 16).unwrap();
            let b = sample_rotation(yaw, pitch).mul_mat(&a);
            let center = Vec3::new(0.2, -0.1, 0.3);
            let src = CameraPose::new(a, center, intr).unwrap();
            let tgt = CameraPose::new(b, center, intr).unwrap();
            let forward = correspondence_map(&src, &tgt).unwrap();
            let back = correspondence_map(&tgt, &src).unwrap();
            for j in 0..16 {
                for i in 0..24 {
                    if let Some((u, v)) = forward.get(i, j) {
                        prop_assert!((0.0..=24.0).contains(&u) && (0.0..=16.0).contains(&v));
                        if let Some((ru, rv)) = back.map_point(u, v) {
                            let err = ((ru - i as f64 - 0.5).powi(2)
                                + (rv - j as f64 - 0.5).powi(2))
                            .sqrt();
                            prop_assert!(err <= 0.5, "round trip error {err}");
                        }
                    }
                }
            }
            Ok(())
        })
        .unwrap();
}

#[test]
fn thirty_degree_yaw_matches_explicit_pinhole() {
    let intr = Intrinsics::new(FRAC_PI_4, 256, 256).unwrap();
    let src = CameraPose::looking(Vec3::ZERO, 0.0, 0.0, intr);
    let tgt = CameraPose::looking(Vec3::ZERO, 30f64.to_radians(), 0.0, intr);
    let map = correspondence_map(&src, &tgt).unwrap();
    // The source forward direction +x sits 30 degrees toward -right in the
    // target, so it projects left of center by f tan(30).
    let f = 128.0 / FRAC_PI_4.tan();
    let expected = 128.0 - f * 30f64.to_radians().tan();
    let (u, v) = map.map_point(128.0, 128.0).unwrap();
    assert!((u - expected).abs() < 1e-9, "{u} vs {expected}");
    assert!((v - 128.0).abs() < 1e-9);
    assert!((expected - 54.1).abs() < 0.05);
    let (pu, pv) = tgt.project_direction(Vec3::X).unwrap();
    assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
}

#[test]
fn ninety_degree_yaw_loses_the_center() {
    let intr = Intrinsics::new(FRAC_PI_4, 32, 32).unwrap();
    let src = CameraPose::looking(Vec3::ZERO, 0.0, 0.0, intr);
    let tgt = CameraPose::looking(Vec3::ZERO, PI / 2.0, 0.0, intr);
    let map = correspondence_map(&src, &tgt).unwrap();
    let angle = src.forward().dot(tgt.forward()).acos();
    assert!(angle >= intr.half_fov());
    assert_eq!(map.get(16, 16), None);
}

proptest! {
    #[test]
    fn sampled_rotations_are_proper(yaw in -10.0..10.0f64, pitch in -1.5..1.5f64) {
        let r = sample_rotation(yaw, pitch);
        prop_assert!(r.orthonormality_error() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        // No roll: the right axis stays horizontal.
        prop_assert!(r.column(2).y.abs() < 1e-12);
    }

    #[test]
    fn projection_inverts_back_projection(
        fov in 0.1..1.4f64,
        u in 0.0..40.0f64,
        v in 0.0..30.0f64,
    ) {
        let intr = Intrinsics::new(fov, 40, 30).unwrap();
        let (pu, pv) = intr.project(intr.back_project(u, v) * 2.5).unwrap();
        prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
    }

    #[test]
    fn ray_directions_ignore_translation(
        yaw in -3.0..3.0f64,
        pitch in -1.0..1.0f64,
        x in -1.0..1.0f64,
        z in -1.0..1.0f64,
    ) {
        let intr = Intrinsics::new(0.6, 6, 5).unwrap();
        let a = CameraPose::looking(Vec3::ZERO, yaw, pitch, intr);
        let b = a.with_position(Vec3::new(x, 0.3, z));
        for (ra, rb) in generate_rays(&a).iter().zip(generate_rays(&b).iter()) {
            prop_assert_eq!(ra.direction, rb.direction);
            prop_assert!((ra.direction.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn outward_poses_face_away_from_the_origin(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
        let p = Vec3::new(x, y, z);
        prop_assume!(p.norm() > 1e-3);
        let pose = outward_pose(p, Intrinsics::new(0.5, 4, 4).unwrap());
        prop_assert!((pose.forward() - p.normalized()).norm() < 1e-9);
    }
}
