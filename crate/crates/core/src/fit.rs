//! Direct regression of a field onto the analytic room.
//!
//! Produces a converged reference field without going through the score
//! pipeline: points are drawn in the field bounds and the field's density and
//! color are pulled toward an opaque shell at the room walls with the wall
//! colors, empty space inside.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::{RadianceField, SampleGradient};
use crate::math::Vec3;
use crate::prior::{OracleRoom, Wall};
use crate::sds::{AdamConfig, OptimizerState};

/// Density inside the walls, per meter.
pub const WALL_DENSITY: f64 = 40.0;

/// Target density and color at `p`; color is `None` in empty space.
pub fn room_target(room: &OracleRoom, p: Vec3) -> (f64, Option<Vec3>) {
    let a = p.abs();
    let h = room.half_extent;
    if a.max_elem() < h {
        return (0.0, None);
    }
    let (axis, _) =
        [a.x, a.y, a.z]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                if v > best.1 {
                    (k, v)
                } else {
                    best
                }
            });
    let wall = match (axis, p[axis] > 0.0) {
        (0, true) => Wall::PosX,
        (0, false) => Wall::NegX,
        (1, true) => Wall::Ceiling,
        (1, false) => Wall::Floor,
        (2, true) => Wall::PosZ,
        _ => Wall::NegZ,
    };
    let mut on_wall = p.to_array();
    on_wall[axis] = h * on_wall[axis].signum();
    (
        WALL_DENSITY,
        Some(room.wall_color(wall, Vec3::from(on_wall))),
    )
}

fn sample_point(room: &OracleRoom, bounds_half: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    let mut p = [
        rng.random_range(-bounds_half..bounds_half),
        rng.random_range(-bounds_half..bounds_half),
        rng.random_range(-bounds_half..bounds_half),
    ];
    if rng.random_bool(0.5) {
        // Concentrate half the points in a thin slab around one wall.
        let axis = rng.random_range(0..3);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let offset = rng.random_range(-0.15..0.15f64);
        p[axis] = (side * (room.half_extent + offset)).clamp(-bounds_half, bounds_half);
    }
    Vec3::from(p)
}

/// Runs `steps` Adam steps of `batch` points each. Returns the final mean
/// loss.
pub fn fit_to_room(
    field: &mut RadianceField,
    room: &OracleRoom,
    steps: usize,
    batch: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(field, AdamConfig::default());
    let mut grad = field.gradient_buffer();
    let half = field.config().bounds.size().max_elem() * 0.5;
    let mut last = 0.0;
    for _ in 0..steps {
        let points: Vec<Vec3> = (0..batch)
            .map(|_| sample_point(room, half, &mut rng))
            .collect();
        let samples = field.query_points(&points);
        let mut loss = 0.0;
        let upstream: Vec<SampleGradient> = points
            .iter()
            .zip(&samples)
            .map(|(&p, s)| {
                let (density, color) = room_target(room, p);
                let dd = (s.density - density) / WALL_DENSITY;
                loss += dd * dd;
                let dc = match color {
                    Some(c) => {
                        loss += (s.color - c).dot(s.color - c);
                        s.color - c
                    }
                    None => Vec3::ZERO,
                };
                SampleGradient {
                    density: dd / WALL_DENSITY,
                    color: dc,
                }
            })
            .collect();
        grad.reset();
        field.query_with_gradients(&points, &upstream, &mut grad);
        opt.apply(field.params_mut(), &grad);
        last = loss / batch as f64;
    }
    last
}
