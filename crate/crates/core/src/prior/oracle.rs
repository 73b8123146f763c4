//! Analytic box room used as a stand-in for a learned prior.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use super::{PriorError, ScoreProvider, ScoreQuery, ScoreResponse};
use crate::geometry::{generate_rays, CameraPose, Ray};
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wall {
    PosX,
    NegX,
    Ceiling,
    Floor,
    PosZ,
    NegZ,
}

impl Wall {
    pub const ALL: [Wall; 6] = [
        Wall::PosX,
        Wall::NegX,
        Wall::Ceiling,
        Wall::Floor,
        Wall::PosZ,
        Wall::NegZ,
    ];

    fn index(self) -> usize {
        self as usize
    }

    fn axis(self) -> usize {
        match self {
            Wall::PosX | Wall::NegX => 0,
            Wall::Ceiling | Wall::Floor => 1,
            Wall::PosZ | Wall::NegZ => 2,
        }
    }
}

/// Closed axis-aligned cube centered on the origin with one Lambertian color
/// per wall, modulated by a separable sine pattern in the wall plane.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRoom {
    pub half_extent: f64,
    /// Indexed like [`Wall::ALL`].
    pub palette: [Vec3; 6],
    pub pattern_amplitude: f64,
    /// Pattern wavelength in meters.
    pub pattern_period: f64,
}

impl Default for OracleRoom {
    fn default() -> Self {
        OracleRoom {
            half_extent: 2.0,
            palette: [
                Vec3::new(0.8, 0.3, 0.25),
                Vec3::new(0.25, 0.35, 0.8),
                Vec3::new(0.85, 0.85, 0.8),
                Vec3::new(0.5, 0.35, 0.25),
                Vec3::new(0.3, 0.7, 0.35),
                Vec3::new(0.85, 0.75, 0.3),
            ],
            pattern_amplitude: 0.15,
            pattern_period: 2.0,
        }
    }
}

/// First wall hit along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WallHit {
    pub wall: Wall,
    pub distance: f64,
    pub color: Vec3,
}

/// Per-pixel color and hit distance for one pose, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub color: Vec<Vec3>,
    pub depth: Vec<f64>,
}

impl OracleRoom {
    pub fn contains(&self, p: Vec3) -> bool {
        p.abs().max_elem() < self.half_extent
    }

    pub fn wall_color(&self, wall: Wall, p: Vec3) -> Vec3 {
        let axis = wall.axis();
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let k = TAU / self.pattern_period;
        let m = 1.0 + self.pattern_amplitude * libm::sin(k * p[a]) * libm::sin(k * p[b]);
        let c = self.palette[wall.index()] * m;
        Vec3::new(
            c.x.clamp(0.0, 1.0),
            c.y.clamp(0.0, 1.0),
            c.z.clamp(0.0, 1.0),
        )
    }

    /// Ray from a point inside the room to the wall it meets first.
    pub fn trace(&self, ray: &Ray) -> WallHit {
        let h = self.half_extent;
        let o = ray.origin.to_array();
        let d = ray.direction.to_array();
        let mut best = (f64::INFINITY, Wall::PosX);
        let walls = [
            (Wall::PosX, Wall::NegX),
            (Wall::Ceiling, Wall::Floor),
            (Wall::PosZ, Wall::NegZ),
        ];
        for (axis, (pos, neg)) in walls.into_iter().enumerate() {
            let (t, wall) = if d[axis] > 0.0 {
                ((h - o[axis]) / d[axis], pos)
            } else if d[axis] < 0.0 {
                ((-h - o[axis]) / d[axis], neg)
            } else {
                continue;
            };
            if t < best.0 {
                best = (t, wall);
            }
        }
        let (distance, wall) = best;
        WallHit {
            wall,
            distance,
            color: self.wall_color(wall, ray.at(distance)),
        }
    }

    pub fn ground_truth(&self, pose: &CameraPose) -> Result<GroundTruth, PriorError> {
        if !self.contains(pose.position()) {
            return Err(PriorError::OutsideRoom(pose.position()));
        }
        let (color, depth) = generate_rays(pose)
            .iter()
            .map(|ray| {
                let hit = self.trace(ray);
                (hit.color, hit.distance)
            })
            .unzip();
        Ok(GroundTruth { color, depth })
    }
}

/// Scores renders against the analytic room: the denoised estimate is the
/// room's true image at the queried pose.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleProvider {
    pub room: OracleRoom,
}

impl ScoreProvider for OracleProvider {
    fn score(&self, query: &ScoreQuery<'_>) -> Result<ScoreResponse, PriorError> {
        query.check_shapes()?;
        let alpha = query.schedule.alpha(query.t);
        let sigma = query.schedule.guarded_sigma(query.t);
        let raw_sigma = query.schedule.sigma(query.t);
        let mut residuals = Vec::with_capacity(query.renders.len());
        for ((render, pose), noise) in query.renders.iter().zip(query.poses).zip(query.noise) {
            let truth = self.room.ground_truth(pose)?;
            if truth.color.len() != render.color.len() {
                return Err(PriorError::ShapeMismatch(
                    "prior pose and render have different pixel counts",
                ));
            }
            let view = render
                .color
                .iter()
                .zip(&truth.color)
                .zip(noise)
                .map(|((&x, &gt), &eps)| {
                    let noisy = x * alpha + eps * raw_sigma;
                    (noisy - gt * alpha) / sigma - eps
                })
                .collect();
            residuals.push(view);
        }
        Ok(ScoreResponse { residuals })
    }
}
