//! Camera sampling for the three training stages and the per-stage
//! timestep bounds.
//!
//! Stage 1 keeps every camera at the origin and spreads yaws evenly around
//! the horizon. Stage 2 moves each camera to its own point in a ball and
//! points it away from the origin. Stage 3 puts all cameras of a batch at one
//! shared point with free rotations.

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::geometry::{sample_rotation, yaw_pitch_of, CameraPose, Intrinsics};
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("timestep bounds cross at iteration {iteration}: t_min {t_min} >= t_max {t_max}")]
    ScheduleCrossing {
        iteration: usize,
        t_min: f64,
        t_max: f64,
    },
    #[error("iteration {iteration} outside a stage of {iterations} iterations")]
    IterationOutOfRange { iteration: usize, iterations: usize },
    #[error("stage {stage} config invalid: {reason}")]
    InvalidStage { stage: u8, reason: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Origin = 1,
    Outward = 2,
    SharedCenter = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Origin, Stage::Outward, Stage::SharedCenter];

    pub fn number(self) -> u8 {
        self as u8
    }

    /// Zero-based position in [`Stage::ALL`].
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.number() == n)
    }
}

/// How the bounds move from their start to their end value over a stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Anneal {
    /// Linear in `i / (iterations - 1)`.
    Linear,
    /// Start value for the first `floor(iterations * num / den)` iterations,
    /// end value afterwards.
    Step { num: u32, den: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimestepSchedule {
    /// `(start, end)` of the upper bound.
    pub t_max: (f64, f64),
    /// `(start, end)` of the lower bound.
    pub t_min: (f64, f64),
    pub anneal: Anneal,
}

impl TimestepSchedule {
    pub fn constant(t_min: f64, t_max: f64) -> Self {
        TimestepSchedule {
            t_max: (t_max, t_max),
            t_min: (t_min, t_min),
            anneal: Anneal::Linear,
        }
    }

    /// Position in `[0, 1]` of iteration `i` between start and end.
    fn progress(&self, i: usize, iterations: usize) -> f64 {
        match self.anneal {
            Anneal::Linear if iterations > 1 => i as f64 / (iterations - 1) as f64,
            Anneal::Linear => 0.0,
            Anneal::Step { num, den } => {
                let boundary = iterations as u64 * num as u64 / den.max(1) as u64;
                if (i as u64) < boundary {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

fn lerp((a, b): (f64, f64), s: f64) -> f64 {
    if s == 0.0 {
        a
    } else if s == 1.0 {
        b
    } else {
        a + (b - a) * s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub views_per_iteration: usize,
    /// Camera positions stay within this distance of the origin.
    pub position_radius: f64,
    /// Stage 2 only: positions closer than this are never drawn.
    pub min_radius: f64,
    /// Pitches are drawn uniformly from `[-pitch_range, pitch_range]`.
    pub pitch_range: f64,
    pub schedule: TimestepSchedule,
    pub intrinsics: Intrinsics,
}

impl StageConfig {
    /// Small-budget defaults for `stage`, rendering with `intrinsics`.
    pub fn desk(stage: Stage, intrinsics: Intrinsics) -> Self {
        let deg = PI / 180.0;
        match stage {
            Stage::Origin => StageConfig {
                stage,
                iterations: 500,
                views_per_iteration: 8,
                position_radius: 0.0,
                min_radius: 0.0,
                pitch_range: 15.0 * deg,
                schedule: TimestepSchedule {
                    t_max: (0.98, 0.7),
                    t_min: (0.6, 0.02),
                    anneal: Anneal::Linear,
                },
                intrinsics,
            },
            Stage::Outward => StageConfig {
                stage,
                iterations: 750,
                views_per_iteration: 4,
                position_radius: 0.7,
                min_radius: 0.05,
                pitch_range: 0.0,
                schedule: TimestepSchedule {
                    t_max: (0.7, 0.4),
                    t_min: (0.02, 0.02),
                    anneal: Anneal::Step { num: 2, den: 3 },
                },
                intrinsics,
            },
            Stage::SharedCenter => StageConfig {
                stage,
                iterations: 250,
                views_per_iteration: 2,
                position_radius: 0.7,
                min_radius: 0.0,
                pitch_range: 30.0 * deg,
                schedule: TimestepSchedule::constant(0.02, 0.4),
                intrinsics,
            },
        }
    }

    /// Defaults with the long iteration budgets (10000 / 15000 / 5000).
    pub fn full_scale(stage: Stage, intrinsics: Intrinsics) -> Self {
        let iterations = match stage {
            Stage::Origin => 10_000,
            Stage::Outward => 15_000,
            Stage::SharedCenter => 5_000,
        };
        StageConfig {
            iterations,
            ..StageConfig::desk(stage, intrinsics)
        }
    }

    /// Checks the stage invariants for a room whose walls are
    /// `room_half_extent` from the origin along each axis.
    pub fn validate(&self, room_half_extent: f64) -> Result<(), ScheduleError> {
        let fail = |reason| {
            Err(ScheduleError::InvalidStage {
                stage: self.stage.number(),
                reason,
            })
        };
        if self.views_per_iteration == 0 {
            return fail("views_per_iteration must be positive");
        }
        if self.stage == Stage::SharedCenter && self.views_per_iteration < 2 {
            return fail("stage 3 needs at least two views per iteration");
        }
        if self.stage == Stage::Origin && self.position_radius != 0.0 {
            return fail("stage 1 cameras sit at the origin (position_radius must be 0)");
        }
        if !(self.position_radius >= 0.0 && self.position_radius < room_half_extent) {
            return fail("position_radius must lie in [0, room half-extent)");
        }
        if self.stage == Stage::Outward
            && !(self.min_radius > 0.0 && self.min_radius < self.position_radius)
        {
            return fail("stage 2 needs 0 < min_radius < position_radius");
        }
        if !(self.pitch_range >= 0.0 && self.pitch_range < PI / 2.0) {
            return fail("pitch_range must lie in [0, 90 degrees)");
        }
        let s = &self.schedule;
        let all = [s.t_max.0, s.t_max.1, s.t_min.0, s.t_min.1];
        if all.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return fail("timestep schedule values must lie in [0, 1]");
        }
        if let Anneal::Step { den: 0, .. } = s.anneal {
            return fail("step anneal needs a nonzero denominator");
        }
        if self.iterations == 0 {
            return Ok(());
        }
        for i in [0, self.iterations - 1] {
            timestep_bounds(self, i)?;
        }
        if let Anneal::Step { num, den } = s.anneal {
            let boundary = (self.iterations as u64 * num as u64 / den as u64) as usize;
            if boundary < self.iterations {
                timestep_bounds(self, boundary)?;
            }
        }
        Ok(())
    }
}

/// `(t_min, t_max)` at iteration `i` of the stage.
pub fn timestep_bounds(config: &StageConfig, i: usize) -> Result<(f64, f64), ScheduleError> {
    if i >= config.iterations {
        return Err(ScheduleError::IterationOutOfRange {
            iteration: i,
            iterations: config.iterations,
        });
    }
    let s = config.schedule.progress(i, config.iterations);
    let t_min = lerp(config.schedule.t_min, s);
    let t_max = lerp(config.schedule.t_max, s);
    if !(t_min < t_max) {
        return Err(ScheduleError::ScheduleCrossing {
            iteration: i,
            t_min,
            t_max,
        });
    }
    Ok((t_min, t_max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub poses: Vec<CameraPose>,
    pub stage: Stage,
    pub iteration: usize,
    pub shared_position: bool,
}

fn uniform_pitch<R: Rng + ?Sized>(range: f64, rng: &mut R) -> f64 {
    if range > 0.0 {
        rng.random_range(-range..=range)
    } else {
        0.0
    }
}

/// Uniform point in the spherical shell `min_radius <= |p| <= max_radius`.
pub fn sample_in_shell<R: Rng + ?Sized>(min_radius: f64, max_radius: f64, rng: &mut R) -> Vec3 {
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let (a, b) = (
        min_radius * min_radius * min_radius,
        max_radius * max_radius * max_radius,
    );
    let u: f64 = rng.random();
    let r = libm::cbrt(a + u * (b - a));
    Vec3::from(dir) * r
}

/// Stage-1 batch with an explicit common yaw offset and per-view pitches.
pub fn stage1_batch(
    config: &StageConfig,
    iteration: usize,
    yaw_offset: f64,
    pitches: &[f64],
) -> ViewBatch {
    let n = config.views_per_iteration;
    assert_eq!(pitches.len(), n, "one pitch per view");
    let poses = pitches
        .iter()
        .enumerate()
        .map(|(k, &pitch)| {
            let yaw = (yaw_offset + TAU * k as f64 / n as f64) % TAU;
            CameraPose::looking(Vec3::ZERO, yaw, pitch, config.intrinsics)
        })
        .collect();
    ViewBatch {
        poses,
        stage: Stage::Origin,
        iteration,
        shared_position: true,
    }
}

pub fn sample_stage1<R: Rng + ?Sized>(
    config: &StageConfig,
    iteration: usize,
    rng: &mut R,
) -> ViewBatch {
    debug_assert_eq!(config.stage, Stage::Origin);
    let offset = rng.random_range(0.0..TAU);
    let pitches: Vec<f64> = (0..config.views_per_iteration)
        .map(|_| uniform_pitch(config.pitch_range, rng))
        .collect();
    stage1_batch(config, iteration, offset, &pitches)
}

/// Camera at `position` looking straight away from the origin.
pub fn outward_pose(position: Vec3, intrinsics: Intrinsics) -> CameraPose {
    let (yaw, pitch) = yaw_pitch_of(position);
    let rotation = sample_rotation(yaw, pitch);
    CameraPose::new(rotation, position, intrinsics).expect("sample_rotation is orthonormal")
}

/// One stage-2 camera: uniform position in the shell, facing outward.
pub fn sample_outward_pose<R: Rng + ?Sized>(config: &StageConfig, rng: &mut R) -> CameraPose {
    outward_pose(
        sample_in_shell(config.min_radius, config.position_radius, rng),
        config.intrinsics,
    )
}

pub fn sample_stage2<R: Rng + ?Sized>(
    config: &StageConfig,
    iteration: usize,
    rng: &mut R,
) -> ViewBatch {
    debug_assert_eq!(config.stage, Stage::Outward);
    let poses = (0..config.views_per_iteration)
        .map(|_| sample_outward_pose(config, rng))
        .collect();
    ViewBatch {
        poses,
        stage: Stage::Outward,
        iteration,
        shared_position: false,
    }
}

pub fn sample_stage3<R: Rng + ?Sized>(
    config: &StageConfig,
    iteration: usize,
    rng: &mut R,
) -> ViewBatch {
    debug_assert_eq!(config.stage, Stage::SharedCenter);
    let position = sample_in_shell(0.0, config.position_radius, rng);
    let poses = (0..config.views_per_iteration)
        .map(|_| {
            let yaw = rng.random_range(0.0..TAU);
            let pitch = uniform_pitch(config.pitch_range, rng);
            CameraPose::looking(position, yaw, pitch, config.intrinsics)
        })
        .collect();
    ViewBatch {
        poses,
        stage: Stage::SharedCenter,
        iteration,
        shared_position: true,
    }
}

/// Dispatches on `config.stage`.
pub fn sample_views<R: Rng + ?Sized>(
    config: &StageConfig,
    iteration: usize,
    rng: &mut R,
) -> ViewBatch {
    match config.stage {
        Stage::Origin => sample_stage1(config, iteration, rng),
        Stage::Outward => sample_stage2(config, iteration, rng),
        Stage::SharedCenter => sample_stage3(config, iteration, rng),
    }
}
