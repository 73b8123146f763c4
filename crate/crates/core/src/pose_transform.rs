//! Off-center cameras expressed as narrower cameras at the origin.
//!
//! A camera at distance `d_cam` from the origin, looking straight outward
//! with half field of view `theta1`, sees a patch of half-width
//! `tan(theta1) (d - d_cam)` on a plane at depth `d` from the origin. A
//! camera at the origin with the same rotation sees the same patch when its
//! half field of view is `atan(tan(theta1) (d - d_cam) / d)`.

use crate::field::RadianceField;
use crate::geometry::{CameraPose, GeometryError};
use crate::math::Vec3;
use crate::render::{render, RenderOutput, Sampling};

/// Default distance the estimated surface must keep in front of the camera.
pub const DEFAULT_DEPTH_MARGIN: f64 = 0.1;
/// Pixels at or above this opacity count toward the depth estimate.
pub const OPAQUE_THRESHOLD: f64 = 0.5;
/// Smallest fraction of opaque pixels for a usable estimate.
pub const MIN_OPAQUE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoseTransformError {
    #[error("estimated depth {d} is not beyond camera distance {d_cam} plus margin {margin}")]
    DegenerateDepth { d: f64, d_cam: f64, margin: f64 },
    #[error("only {:.1}% of pixels are opaque; the stage-1 field looks undertrained", fraction * 100.0)]
    InsufficientOpacity { fraction: f64 },
    #[error("depth estimation camera must sit at the origin (distance {0})")]
    NotAtOrigin(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalentPosePair {
    /// Pose the field is rendered from.
    pub real: CameraPose,
    /// Origin-centered pose handed to the prior.
    pub equivalent: CameraPose,
    pub d: f64,
    pub d_cam: f64,
}

/// Half field of view at the origin that matches `theta1` at `d_cam`.
pub fn equivalent_half_fov(theta1: f64, d: f64, d_cam: f64) -> f64 {
    libm::atan(libm::tan(theta1) * (d - d_cam) / d)
}

pub fn transform_pose(
    real: &CameraPose,
    d: f64,
    margin: f64,
) -> Result<EquivalentPosePair, PoseTransformError> {
    let d_cam = real.position().norm();
    if !(d > d_cam + margin) {
        return Err(PoseTransformError::DegenerateDepth { d, d_cam, margin });
    }
    let theta2 = equivalent_half_fov(real.intrinsics().half_fov(), d, d_cam);
    let intrinsics = real.intrinsics().with_half_fov(theta2)?;
    let equivalent = real.with_position(Vec3::ZERO).with_intrinsics(intrinsics);
    Ok(EquivalentPosePair {
        real: *real,
        equivalent,
        d,
        d_cam,
    })
}

/// Opacity-weighted mean expected depth over the opaque pixels of `out`.
pub fn depth_from_render(out: &RenderOutput) -> Result<f64, PoseTransformError> {
    let (mut sum, mut weight, mut count) = (0.0, 0.0, 0usize);
    for (&depth, &opacity) in out.depth.iter().zip(&out.opacity) {
        if opacity >= OPAQUE_THRESHOLD {
            sum += opacity * depth;
            weight += opacity;
            count += 1;
        }
    }
    let fraction = count as f64 / out.pixel_count().max(1) as f64;
    if fraction < MIN_OPAQUE_FRACTION {
        return Err(PoseTransformError::InsufficientOpacity { fraction });
    }
    Ok(sum / weight)
}

/// Mean scene depth seen by `center_pose`, which must sit at the origin.
pub fn estimate_view_depth(
    field: &RadianceField,
    center_pose: &CameraPose,
    sampling: &Sampling,
) -> Result<f64, PoseTransformError> {
    let offset = center_pose.position().norm();
    if offset > 1e-12 {
        return Err(PoseTransformError::NotAtOrigin(offset));
    }
    depth_from_render(&render(field, center_pose, sampling))
}
