//! Image and geometry quality against the analytic room.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::RadianceField;
use crate::geometry::{correspondence_map, CameraPose, GeometryError, Intrinsics};
use crate::math::Vec3;
use crate::prior::{OracleRoom, PriorError};
use crate::render::{render, RenderOutput, RenderSettings};
use crate::view_schedule::sample_in_shell;

/// Peak signal-to-noise ratio in dB for colors in `[0, 1]`.
pub fn psnr(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert_eq!(a.len(), b.len(), "image sizes differ");
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x - *y).dot(*x - *y))
        .sum::<f64>()
        / (3 * a.len()) as f64;
    -10.0 * libm::log10(mse.max(1e-20))
}

pub fn rms(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "buffer sizes differ");
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Bilinear lookup at continuous pixel coordinate `(u, v)` with edge clamp.
pub fn sample_bilinear(image: &[Vec3], width: u32, height: u32, u: f64, v: f64) -> Vec3 {
    let x = (u - 0.5).clamp(0.0, (width - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (libm::floor(x) as u32, libm::floor(y) as u32);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |i: u32, j: u32| image[(j * width + i) as usize];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Mean absolute color difference between `source` and `target` warped into
/// the source view, over source pixels that land inside the target.
pub fn reprojection_error(
    source_pose: &CameraPose,
    source: &RenderOutput,
    target_pose: &CameraPose,
    target: &RenderOutput,
) -> Result<Option<f64>, GeometryError> {
    let map = correspondence_map(source_pose, target_pose)?;
    let (mut total, mut count) = (0.0, 0usize);
    for (k, m) in map.entries().iter().enumerate() {
        if let Some((u, v)) = m {
            let warped = sample_bilinear(&target.color, target.width, target.height, *u, *v);
            let d = (source.color[k] - warped).abs();
            total += d.x + d.y + d.z;
            count += 3;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Poses never drawn by training: positions uniform in the ball of
/// `radius`, free yaw, pitch within `pitch_range`, from a dedicated seed.
pub fn held_out_poses(
    seed: u64,
    count: usize,
    radius: f64,
    pitch_range: f64,
    intrinsics: Intrinsics,
) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let position = sample_in_shell(0.0, radius, &mut rng);
            let yaw = rng.random_range(0.0..TAU);
            let pitch = if pitch_range > 0.0 {
                rng.random_range(-pitch_range..=pitch_range)
            } else {
                0.0
            };
            CameraPose::looking(position, yaw, pitch, intrinsics)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr_per_view: Vec<f64>,
    pub mean_psnr: f64,
    pub depth_rms: f64,
    /// Mean over pose pairs that overlap at all.
    pub reprojection_error: f64,
}

/// Yaw offset of the partner view used for the reprojection metric.
pub const REPROJECTION_YAW_OFFSET: f64 = 0.5;

/// PSNR and depth error at every pose, plus the reprojection error between
/// each pose and a partner rotated by [`REPROJECTION_YAW_OFFSET`] about the
/// same center.
pub fn evaluate(
    field: &RadianceField,
    room: &OracleRoom,
    settings: &RenderSettings,
    poses: &[CameraPose],
) -> Result<EvalReport, PriorError> {
    let sampling = settings.with_stratified(false).sampling(0);
    let mut psnr_per_view = Vec::with_capacity(poses.len());
    let (mut depth_sq, mut depth_n) = (0.0, 0usize);
    let (mut reproj, mut reproj_n) = (0.0, 0usize);
    for pose in poses {
        let truth = room.ground_truth(pose)?;
        let out = render(field, pose, &sampling);
        psnr_per_view.push(psnr(&out.color, &truth.color));
        depth_sq += out
            .depth
            .iter()
            .zip(&truth.depth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        depth_n += out.depth.len();

        let partner = pose.yawed(REPROJECTION_YAW_OFFSET);
        let partner_out = render(field, &partner, &sampling);
        if let Some(e) = reprojection_error(pose, &out, &partner, &partner_out)? {
            reproj += e;
            reproj_n += 1;
        }
    }
    let mean_psnr = psnr_per_view.iter().sum::<f64>() / psnr_per_view.len().max(1) as f64;
    Ok(EvalReport {
        psnr_per_view,
        mean_psnr,
        depth_rms: libm::sqrt(depth_sq / depth_n.max(1) as f64),
        reprojection_error: reproj / reproj_n.max(1) as f64,
    })
}
