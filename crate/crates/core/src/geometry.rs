//! Camera poses, ray generation and pure-rotation pixel correspondences.
//!
//! World frame: right-handed, x forward, y up, z right. A camera's local
//! frame uses the same convention, so the columns of a world-from-camera
//! rotation are the camera's forward, up and right axes expressed in world
//! coordinates. Image coordinates are continuous: `u` grows to the right,
//! `v` grows downward, pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and its
//! center is at `(i + 0.5, j + 0.5)`.

use alloc::vec::Vec;

use crate::math::{Mat3, Vec3};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Largest camera-center separation still treated as a shared center.
pub const SHARED_CENTER_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("half field of view {0} rad must lie in (0, pi/2)")]
    InvalidHalfFov(f64),
    #[error("image size {width}x{height} must be non-zero")]
    EmptyImage { width: u32, height: u32 },
    #[error("rotation is not orthonormal with determinant +1 (error {0:e})")]
    NotARotation(f64),
    #[error("camera centers differ by {0:e} m; correspondences need a shared center")]
    CentersDiffer(f64),
}

/// Pinhole intrinsics: square pixels, principal point at the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    half_fov: f64,
    width: u32,
    height: u32,
}

impl Intrinsics {
    /// `half_fov` is the horizontal half angle, in radians.
    pub fn new(half_fov: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(half_fov > 0.0 && half_fov < core::f64::consts::FRAC_PI_2) {
            return Err(GeometryError::InvalidHalfFov(half_fov));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        Ok(Intrinsics {
            half_fov,
            width,
            height,
        })
    }

    pub fn half_fov(&self) -> f64 {
        self.half_fov
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / libm::tan(self.half_fov)
    }

    pub fn with_half_fov(&self, half_fov: f64) -> Result<Self, GeometryError> {
        Intrinsics::new(half_fov, self.width, self.height)
    }

    pub fn with_size(&self, width: u32, height: u32) -> Result<Self, GeometryError> {
        Intrinsics::new(self.half_fov, width, height)
    }

    /// Camera-frame direction (forward, up, right), not normalized, through
    /// the continuous image point `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64) -> Vec3 {
        let f = self.focal();
        let right = (u - 0.5 * self.width as f64) / f;
        let up = -(v - 0.5 * self.height as f64) / f;
        Vec3::new(1.0, up, right)
    }

    /// Continuous image coordinates of a camera-frame direction, or `None`
    /// when the direction does not point in front of the camera.
    pub fn project(&self, local: Vec3) -> Option<(f64, f64)> {
        if local.x <= 0.0 {
            return None;
        }
        let f = self.focal();
        let u = 0.5 * self.width as f64 + f * local.z / local.x;
        let v = 0.5 * self.height as f64 - f * local.y / local.x;
        Some((u, v))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..=self.width as f64).contains(&u) && (0.0..=self.height as f64).contains(&v)
    }
}

/// Extrinsics plus intrinsics. `rotation` maps camera-frame vectors to the
/// world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Mat3,
    position: Vec3,
    intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(
        rotation: Mat3,
        position: Vec3,
        intrinsics: Intrinsics,
    ) -> Result<Self, GeometryError> {
        let err = rotation.orthonormality_error();
        let det = rotation.determinant();
        if !rotation.is_finite()
            || err > ROTATION_TOLERANCE
            || (det - 1.0).abs() > ROTATION_TOLERANCE
        {
            return Err(GeometryError::NotARotation(err.max((det - 1.0).abs())));
        }
        Ok(CameraPose {
            rotation,
            position,
            intrinsics,
        })
    }

    /// Gravity-aligned pose (zero roll) looking along `yaw`/`pitch`.
    pub fn looking(position: Vec3, yaw: f64, pitch: f64, intrinsics: Intrinsics) -> Self {
        CameraPose {
            rotation: sample_rotation(yaw, pitch),
            position,
            intrinsics,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(0)
    }

    pub fn up(&self) -> Vec3 {
        self.rotation.column(1)
    }

    pub fn right(&self) -> Vec3 {
        self.rotation.column(2)
    }

    pub fn with_position(&self, position: Vec3) -> Self {
        CameraPose { position, ..*self }
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Self {
        CameraPose {
            intrinsics,
            ..*self
        }
    }

    /// Same center, rotated by `delta` about the world vertical axis (yaw
    /// grows from +x toward +z).
    pub fn yawed(&self, delta: f64) -> Self {
        let (s, c) = (libm::sin(delta), libm::cos(delta));
        let turn = Mat3 {
            rows: [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]],
        };
        CameraPose {
            rotation: turn.mul_mat(&self.rotation),
            ..*self
        }
    }

    pub fn to_camera(&self, world_dir: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(world_dir)
    }

    /// Unit world direction through the continuous image point `(u, v)`.
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        self.rotation
            .mul_vec(self.intrinsics.back_project(u, v))
            .normalized()
    }

    /// Continuous pixel coordinates of a world direction, when in front.
    pub fn project_direction(&self, world_dir: Vec3) -> Option<(f64, f64)> {
        self.intrinsics.project(self.to_camera(world_dir))
    }

    /// Continuous pixel coordinates of a world point, when in front.
    pub fn project_point(&self, point: Vec3) -> Option<(f64, f64)> {
        self.project_direction(point - self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// One ray per pixel through its center, row-major.
pub fn generate_rays(pose: &CameraPose) -> Vec<Ray> {
    let intr = pose.intrinsics();
    let mut rays = Vec::with_capacity(intr.pixel_count());
    for j in 0..intr.height() {
        for i in 0..intr.width() {
            rays.push(Ray {
                origin: pose.position(),
                direction: pose.pixel_direction(i as f64 + 0.5, j as f64 + 0.5),
            });
        }
    }
    rays
}

/// Zero-roll rotation whose forward axis has azimuth `yaw` (measured from +x
/// toward +z) and elevation `pitch`.
pub fn sample_rotation(yaw: f64, pitch: f64) -> Mat3 {
    let (sy, cy) = (libm::sin(yaw), libm::cos(yaw));
    let (sp, cp) = (libm::sin(pitch), libm::cos(pitch));
    let forward = Vec3::new(cp * cy, sp, cp * sy);
    let right = Vec3::new(-sy, 0.0, cy);
    let up = right.cross(forward);
    Mat3::from_columns(forward, up, right)
}

/// Yaw and pitch of a (not necessarily unit) direction.
pub fn yaw_pitch_of(direction: Vec3) -> (f64, f64) {
    let d = direction.normalized();
    (libm::atan2(d.z, d.x), libm::asin(d.y.clamp(-1.0, 1.0)))
}

/// Per-source-pixel target coordinates for two cameras sharing a center.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    source: Intrinsics,
    target: Intrinsics,
    /// Maps source camera-frame vectors into the target camera frame.
    relative: Mat3,
    mapping: Vec<Option<(f64, f64)>>,
}

impl CorrespondenceMap {
    pub fn source_size(&self) -> (u32, u32) {
        (self.source.width(), self.source.height())
    }

    pub fn target_size(&self) -> (u32, u32) {
        (self.target.width(), self.target.height())
    }

    /// Target coordinate of source pixel `(i, j)`, `None` if out of bounds.
    pub fn get(&self, i: u32, j: u32) -> Option<(f64, f64)> {
        self.mapping[(j * self.source.width() + i) as usize]
    }

    pub fn entries(&self) -> &[Option<(f64, f64)>] {
        &self.mapping
    }

    /// Maps an arbitrary continuous source coordinate.
    pub fn map_point(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let local = self.relative.mul_vec(self.source.back_project(u, v));
        self.target
            .project(local)
            .filter(|&(tu, tv)| self.target.contains(tu, tv))
    }

    pub fn in_bounds_count(&self) -> usize {
        self.mapping.iter().filter(|m| m.is_some()).count()
    }
}

pub fn correspondence_map(
    src: &CameraPose,
    tgt: &CameraPose,
) -> Result<CorrespondenceMap, GeometryError> {
    let gap = (src.position() - tgt.position()).norm();
    if !(gap < SHARED_CENTER_TOLERANCE) {
        return Err(GeometryError::CentersDiffer(gap));
    }
    let relative = tgt.rotation().transpose().mul_mat(src.rotation());
    let mut map = CorrespondenceMap {
        source: *src.intrinsics(),
        target: *tgt.intrinsics(),
        relative,
        mapping: Vec::new(),
    };
    let (w, h) = map.source_size();
    map.mapping = (0..h)
        .flat_map(|j| (0..w).map(move |i| (i, j)))
        .map(|(i, j)| map.map_point(i as f64 + 0.5, j as f64 + 0.5))
        .collect();
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6};

    fn intr(w: u32) -> Intrinsics {
        Intrinsics::new(FRAC_PI_4, w, w).unwrap()
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Intrinsics::new(FRAC_PI_2, 8, 8).is_err());
        assert!(Intrinsics::new(0.0, 8, 8).is_err());
        assert!(Intrinsics::new(0.3, 0, 8).is_err());
    }

    #[test]
    fn rejects_non_rotation() {
        let mut m = Mat3::IDENTITY;
        m.rows[2][2] = -1.0;
        assert!(matches!(
            CameraPose::new(m, Vec3::ZERO, intr(4)),
            Err(GeometryError::NotARotation(_))
        ));
    }

    #[test]
    fn center_ray_is_forward() {
        let pose = CameraPose::looking(Vec3::new(0.3, -0.1, 0.2), 0.7, -0.2, intr(5));
        let rays = generate_rays(&pose);
        assert!((rays[12].direction - pose.forward()).norm() < 1e-12);
    }

    #[test]
    fn corner_ray_matches_explicit_back_projection() {
        let w = 16u32;
        let pose = CameraPose::looking(Vec3::ZERO, 0.0, 0.0, intr(w));
        let rays = generate_rays(&pose);
        // Oracle: focal = (w/2)/tan(45 deg) = 8, top-left pixel center (0.5, 0.5).
        let focal = 8.0;
        let right = (0.5 - 8.0) / focal;
        let up = (8.0 - 0.5) / focal;
        let n = (1.0f64 + right * right + up * up).sqrt();
        let expect = Vec3::new(1.0 / n, up / n, right / n);
        assert!((rays[0].direction - expect).norm() < 1e-12);
        // Nearly 45 degrees off-axis in both directions.
        assert!((up - 0.9375).abs() < 1e-12 && (right + 0.9375).abs() < 1e-12);
    }

    #[test]
    fn directions_ignore_translation() {
        let a = CameraPose::looking(Vec3::ZERO, 1.0, 0.3, intr(6));
        let b = a.with_position(Vec3::new(1.0, 2.0, -0.5));
        for (ra, rb) in generate_rays(&a).iter().zip(generate_rays(&b).iter()) {
            assert_eq!(ra.direction, rb.direction);
            assert_eq!(rb.origin, b.position());
        }
    }

    #[test]
    fn rotation_examples() {
        let r0 = sample_rotation(0.0, 0.0);
        assert!((r0.column(0) - Vec3::X).norm() < 1e-15);
        let r1 = sample_rotation(FRAC_PI_2, 0.0);
        assert!(r1.column(0).dot(Vec3::X).abs() < 1e-15);
        assert!((r1.column(0) - Vec3::Z).norm() < 1e-15);
        let r2 = sample_rotation(FRAC_PI_4, FRAC_PI_6);
        let elevation = r2.column(0).y.asin();
        assert!((elevation - FRAC_PI_6).abs() < 1e-12);
    }

    #[test]
    fn identity_correspondence_maps_pixels_to_themselves() {
        let pose = CameraPose::looking(Vec3::ZERO, 0.4, 0.1, intr(8));
        let map = correspondence_map(&pose, &pose).unwrap();
        for j in 0..8 {
            for i in 0..8 {
                let (u, v) = map.get(i, j).unwrap();
                assert!((u - (i as f64 + 0.5)).abs() < 1e-9 && (v - (j as f64 + 0.5)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn quarter_turn_center_is_out_of_bounds() {
        let a = CameraPose::looking(Vec3::ZERO, 0.0, 0.0, intr(9));
        let b = CameraPose::looking(Vec3::ZERO, FRAC_PI_2, 0.0, intr(9));
        // 90 degrees between forwards exceeds the 45 degree half field of view.
        assert!(a.forward().dot(b.forward()).acos() > b.intrinsics().half_fov());
        let map = correspondence_map(&a, &b).unwrap();
        assert_eq!(map.get(4, 4), None);
    }

    #[test]
    fn thirty_degree_yaw_shifts_center() {
        let a = CameraPose::looking(Vec3::ZERO, 0.0, 0.0, intr(256));
        let b = CameraPose::looking(Vec3::ZERO, FRAC_PI_6, 0.0, intr(256));
        let map = correspondence_map(&a, &b).unwrap();
        let (u, v) = map.map_point(128.0, 128.0).unwrap();
        let expected = 128.0 - 128.0 * FRAC_PI_6.tan();
        assert!((u - expected).abs() < 1e-9, "u = {u}");
        assert!((expected - 54.099).abs() < 1e-3);
        assert!((v - 128.0).abs() < 1e-9);
        // Independent route: project the source forward axis into the target.
        let (pu, pv) = b.project_direction(a.forward()).unwrap();
        assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
    }

    #[test]
    fn distinct_centers_are_rejected() {
        let a = CameraPose::looking(Vec3::ZERO, 0.0, 0.0, intr(4));
        let b = a.with_position(Vec3::new(0.0, 1e-3, 0.0));
        assert!(matches!(
            correspondence_map(&a, &b),
            Err(GeometryError::CentersDiffer(_))
        ));
    }
}
