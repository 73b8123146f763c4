//! Emission-absorption volume rendering with exact reverse-mode gradients.
//!
//! Each ray is split into `n_samples` equal bins over `[near, far]`; one
//! sample per bin (bin center, or a hashed jitter when stratified). With
//! bin width `delta`, `alpha_i = 1 - exp(-sigma_i delta)`,
//! `T_i = prod_{j<i} (1 - alpha_j)` and `w_i = T_i alpha_i`. Marching stops
//! early once transmittance drops below the configured cutoff; the remaining
//! transmittance is then treated as final.

use alloc::vec;
use alloc::vec::Vec;

use crate::field::{BackwardScratch, FieldGradient, PointTrace, RadianceField, SampleGradient};
use crate::geometry::{generate_rays, CameraPose, Ray};
use crate::math::{Real, Vec3};

/// Guard on the expected-depth denominator.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("render settings invalid: need near < far and at least 2 samples (near {near}, far {far}, n {n_samples})")]
    InvalidSettings {
        near: f64,
        far: f64,
        n_samples: usize,
    },
    #[error("backward pass sampling state differs from the paired forward render")]
    SamplingMismatch,
    #[error("pixel gradient buffer has {got} entries, image has {expected}")]
    GradientShape { expected: usize, got: usize },
}

/// Arithmetic precision of field evaluation inside the renderer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    n_samples: usize,
    near: f64,
    far: f64,
    stratified: bool,
    background: Vec3,
    transmittance_cutoff: f64,
    precision: Precision,
}

impl RenderSettings {
    /// Stratified, mid-gray background, no early termination, double precision.
    pub fn new(n_samples: usize, near: f64, far: f64) -> Result<Self, RenderError> {
        if !(near < far) || n_samples < 2 || !near.is_finite() || !far.is_finite() {
            return Err(RenderError::InvalidSettings {
                near,
                far,
                n_samples,
            });
        }
        Ok(RenderSettings {
            n_samples,
            near,
            far,
            stratified: true,
            background: Vec3::splat(0.5),
            transmittance_cutoff: 0.0,
            precision: Precision::Double,
        })
    }

    pub fn with_stratified(mut self, stratified: bool) -> Self {
        self.stratified = stratified;
        self
    }

    pub fn with_background(mut self, background: Vec3) -> Self {
        self.background = background;
        self
    }

    pub fn with_transmittance_cutoff(mut self, cutoff: f64) -> Self {
        self.transmittance_cutoff = cutoff.max(0.0);
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn stratified(&self) -> bool {
        self.stratified
    }

    pub fn background(&self) -> Vec3 {
        self.background
    }

    pub fn transmittance_cutoff(&self) -> f64 {
        self.transmittance_cutoff
    }

    pub fn bin_width(&self) -> f64 {
        (self.far - self.near) / self.n_samples as f64
    }

    pub fn sampling(&self, seed: u64) -> Sampling {
        Sampling {
            settings: *self,
            seed,
        }
    }
}

/// Settings plus the seed that fixes the stratification jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    pub settings: RenderSettings,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Sampling {
    /// Offset in `[0, 1)` of sample `i` within its bin on ray `ray_index`.
    fn offset(&self, ray_index: usize, i: usize) -> f64 {
        if !self.settings.stratified {
            return 0.5;
        }
        let key = splitmix64(self.seed ^ splitmix64((ray_index as u64) << 20 | i as u64));
        (key >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleRecord {
    pub t: f64,
    pub density: f64,
    pub color: Vec3,
    /// Transmittance before this sample.
    pub transmittance: f64,
    pub weight: f64,
}

/// Result of marching a single ray.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayResult {
    pub color: Vec3,
    pub depth: f64,
    pub opacity: f64,
    pub final_transmittance: f64,
}

/// Reusable per-ray buffers.
pub struct RayWork<F: Real = f64> {
    traces: Vec<PointTrace<F>>,
    records: Vec<SampleRecord>,
    count: usize,
    scratch: BackwardScratch<F>,
}

impl<F: Real> RayWork<F> {
    pub fn new(field: &RadianceField, sampling: &Sampling) -> Self {
        let n = sampling.settings.n_samples;
        RayWork {
            traces: vec![PointTrace::new(field.config()); n],
            records: vec![SampleRecord::default(); n],
            count: 0,
            scratch: BackwardScratch::new(field),
        }
    }

    /// Records of the samples evaluated by the last march.
    pub fn records(&self) -> &[SampleRecord] {
        &self.records[..self.count]
    }
}

/// Marches one ray, keeping per-sample records in `work`.
pub fn march_ray<F: Real>(
    field: &RadianceField,
    ray: &Ray,
    sampling: &Sampling,
    ray_index: usize,
    work: &mut RayWork<F>,
) -> RayResult {
    let s = &sampling.settings;
    let delta = s.bin_width();
    work.count = 0;
    let mut transmittance = 1.0;
    let mut color = Vec3::ZERO;
    let mut weighted_t = 0.0;
    let mut weight_sum = 0.0;
    if let Some((lo, hi)) = field.config().bounds.intersect(ray) {
        let first = libm::floor(((lo - s.near) / delta).max(0.0)) as usize;
        for i in first..s.n_samples {
            let t = s.near + (i as f64 + sampling.offset(ray_index, i)) * delta;
            if t > hi {
                break;
            }
            if t < lo {
                continue;
            }
            let k = work.count;
            let sample = field.forward(ray.at(t), &mut work.traces[k]);
            let alpha = 1.0 - libm::exp(-sample.density * delta);
            let weight = transmittance * alpha;
            work.records[k] = SampleRecord {
                t,
                density: sample.density,
                color: sample.color,
                transmittance,
                weight,
            };
            work.count += 1;
            color += sample.color * weight;
            weighted_t += weight * t;
            weight_sum += weight;
            transmittance *= 1.0 - alpha;
            if transmittance < s.transmittance_cutoff {
                break;
            }
        }
    }
    RayResult {
        color: color + s.background * transmittance,
        depth: weighted_t / weight_sum.max(DEPTH_EPSILON),
        opacity: weight_sum,
        final_transmittance: transmittance,
    }
}

/// Back-propagates pixel gradients of the last [`march_ray`] in `work`.
fn backprop_ray<F: Real>(
    field: &RadianceField,
    sampling: &Sampling,
    work: &mut RayWork<F>,
    final_transmittance: f64,
    color_grad: Vec3,
    opacity_grad: f64,
    grad: &mut FieldGradient,
) {
    let delta = sampling.settings.bin_width();
    // Suffix: sum_{k>i} w_k c_k + T_final * background.
    let mut suffix = sampling.settings.background * final_transmittance;
    for k in (0..work.count).rev() {
        let r = work.records[k];
        let t_next = r.transmittance * libm::exp(-r.density * delta);
        let d_sigma = delta
            * (color_grad.dot(r.color * t_next - suffix) + opacity_grad * final_transmittance);
        let upstream = SampleGradient {
            density: d_sigma,
            color: color_grad * r.weight,
        };
        field.backward(&work.traces[k], upstream, grad, &mut work.scratch);
        suffix += r.color * r.weight;
    }
    work.scratch.flush(grad);
}

/// Per-pixel color, expected depth and opacity, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub color: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub sampling: Sampling,
}

impl RenderOutput {
    pub fn pixel_count(&self) -> usize {
        self.color.len()
    }
}

pub fn render(field: &RadianceField, pose: &CameraPose, sampling: &Sampling) -> RenderOutput {
    match sampling.settings.precision {
        Precision::Single => render_with::<f32>(field, pose, sampling),
        Precision::Double => render_with::<f64>(field, pose, sampling),
    }
}

fn render_with<F: Real>(
    field: &RadianceField,
    pose: &CameraPose,
    sampling: &Sampling,
) -> RenderOutput {
    let rays = generate_rays(pose);
    let mut work = RayWork::<F>::new(field, sampling);
    let n = rays.len();
    let mut out = RenderOutput {
        width: pose.intrinsics().width(),
        height: pose.intrinsics().height(),
        color: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        opacity: Vec::with_capacity(n),
        sampling: *sampling,
    };
    for (idx, ray) in rays.iter().enumerate() {
        let r = march_ray(field, ray, sampling, idx, &mut work);
        out.color.push(r.color);
        out.depth.push(r.depth);
        out.opacity.push(r.opacity);
    }
    out
}

/// Accumulates `d loss / d params` given `d loss / d color` per pixel and,
/// optionally, `d loss / d opacity` per pixel.
pub fn render_backward(
    field: &RadianceField,
    pose: &CameraPose,
    sampling: &Sampling,
    forward: &RenderOutput,
    color_grads: &[Vec3],
    opacity_grads: Option<&[f64]>,
    grad: &mut FieldGradient,
) -> Result<(), RenderError> {
    if forward.sampling != *sampling
        || forward.width != pose.intrinsics().width()
        || forward.height != pose.intrinsics().height()
    {
        return Err(RenderError::SamplingMismatch);
    }
    let expected = pose.intrinsics().pixel_count();
    if color_grads.len() != expected {
        return Err(RenderError::GradientShape {
            expected,
            got: color_grads.len(),
        });
    }
    if let Some(o) = opacity_grads {
        if o.len() != expected {
            return Err(RenderError::GradientShape {
                expected,
                got: o.len(),
            });
        }
    }
    match sampling.settings.precision {
        Precision::Single => {
            backward_with::<f32>(field, pose, sampling, color_grads, opacity_grads, grad)
        }
        Precision::Double => {
            backward_with::<f64>(field, pose, sampling, color_grads, opacity_grads, grad)
        }
    }
    Ok(())
}

fn backward_with<F: Real>(
    field: &RadianceField,
    pose: &CameraPose,
    sampling: &Sampling,
    color_grads: &[Vec3],
    opacity_grads: Option<&[f64]>,
    grad: &mut FieldGradient,
) {
    let rays = generate_rays(pose);
    let mut work = RayWork::<F>::new(field, sampling);
    for (idx, ray) in rays.iter().enumerate() {
        let cg = color_grads[idx];
        let og = opacity_grads.map_or(0.0, |o| o[idx]);
        if cg == Vec3::ZERO && og == 0.0 {
            continue;
        }
        let r = march_ray(field, ray, sampling, idx, &mut work);
        backprop_ray(
            field,
            sampling,
            &mut work,
            r.final_transmittance,
            cg,
            og,
            grad,
        );
    }
}
