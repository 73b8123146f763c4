//! Score-distillation updates: render a batch, ask a provider for noise
//! residuals, push `omega(t) * residual` back through the renderer as the
//! pixel gradient, then take one Adam step.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::field::{FieldGradient, RadianceField};
use crate::geometry::CameraPose;
use crate::math::Vec3;
use crate::prior::{Guidance, NoiseSchedule, PriorError, ScoreProvider, ScoreQuery};
use crate::render::{render, render_backward, RenderError, RenderOutput, RenderSettings};
use crate::view_schedule::{Stage, ViewBatch};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SdsError {
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("stage {stage} aborted after {failures} consecutive failures: {last}")]
    AbortedStage {
        stage: u8,
        failures: usize,
        last: String,
    },
    #[error("render and prior pose lists differ in length ({renders} vs {priors})")]
    PoseCount { renders: usize, priors: usize },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Per-timestep weight on the residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    Constant(f64),
    /// `sigma(t)^2`.
    SigmaSquared,
}

impl Weighting {
    pub fn at(self, t: f64, schedule: NoiseSchedule) -> f64 {
        match self {
            Weighting::Constant(c) => c,
            Weighting::SigmaSquared => {
                let s = schedule.sigma(t);
                s * s
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr_grid: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_grid: 1e-2,
            lr_decoder: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-15,
        }
    }
}

/// Adam moments for every field parameter. Grid parameters (the leading
/// `grid_len`) and decoder parameters use separate learning rates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub grid_len: usize,
    pub step: u64,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

impl OptimizerState {
    pub fn new(field: &RadianceField, config: AdamConfig) -> Self {
        let n = field.param_count();
        OptimizerState {
            config,
            grid_len: field.grid_param_count(),
            step: 0,
            first: alloc::vec![0.0; n],
            second: alloc::vec![0.0; n],
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.first.iter_mut().for_each(|m| *m = 0.0);
        self.second.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.first.iter().chain(&self.second).all(|v| v.is_finite())
    }

    pub fn apply(&mut self, params: &mut [f32], grad: &FieldGradient) {
        assert_eq!(
            params.len(),
            self.first.len(),
            "optimizer and field sizes differ"
        );
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (i, (((p, m), v), &g)) in params
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
            .zip(grad.values())
            .enumerate()
        {
            let m_new = c.beta1 * *m as f64 + (1.0 - c.beta1) * g;
            let v_new = c.beta2 * *v as f64 + (1.0 - c.beta2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let lr = if i < self.grid_len {
                c.lr_grid
            } else {
                c.lr_decoder
            };
            let update = lr * (m_new / bc1) / (libm::sqrt(v_new / bc2) + c.epsilon);
            *p = (*p as f64 - update) as f32;
        }
    }
}

/// Everything about an update that stays fixed across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct SdsSettings {
    pub render: RenderSettings,
    pub weighting: Weighting,
    pub noise: NoiseSchedule,
    pub prompt: String,
    pub guidance: Guidance,
}

/// Diagnostics of one accepted update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdsStep {
    pub iteration: usize,
    pub stage: Stage,
    pub t: f64,
    pub omega: f64,
    pub residual_norm: f64,
    pub grad_norm: f64,
}

/// Result of the gradient half of a step.
#[derive(Clone, Debug, PartialEq)]
pub struct SdsGradient {
    pub t: f64,
    pub omega: f64,
    pub residual_norm: f64,
    pub renders: Vec<RenderOutput>,
}

/// Renders `render_poses`, scores them as seen from `prior_poses` and
/// accumulates `omega(t) * residual` pulled back to parameters into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn sds_gradient<R: Rng + ?Sized>(
    field: &RadianceField,
    render_poses: &[CameraPose],
    prior_poses: &[CameraPose],
    provider: &dyn ScoreProvider,
    settings: &SdsSettings,
    (t_min, t_max): (f64, f64),
    rng: &mut R,
    grad: &mut FieldGradient,
) -> Result<SdsGradient, SdsError> {
    if render_poses.len() != prior_poses.len() {
        return Err(SdsError::PoseCount {
            renders: render_poses.len(),
            priors: prior_poses.len(),
        });
    }
    let t = if t_max > t_min {
        rng.random_range(t_min..t_max)
    } else {
        t_min
    };
    let mut renders = Vec::with_capacity(render_poses.len());
    let mut noise = Vec::with_capacity(render_poses.len());
    for pose in render_poses {
        let sampling = settings.render.sampling(rng.random());
        renders.push(render(field, pose, &sampling));
        let n = pose.intrinsics().pixel_count();
        let eps: Vec<Vec3> = (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                let y: f64 = StandardNormal.sample(rng);
                let z: f64 = StandardNormal.sample(rng);
                Vec3::new(x, y, z)
            })
            .collect();
        noise.push(eps);
    }
    let query = ScoreQuery {
        renders: &renders,
        poses: prior_poses,
        t,
        noise: &noise,
        prompt: &settings.prompt,
        guidance: &settings.guidance,
        schedule: settings.noise,
    };
    let response = provider.score(&query)?;
    let omega = settings.weighting.at(t, settings.noise);
    for ((out, pose), residual) in renders.iter().zip(render_poses).zip(&response.residuals) {
        let pixel_grads: Vec<Vec3> = residual.iter().map(|r| *r * omega).collect();
        render_backward(field, pose, &out.sampling, out, &pixel_grads, None, grad)?;
    }
    Ok(SdsGradient {
        t,
        omega,
        residual_norm: response.norm(),
        renders,
    })
}

/// One full update. On a non-finite gradient neither the parameters nor the
/// optimizer state change.
#[allow(clippy::too_many_arguments)]
pub fn sds_step<R: Rng + ?Sized>(
    field: &mut RadianceField,
    batch: &ViewBatch,
    prior_poses: &[CameraPose],
    provider: &dyn ScoreProvider,
    settings: &SdsSettings,
    bounds: (f64, f64),
    optimizer: &mut OptimizerState,
    rng: &mut R,
    grad: &mut FieldGradient,
) -> Result<SdsStep, SdsError> {
    grad.reset();
    let g = sds_gradient(
        field,
        &batch.poses,
        prior_poses,
        provider,
        settings,
        bounds,
        rng,
        grad,
    )?;
    let grad_norm = grad.norm();
    if !grad_norm.is_finite() || !g.residual_norm.is_finite() {
        return Err(SdsError::NonFiniteGradient {
            iteration: batch.iteration,
        });
    }
    optimizer.apply(field.params_mut(), grad);
    Ok(SdsStep {
        iteration: batch.iteration,
        stage: batch.stage,
        t: g.t,
        omega: g.omega,
        residual_norm: g.residual_norm,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Aabb, FieldConfig};

    #[test]
    fn zero_gradient_leaves_parameters_in_place() {
        let cfg = FieldConfig {
            hidden_width: 4,
            levels: 2,
            max_resolution: 32,
            ..FieldConfig::desk(Aabb::cube(1.0))
        };
        let mut field = RadianceField::initialized(cfg, 1).unwrap();
        let before = field.params().to_vec();
        let mut opt = OptimizerState::new(&field, AdamConfig::default());
        let grad = field.gradient_buffer();
        opt.apply(field.params_mut(), &grad);
        assert_eq!(field.params(), &before[..]);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let cfg = FieldConfig {
            hidden_width: 4,
            levels: 2,
            max_resolution: 32,
            ..FieldConfig::desk(Aabb::cube(1.0))
        };
        let mut field = RadianceField::zeroed(cfg).unwrap();
        let mut opt = OptimizerState::new(&field, AdamConfig::default());
        let mut grad = field.gradient_buffer();
        let last = field.param_count() - 1;
        grad.values_mut()[0] = 3.0;
        grad.values_mut()[last] = -0.5;
        opt.apply(field.params_mut(), &grad);
        assert!((field.params()[0] as f64 + 1e-2).abs() < 1e-8);
        assert!((field.params()[last] as f64 - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn sigma_squared_weighting_is_positive_inside() {
        for k in 1..100 {
            let t = k as f64 / 100.0;
            assert!(Weighting::SigmaSquared.at(t, NoiseSchedule::Cosine) > 0.0);
        }
    }
}
