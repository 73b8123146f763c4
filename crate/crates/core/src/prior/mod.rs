//! Score providers: given noisy renders of a batch, return the predicted
//! noise minus the injected noise for every pixel.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::geometry::{CameraPose, GeometryError};
use crate::math::Vec3;
use crate::render::RenderOutput;

pub mod caa;
pub mod oracle;

pub use caa::{caa_attention, CaaProvider, CaaWeights, FeatureGrid};
pub use oracle::{GroundTruth, OracleProvider, OracleRoom, Wall};

/// Floor on `sigma(t)` when dividing by it.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PriorError {
    #[error("camera at {0:?} is outside the oracle room")]
    OutsideRoom(Vec3),
    #[error("score query shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Variance-preserving noise schedule `x_t = alpha(t) x + sigma(t) eps`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseSchedule {
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    #[default]
    Cosine,
}

impl NoiseSchedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Cosine => libm::cos(FRAC_PI_2 * t),
        }
    }

    pub fn sigma(self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Cosine => libm::sin(FRAC_PI_2 * t),
        }
    }

    pub fn guarded_sigma(self, t: f64) -> f64 {
        self.sigma(t).max(SIGMA_FLOOR)
    }
}

/// Negative-prompt metadata and classifier-free-guidance strength.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Guidance {
    pub negative_prompt: String,
    pub scale: f64,
}

/// One batch handed to a provider.
#[derive(Clone, Copy, Debug)]
pub struct ScoreQuery<'a> {
    pub renders: &'a [RenderOutput],
    /// Poses the provider should assume; may differ from the render poses.
    pub poses: &'a [CameraPose],
    pub t: f64,
    /// Unit-variance noise per view and pixel.
    pub noise: &'a [Vec<Vec3>],
    pub prompt: &'a str,
    pub guidance: &'a Guidance,
    pub schedule: NoiseSchedule,
}

impl ScoreQuery<'_> {
    pub fn check_shapes(&self) -> Result<(), PriorError> {
        if self.renders.len() != self.poses.len() || self.renders.len() != self.noise.len() {
            return Err(PriorError::ShapeMismatch(
                "renders, poses and noise differ in length",
            ));
        }
        if self
            .renders
            .iter()
            .zip(self.noise)
            .any(|(r, n)| r.color.len() != n.len())
        {
            return Err(PriorError::ShapeMismatch(
                "noise and render differ in pixel count",
            ));
        }
        Ok(())
    }
}

/// Per-view, per-pixel residuals shaped like the query renders.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreResponse {
    pub residuals: Vec<Vec<Vec3>>,
}

impl ScoreResponse {
    pub fn zeros_like(query: &ScoreQuery<'_>) -> Self {
        ScoreResponse {
            residuals: query
                .renders
                .iter()
                .map(|r| alloc::vec![Vec3::ZERO; r.color.len()])
                .collect(),
        }
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, other: &ScoreResponse, w: f64) {
        for (a, b) in self.residuals.iter_mut().zip(&other.residuals) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y * w;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.residuals.iter().flatten().all(|v| v.is_finite())
    }

    /// Euclidean norm over every view, pixel and channel.
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.residuals.iter().flatten().map(|v| v.dot(*v)).sum())
    }
}

pub trait ScoreProvider {
    fn score(&self, query: &ScoreQuery<'_>) -> Result<ScoreResponse, PriorError>;
}

/// Provider whose residual is identically zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullProvider;

impl ScoreProvider for NullProvider {
    fn score(&self, query: &ScoreQuery<'_>) -> Result<ScoreResponse, PriorError> {
        query.check_shapes()?;
        Ok(ScoreResponse::zeros_like(query))
    }
}

/// Weighted sum of providers, optionally with guidance against a negative
/// provider: `pos + scale (pos - neg)`.
#[derive(Default)]
pub struct CompositeProvider {
    parts: Vec<(Box<dyn ScoreProvider>, f64)>,
    negative: Option<Box<dyn ScoreProvider>>,
}

impl CompositeProvider {
    pub fn new() -> Self {
        CompositeProvider::default()
    }

    pub fn with(mut self, provider: impl ScoreProvider + 'static, weight: f64) -> Self {
        self.parts.push((Box::new(provider), weight));
        self
    }

    pub fn with_negative(mut self, provider: impl ScoreProvider + 'static) -> Self {
        self.negative = Some(Box::new(provider));
        self
    }
}

impl ScoreProvider for CompositeProvider {
    fn score(&self, query: &ScoreQuery<'_>) -> Result<ScoreResponse, PriorError> {
        query.check_shapes()?;
        let mut total = ScoreResponse::zeros_like(query);
        for (provider, weight) in &self.parts {
            total.add_scaled(&provider.score(query)?, *weight);
        }
        if let Some(negative) = &self.negative {
            let scale = query.guidance.scale;
            if scale != 0.0 {
                let neg = negative.score(query)?;
                // pos + s (pos - neg) = (1 + s) pos - s neg
                let mut guided = ScoreResponse::zeros_like(query);
                guided.add_scaled(&total, 1.0 + scale);
                guided.add_scaled(&neg, -scale);
                total = guided;
            }
        }
        Ok(total)
    }
}
