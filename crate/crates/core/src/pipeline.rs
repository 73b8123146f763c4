//! The three-stage training run: origin views, outward views with pose
//! transformation against a frozen copy of the stage-1 field, then
//! shared-center views.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_4;
use core::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::{
    Aabb, DensityBias, FieldConfig, FieldError, FieldGradient, FrozenField, RadianceField,
};
use crate::geometry::{CameraPose, Intrinsics};
use crate::math::Vec3;
use crate::metrics::{evaluate, held_out_poses, EvalReport};
use crate::pose_transform::{
    estimate_view_depth, transform_pose, PoseTransformError, DEFAULT_DEPTH_MARGIN,
};
use crate::prior::{
    CaaProvider, CaaWeights, CompositeProvider, Guidance, NoiseSchedule, NullProvider,
    OracleProvider, OracleRoom, PriorError,
};
use crate::render::{Precision, RenderError, RenderSettings};
use crate::sds::{sds_step, AdamConfig, OptimizerState, SdsError, SdsSettings, SdsStep, Weighting};
use crate::view_schedule::{
    sample_outward_pose, sample_views, timestep_bounds, ScheduleError, Stage, StageConfig,
};

/// Consecutive failed attempts tolerated before a stage gives up.
pub const MAX_CONSECUTIVE_FAILURES: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("stages must be listed in order 1, 2, 3 (slot {slot} holds stage {found})")]
    StageOrder { slot: usize, found: u8 },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("room half-extent must be positive, got {0}")]
    RoomExtent(f64),
    #[error("field bounds must enclose the room")]
    BoundsTooSmall,
    #[error("{key}: {reason}")]
    Value {
        key: &'static str,
        reason: &'static str,
    },
    #[error("all stages are disabled")]
    NothingToRun,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sds(#[from] SdsError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("pipeline state does not match the configured field")]
    StateMismatch,
}

/// Which score sources drive training and how strongly.
#[derive(Clone, Debug, PartialEq)]
pub struct ProviderConfig {
    pub oracle_weight: f64,
    pub caa_weight: f64,
    pub caa_grid: (u32, u32),
    pub caa_radius: usize,
    pub guidance_scale: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            oracle_weight: 1.0,
            caa_weight: 0.0,
            caa_grid: (16, 16),
            caa_radius: 1,
            guidance_scale: 0.0,
        }
    }
}

impl ProviderConfig {
    pub fn build(&self, room: &OracleRoom) -> CompositeProvider {
        let mut p = CompositeProvider::new();
        if self.oracle_weight != 0.0 {
            p = p.with(OracleProvider { room: room.clone() }, self.oracle_weight);
        }
        if self.caa_weight != 0.0 {
            let caa = CaaProvider {
                weights: CaaWeights::identity(3),
                grid: self.caa_grid,
                radius: self.caa_radius,
            };
            p = p.with(caa, self.caa_weight);
        }
        if self.guidance_scale != 0.0 {
            p = p.with_negative(NullProvider);
        }
        p
    }
}

/// Stage switches and the pose-transformation toggle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub run_stages: [bool; 3],
    pub pose_transform: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            run_stages: [true; 3],
            pose_transform: true,
        }
    }
}

impl Ablation {
    pub fn runs(&self, stage: Stage) -> bool {
        self.run_stages[stage.index()]
    }
}

/// Held-out evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    pub count: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0x5eed_e7a1,
            count: 32,
            width: 64,
            height: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub room: OracleRoom,
    pub field: FieldConfig,
    pub render: RenderSettings,
    pub stages: [StageConfig; 3],
    pub provider: ProviderConfig,
    pub weighting: Weighting,
    pub adam: AdamConfig,
    pub prompt: String,
    pub negative_prompt: String,
    pub depth_margin: f64,
    /// Side length of the depth-estimation render in stage 2.
    pub depth_resolution: u32,
    /// Extra checkpoints every this many iterations; 0 for stage ends only.
    pub checkpoint_every: usize,
    pub eval: EvalConfig,
    pub ablation: Ablation,
}

impl PipelineConfig {
    /// Small-budget run in the default oracle room.
    pub fn desk(seed: u64) -> Self {
        let room = OracleRoom::default();
        let h = room.half_extent;
        let intrinsics = Intrinsics::new(FRAC_PI_4, 64, 64).expect("valid default intrinsics");
        let field = FieldConfig {
            density_bias: DensityBias::Shell { strength: 8.0 },
            ..FieldConfig::desk(Aabb::cube(h + 0.25))
        };
        let diagonal = 2.0 * libm::sqrt(3.0) * h;
        let render = RenderSettings::new(64, 0.05, diagonal)
            .expect("valid default render settings")
            .with_precision(Precision::Single)
            .with_transmittance_cutoff(1e-4);
        PipelineConfig {
            seed,
            room,
            field,
            render,
            stages: Stage::ALL.map(|s| StageConfig::desk(s, intrinsics)),
            provider: ProviderConfig::default(),
            weighting: Weighting::SigmaSquared,
            adam: AdamConfig::default(),
            prompt: "an empty room".to_string(),
            negative_prompt: String::new(),
            depth_margin: DEFAULT_DEPTH_MARGIN,
            depth_resolution: 16,
            checkpoint_every: 0,
            eval: EvalConfig::default(),
            ablation: Ablation::default(),
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        &self.stages[stage.index()]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let h = self.room.half_extent;
        if !(h > 0.0) {
            return Err(ConfigError::RoomExtent(h));
        }
        for (slot, (cfg, expected)) in self.stages.iter().zip(Stage::ALL).enumerate() {
            if cfg.stage != expected {
                return Err(ConfigError::StageOrder {
                    slot,
                    found: cfg.stage.number(),
                });
            }
        }
        for cfg in &self.stages {
            cfg.validate(h)?;
        }
        self.field.validate()?;
        let b = &self.field.bounds;
        if !(b.min.max_elem() <= -h && b.max.x.min(b.max.y).min(b.max.z) >= h) {
            return Err(ConfigError::BoundsTooSmall);
        }
        RenderSettings::new(
            self.render.n_samples(),
            self.render.near(),
            self.render.far(),
        )?;
        if !(self.depth_margin >= 0.0) {
            return Err(ConfigError::Value {
                key: "depth_margin",
                reason: "must be non-negative",
            });
        }
        if self.depth_resolution == 0 {
            return Err(ConfigError::Value {
                key: "depth_resolution",
                reason: "must be positive",
            });
        }
        if self.provider.caa_grid.0 == 0 || self.provider.caa_grid.1 == 0 {
            return Err(ConfigError::Value {
                key: "provider.caa_grid",
                reason: "must be positive",
            });
        }
        if !(self.adam.beta1 >= 0.0
            && self.adam.beta1 < 1.0
            && self.adam.beta2 >= 0.0
            && self.adam.beta2 < 1.0)
        {
            return Err(ConfigError::Value {
                key: "adam.beta",
                reason: "betas must lie in [0, 1)",
            });
        }
        if let Weighting::Constant(c) = self.weighting {
            if !(c > 0.0) {
                return Err(ConfigError::Value {
                    key: "weighting",
                    reason: "constant weight must be positive",
                });
            }
        }
        if self.eval.count == 0 || self.eval.width == 0 || self.eval.height == 0 {
            return Err(ConfigError::Value {
                key: "eval",
                reason: "count and size must be positive",
            });
        }
        if !self.ablation.run_stages.iter().any(|&r| r) {
            return Err(ConfigError::NothingToRun);
        }
        Ok(())
    }

    pub fn sds_settings(&self) -> SdsSettings {
        SdsSettings {
            render: self.render,
            weighting: self.weighting,
            noise: NoiseSchedule::Cosine,
            prompt: self.prompt.clone(),
            guidance: Guidance {
                negative_prompt: self.negative_prompt.clone(),
                scale: self.provider.guidance_scale,
            },
        }
    }

    /// First enabled, non-empty stage at or after index `from`.
    fn next_enabled(&self, from: usize) -> Cursor {
        Stage::ALL[from.min(3)..]
            .iter()
            .find(|s| self.ablation.runs(**s) && self.stage(**s).iterations > 0)
            .map_or(Cursor::Finished, |&stage| Cursor::At {
                stage,
                iteration: 0,
            })
    }
}

/// Where a run continues from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cursor {
    At { stage: Stage, iteration: usize },
    Finished,
}

/// Everything that evolves during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineState {
    pub field: RadianceField,
    /// Stage-1 result, used for depth estimation in stage 2.
    pub frozen: Option<FrozenField>,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub cursor: Cursor,
}

impl PipelineState {
    pub fn new(config: &PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let field = RadianceField::initialized(config.field.clone(), rng.random())
            .map_err(ConfigError::from)?;
        let optimizer = OptimizerState::new(&field, config.adam);
        Ok(PipelineState {
            field,
            frozen: None,
            optimizer,
            rng,
            cursor: config.next_enabled(0),
        })
    }
}

/// Callbacks between steps. Returning `Break` stops the run with the state
/// left at the next pending iteration.
pub trait Observer {
    fn on_step(&mut self, _step: &SdsStep, _state: &PipelineState) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_stage_complete(&mut self, _stage: Stage, _state: &PipelineState) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

/// Observer that does nothing.
pub struct Quiet;

impl Observer for Quiet {}

/// Records every step.
#[derive(Default)]
pub struct Recorder {
    pub steps: Vec<SdsStep>,
}

impl Observer for Recorder {
    fn on_step(&mut self, step: &SdsStep, _state: &PipelineState) -> ControlFlow<()> {
        self.steps.push(*step);
        ControlFlow::Continue(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    Finished,
    Stopped,
}

/// Prior-side pose for a stage-2 camera, resampling the camera until the
/// frozen field yields a usable depth.
fn equivalent_pose(
    config: &PipelineConfig,
    stage_cfg: &StageConfig,
    frozen: &RadianceField,
    initial: CameraPose,
    rng: &mut ChaCha8Rng,
) -> Result<(CameraPose, CameraPose), SdsError> {
    let n = config.depth_resolution;
    let depth_intrinsics = stage_cfg
        .intrinsics
        .with_size(n, n)
        .expect("positive depth resolution");
    let mut real = initial;
    let mut failures = 0;
    loop {
        let center = real
            .with_position(Vec3::ZERO)
            .with_intrinsics(depth_intrinsics);
        let sampling = config.render.sampling(rng.random());
        let result = estimate_view_depth(frozen, &center, &sampling)
            .and_then(|d| transform_pose(&real, d, config.depth_margin));
        match result {
            Ok(pair) => return Ok((real, pair.equivalent)),
            Err(
                e @ (PoseTransformError::DegenerateDepth { .. }
                | PoseTransformError::InsufficientOpacity { .. }),
            ) => {
                failures += 1;
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(SdsError::AbortedStage {
                        stage: 2,
                        failures,
                        last: format!("{e}"),
                    });
                }
                real = sample_outward_pose(stage_cfg, rng);
            }
            Err(e) => panic!("depth estimation misconfigured: {e}"),
        }
    }
}

fn assert_routing(real: &CameraPose, prior: &CameraPose) {
    assert!(
        real.position() != Vec3::ZERO,
        "stage-2 render pose must be off-center"
    );
    assert_eq!(
        prior.position(),
        Vec3::ZERO,
        "stage-2 prior pose must sit at the origin"
    );
    assert_eq!(
        prior.rotation(),
        real.rotation(),
        "stage-2 poses must share rotation"
    );
}

/// One accepted iteration, retrying non-finite gradients with fresh samples.
fn run_iteration(
    config: &PipelineConfig,
    settings: &SdsSettings,
    provider: &CompositeProvider,
    state: &mut PipelineState,
    stage: Stage,
    iteration: usize,
    grad: &mut FieldGradient,
) -> Result<SdsStep, PipelineError> {
    let stage_cfg = config.stage(stage);
    let bounds = timestep_bounds(stage_cfg, iteration)?;
    let mut failures = 0;
    loop {
        let mut batch = sample_views(stage_cfg, iteration, &mut state.rng);
        let prior_poses = if stage == Stage::Outward {
            let frozen = state
                .frozen
                .as_ref()
                .expect("frozen field exists in stage 2");
            let mut priors = Vec::with_capacity(batch.poses.len());
            for pose in batch.poses.iter_mut() {
                let prior = if config.ablation.pose_transform {
                    let (real, prior) =
                        equivalent_pose(config, stage_cfg, frozen, *pose, &mut state.rng)?;
                    *pose = real;
                    prior
                } else {
                    pose.with_position(Vec3::ZERO)
                };
                assert_routing(pose, &prior);
                priors.push(prior);
            }
            priors
        } else {
            batch.poses.clone()
        };
        match sds_step(
            &mut state.field,
            &batch,
            &prior_poses,
            provider,
            settings,
            bounds,
            &mut state.optimizer,
            &mut state.rng,
            grad,
        ) {
            Ok(step) => return Ok(step),
            Err(e @ SdsError::NonFiniteGradient { .. }) => {
                failures += 1;
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    let last = format!("{e}");
                    return Err(SdsError::AbortedStage {
                        stage: stage.number(),
                        failures,
                        last,
                    }
                    .into());
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Continues `state` from its cursor until every enabled stage is done or
/// the observer asks to stop.
pub fn run(
    config: &PipelineConfig,
    state: &mut PipelineState,
    observer: &mut dyn Observer,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    if state.field.config() != &config.field
        || state.optimizer.first.len() != state.field.param_count()
    {
        return Err(PipelineError::StateMismatch);
    }
    let settings = config.sds_settings();
    let provider = config.provider.build(&config.room);
    let mut grad = state.field.gradient_buffer();
    while let Cursor::At { stage, iteration } = state.cursor {
        let stage_cfg = config.stage(stage);
        if iteration == 0 {
            state.optimizer.reset();
            if stage == Stage::Outward && state.frozen.is_none() {
                state.frozen = Some(state.field.freeze_copy());
            }
        }
        let step = run_iteration(
            config, &settings, &provider, state, stage, iteration, &mut grad,
        )?;
        let done = iteration + 1 == stage_cfg.iterations;
        state.cursor = if done {
            config.next_enabled(stage.index() + 1)
        } else {
            Cursor::At {
                stage,
                iteration: iteration + 1,
            }
        };
        let mut flow = observer.on_step(&step, state);
        if done {
            flow = match flow {
                ControlFlow::Continue(()) => observer.on_stage_complete(stage, state),
                brk => brk,
            };
        }
        if flow.is_break() {
            return Ok(if state.cursor == Cursor::Finished {
                RunOutcome::Finished
            } else {
                RunOutcome::Stopped
            });
        }
    }
    Ok(RunOutcome::Finished)
}

/// The configured held-out pose set.
pub fn held_out_set(config: &PipelineConfig) -> Vec<CameraPose> {
    let s3 = config.stage(Stage::SharedCenter);
    let e = config.eval;
    let intrinsics = s3
        .intrinsics
        .with_size(e.width, e.height)
        .expect("validated eval size");
    held_out_poses(
        e.seed,
        e.count,
        s3.position_radius,
        s3.pitch_range,
        intrinsics,
    )
}

/// Metrics of `field` over the held-out set against the configured room.
pub fn evaluate_held_out(
    config: &PipelineConfig,
    field: &RadianceField,
) -> Result<EvalReport, PriorError> {
    evaluate(field, &config.room, &config.render, &held_out_set(config))
}
