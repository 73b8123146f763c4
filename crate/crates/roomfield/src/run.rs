//! The `generate`, `render` and `eval` commands as library calls.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use roomfield_core::pipeline::{
    self, ConfigError, Observer, PipelineError, PipelineState, RunOutcome,
};
use roomfield_core::prior::PriorError;
use roomfield_core::sds::{SdsError, SdsStep};
use roomfield_core::view_schedule::Stage;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{ConfigFileError, RunConfig};
use crate::export::{self, ExportError, PoseSpec};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigFileError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] PriorError),
    #[error("{0} is locked by another run")]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.into())
    }
}

impl RunError {
    /// 2 configuration, 3 aborted stage, 4 corrupt checkpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Pipeline(PipelineError::Config(_)) => 2,
            RunError::Pipeline(PipelineError::Sds(SdsError::AbortedStage { .. })) => 3,
            RunError::Checkpoint(CheckpointError::Io(_)) => 1,
            RunError::Checkpoint(CheckpointError::Config(_)) | RunError::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}

/// Exclusive ownership of a run directory for the lifetime of the value.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(RunError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub const DIAGNOSTICS_HEADER: &str = "iter\tstage\tt\tomega\tresidual_norm\tgrad_norm\twall_ms";

/// One tab-separated diagnostics line. Every column but `wall_ms` is a pure
/// function of config and seed.
pub fn diagnostics_line(step: &SdsStep, wall_ms: f64) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
        step.iteration,
        step.stage.number(),
        step.t,
        step.omega,
        step.residual_norm,
        step.grad_norm,
        wall_ms
    )
}

/// Drops the trailing `wall_ms` column.
pub fn deterministic_part(line: &str) -> &str {
    line.rsplit_once('\t').map_or(line, |(head, _)| head)
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn stage_checkpoint(out: &Path, stage: Stage) -> PathBuf {
    checkpoint_dir(out).join(format!("stage{}.ckpt", stage.number()))
}

pub fn final_checkpoint(out: &Path) -> PathBuf {
    checkpoint_dir(out).join("final.ckpt")
}

pub fn diagnostics_path(out: &Path) -> PathBuf {
    out.join("diagnostics.tsv")
}

struct RunObserver<'a> {
    config: &'a RunConfig,
    out: &'a Path,
    diagnostics: BufWriter<File>,
    last: Instant,
    error: Option<RunError>,
}

impl RunObserver<'_> {
    fn attempt(&mut self, r: Result<(), RunError>) -> ControlFlow<()> {
        match r {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                self.error = Some(e);
                ControlFlow::Break(())
            }
        }
    }
}

impl Observer for RunObserver<'_> {
    fn on_step(&mut self, step: &SdsStep, state: &PipelineState) -> ControlFlow<()> {
        let now = Instant::now();
        let wall_ms = now.duration_since(self.last).as_secs_f64() * 1e3;
        self.last = now;
        let line = diagnostics_line(step, wall_ms);
        let mut r = writeln!(self.diagnostics, "{line}").map_err(RunError::from);
        let every = self.config.pipeline.checkpoint_every;
        let done = step.iteration + 1;
        if r.is_ok()
            && every > 0
            && done % every == 0
            && done < self.config.pipeline.stage(step.stage).iterations
        {
            let name = format!("stage{}-iter{done:06}.ckpt", step.stage.number());
            r = self
                .diagnostics
                .flush()
                .map_err(RunError::from)
                .and_then(|_| {
                    Ok(checkpoint::save(
                        &checkpoint_dir(self.out).join(name),
                        self.config,
                        state,
                    )?)
                });
        }
        self.attempt(r)
    }

    fn on_stage_complete(&mut self, stage: Stage, state: &PipelineState) -> ControlFlow<()> {
        let r = self
            .diagnostics
            .flush()
            .map_err(RunError::from)
            .and_then(|_| {
                Ok(checkpoint::save(
                    &stage_checkpoint(self.out, stage),
                    self.config,
                    state,
                )?)
            });
        self.attempt(r)
    }
}

/// What a finished `generate` left behind.
#[derive(Debug)]
pub struct GenerateReport {
    pub final_checkpoint: PathBuf,
    pub exported: Vec<PathBuf>,
}

/// Runs (or resumes) training in `out`, writing diagnostics, checkpoints at
/// stage ends and the configured cadence, a final checkpoint and turntable
/// frames at the origin.
pub fn generate(
    config: &RunConfig,
    resume: Option<PipelineState>,
    out: &Path,
) -> Result<GenerateReport, RunError> {
    config.validate()?;
    std::fs::create_dir_all(checkpoint_dir(out))?;
    let _lock = DirLock::acquire(out)?;
    let mut state = match resume {
        Some(state) => state,
        None => PipelineState::new(&config.pipeline)?,
    };
    let diag_path = diagnostics_path(out);
    let fresh = !diag_path.exists();
    let mut diagnostics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&diag_path)?,
    );
    if fresh {
        writeln!(diagnostics, "{DIAGNOSTICS_HEADER}")?;
    }
    let mut observer = RunObserver {
        config,
        out,
        diagnostics,
        last: Instant::now(),
        error: None,
    };
    let outcome = pipeline::run(&config.pipeline, &mut state, &mut observer);
    observer.diagnostics.flush()?;
    if let Some(e) = observer.error {
        return Err(e);
    }
    let outcome = outcome?;
    debug_assert_eq!(outcome, RunOutcome::Finished);
    let final_path = final_checkpoint(out);
    checkpoint::save(&final_path, config, &state)?;

    let mut exported = Vec::new();
    if config.export_frames > 0 {
        let spec = PoseSpec::Turntable {
            frames: config.export_frames,
            radius: 0.0,
            pitch_deg: 0.0,
        };
        exported = render_spec(config, &state, &spec, &out.join("renders"))?;
    }
    Ok(GenerateReport {
        final_checkpoint: final_path,
        exported,
    })
}

fn render_spec(
    config: &RunConfig,
    state: &PipelineState,
    spec: &PoseSpec,
    dir: &Path,
) -> Result<Vec<PathBuf>, RunError> {
    let intrinsics = config
        .pipeline
        .stage(Stage::Origin)
        .intrinsics
        .with_size(config.export_width, config.export_height);
    let intrinsics = intrinsics.map_err(|_| ConfigError::Value {
        key: "export.size",
        reason: "must be positive",
    })?;
    let poses = spec.poses(intrinsics);
    let outputs = export::render_frames(
        &state.field,
        &config.pipeline.render,
        &poses,
        export::thread_count(),
    );
    Ok(export::write_frames(dir, &outputs)?)
}

/// Renders a checkpoint at `spec` into `dir`.
pub fn render(
    checkpoint_path: &Path,
    spec: &PoseSpec,
    dir: &Path,
) -> Result<Vec<PathBuf>, RunError> {
    let Checkpoint { config, state } = checkpoint::load(checkpoint_path)?;
    render_spec(&config, &state, spec, dir)
}

/// Held-out metrics as `key=value` text.
pub fn eval_report(checkpoint: &Checkpoint) -> Result<String, RunError> {
    let report = pipeline::evaluate_held_out(&checkpoint.config.pipeline, &checkpoint.state.field)?;
    let mut text = format!(
        "mean_psnr={}\ndepth_rms={}\nreprojection_error={}\nviews={}\n",
        report.mean_psnr,
        report.depth_rms,
        report.reprojection_error,
        report.psnr_per_view.len()
    );
    for (k, p) in report.psnr_per_view.iter().enumerate() {
        text.push_str(&format!("psnr.{k}={p}\n"));
    }
    Ok(text)
}

pub fn eval(checkpoint_path: &Path, out: &Path) -> Result<String, RunError> {
    let text = eval_report(&checkpoint::load(checkpoint_path)?)?;
    std::fs::write(out, &text)?;
    Ok(text)
}
