//! Flat `key=value` configuration text.
//!
//! Keys use dotted prefixes (`stage2.position_radius=0.7`). Missing keys keep
//! their desk defaults, unknown or repeated keys are errors. [`format`]
//! writes every key in a fixed order and is the canonical form stored in
//! checkpoints; `parse(format(c)) == c` holds exactly.

use std::fmt::Write as _;

use roomfield_core::field::{Aabb, DensityBias};
use roomfield_core::geometry::Intrinsics;
use roomfield_core::math::Vec3;
use roomfield_core::pipeline::{ConfigError, PipelineConfig};
use roomfield_core::render::{Precision, RenderSettings};
use roomfield_core::sds::Weighting;
use roomfield_core::view_schedule::{Anneal, Stage};

#[derive(Debug, thiserror::Error)]
pub enum ConfigFileError {
    #[error("line {line}: expected `key=value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` is set twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: `{key}` expects {expected}, got `{value}`")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(#[from] ConfigError),
    #[error("cannot read configuration: {0}")]
    Io(#[from] std::io::Error),
}

/// Pipeline settings plus export settings the core does not know about.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    /// Turntable frames written when a run finishes; 0 disables export.
    pub export_frames: usize,
    pub export_width: u32,
    pub export_height: u32,
}

impl RunConfig {
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            pipeline: PipelineConfig::desk(seed),
            export_frames: 8,
            export_width: 256,
            export_height: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline.validate()?;
        if self.export_width == 0 || self.export_height == 0 {
            return Err(ConfigError::Value {
                key: "export.size",
                reason: "must be positive",
            });
        }
        Ok(())
    }
}

fn vec3(v: Vec3) -> String {
    format!("{},{},{}", v.x, v.y, v.z)
}

fn anneal(a: Anneal) -> String {
    match a {
        Anneal::Linear => "linear".into(),
        Anneal::Step { num, den } => format!("step:{num}/{den}"),
    }
}

/// Canonical text of `config`.
pub fn format(config: &RunConfig) -> String {
    let c = &config.pipeline;
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
    put("seed", c.seed.to_string());
    put("prompt", c.prompt.clone());
    put("negative_prompt", c.negative_prompt.clone());

    put("room.half_extent", c.room.half_extent.to_string());
    put(
        "room.pattern_amplitude",
        c.room.pattern_amplitude.to_string(),
    );
    put("room.pattern_period", c.room.pattern_period.to_string());
    for (k, color) in c.room.palette.iter().enumerate() {
        put(&format!("room.palette.{k}"), vec3(*color));
    }

    let f = &c.field;
    put("field.levels", f.levels.to_string());
    put("field.table_size_log2", f.table_size_log2.to_string());
    put("field.feature_dim", f.feature_dim.to_string());
    put("field.base_resolution", f.base_resolution.to_string());
    put("field.max_resolution", f.max_resolution.to_string());
    put("field.hidden_width", f.hidden_width.to_string());
    put("field.bounds_min", vec3(f.bounds.min));
    put("field.bounds_max", vec3(f.bounds.max));
    put(
        "field.density_bias",
        match f.density_bias {
            DensityBias::None => "none".into(),
            DensityBias::Shell { strength } => format!("shell:{strength}"),
        },
    );

    let r = &c.render;
    put("render.n_samples", r.n_samples().to_string());
    put("render.near", r.near().to_string());
    put("render.far", r.far().to_string());
    put("render.stratified", r.stratified().to_string());
    put("render.background", vec3(r.background()));
    put(
        "render.transmittance_cutoff",
        r.transmittance_cutoff().to_string(),
    );
    put(
        "render.precision",
        match r.precision() {
            Precision::Single => "single".into(),
            Precision::Double => "double".into(),
        },
    );

    for st in &c.stages {
        let p = format!("stage{}", st.stage.number());
        put(&format!("{p}.iterations"), st.iterations.to_string());
        put(
            &format!("{p}.views_per_iteration"),
            st.views_per_iteration.to_string(),
        );
        put(
            &format!("{p}.position_radius"),
            st.position_radius.to_string(),
        );
        put(&format!("{p}.min_radius"), st.min_radius.to_string());
        put(&format!("{p}.pitch_range"), st.pitch_range.to_string());
        put(
            &format!("{p}.t_max"),
            format!("{},{}", st.schedule.t_max.0, st.schedule.t_max.1),
        );
        put(
            &format!("{p}.t_min"),
            format!("{},{}", st.schedule.t_min.0, st.schedule.t_min.1),
        );
        put(&format!("{p}.anneal"), anneal(st.schedule.anneal));
        put(
            &format!("{p}.half_fov"),
            st.intrinsics.half_fov().to_string(),
        );
        put(&format!("{p}.width"), st.intrinsics.width().to_string());
        put(&format!("{p}.height"), st.intrinsics.height().to_string());
    }

    let pr = &c.provider;
    put("provider.oracle_weight", pr.oracle_weight.to_string());
    put("provider.caa_weight", pr.caa_weight.to_string());
    put(
        "provider.caa_grid",
        format!("{}x{}", pr.caa_grid.0, pr.caa_grid.1),
    );
    put("provider.caa_radius", pr.caa_radius.to_string());
    put("provider.guidance_scale", pr.guidance_scale.to_string());

    put(
        "weighting",
        match c.weighting {
            Weighting::SigmaSquared => "sigma_squared".into(),
            Weighting::Constant(w) => format!("constant:{w}"),
        },
    );
    put("adam.lr_grid", c.adam.lr_grid.to_string());
    put("adam.lr_decoder", c.adam.lr_decoder.to_string());
    put("adam.beta1", c.adam.beta1.to_string());
    put("adam.beta2", c.adam.beta2.to_string());
    put("adam.epsilon", c.adam.epsilon.to_string());

    put("depth_margin", c.depth_margin.to_string());
    put("depth_resolution", c.depth_resolution.to_string());
    put("checkpoint_every", c.checkpoint_every.to_string());

    put("eval.seed", c.eval.seed.to_string());
    put("eval.count", c.eval.count.to_string());
    put("eval.width", c.eval.width.to_string());
    put("eval.height", c.eval.height.to_string());

    put("export.frames", config.export_frames.to_string());
    put("export.width", config.export_width.to_string());
    put("export.height", config.export_height.to_string());

    let stages: String = Stage::ALL
        .iter()
        .filter(|s| c.ablation.runs(**s))
        .map(|s| char::from(b'0' + s.number()))
        .collect();
    put("ablation.stages", stages);
    put(
        "ablation.pose_transform",
        c.ablation.pose_transform.to_string(),
    );
    s
}

struct Line<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Line<'_> {
    fn bad(&self, expected: &'static str) -> ConfigFileError {
        ConfigFileError::BadValue {
            line: self.line,
            key: self.key.into(),
            value: self.value.into(),
            expected,
        }
    }

    fn num<T: std::str::FromStr>(&self, expected: &'static str) -> Result<T, ConfigFileError> {
        self.value.trim().parse().map_err(|_| self.bad(expected))
    }

    fn real(&self) -> Result<f64, ConfigFileError> {
        self.num("a number")
    }

    fn list(&self, n: usize) -> Result<Vec<f64>, ConfigFileError> {
        let expected = if n == 2 {
            "two comma-separated numbers"
        } else {
            "three comma-separated numbers"
        };
        let parts: Vec<&str> = self.value.split(',').collect();
        if parts.len() != n {
            return Err(self.bad(expected));
        }
        parts
            .iter()
            .map(|p| p.trim().parse().map_err(|_| self.bad(expected)))
            .collect()
    }

    fn vec3(&self) -> Result<Vec3, ConfigFileError> {
        let v = self.list(3)?;
        Ok(Vec3::new(v[0], v[1], v[2]))
    }

    fn pair(&self) -> Result<(f64, f64), ConfigFileError> {
        let v = self.list(2)?;
        Ok((v[0], v[1]))
    }

    fn flag(&self) -> Result<bool, ConfigFileError> {
        self.num("true or false")
    }
}

/// Applies one key to `config`.
fn apply(config: &mut RunConfig, l: &Line<'_>) -> Result<(), ConfigFileError> {
    let c = &mut config.pipeline;
    let unknown = || ConfigFileError::UnknownKey {
        line: l.line,
        key: l.key.into(),
    };
    match l.key {
        "seed" => c.seed = l.num("an unsigned integer")?,
        "prompt" => c.prompt = l.value.to_string(),
        "negative_prompt" => c.negative_prompt = l.value.to_string(),
        "room.half_extent" => c.room.half_extent = l.real()?,
        "room.pattern_amplitude" => c.room.pattern_amplitude = l.real()?,
        "room.pattern_period" => c.room.pattern_period = l.real()?,
        "field.levels" => c.field.levels = l.num("an unsigned integer")?,
        "field.table_size_log2" => c.field.table_size_log2 = l.num("an unsigned integer")?,
        "field.feature_dim" => c.field.feature_dim = l.num("an unsigned integer")?,
        "field.base_resolution" => c.field.base_resolution = l.num("an unsigned integer")?,
        "field.max_resolution" => c.field.max_resolution = l.num("an unsigned integer")?,
        "field.hidden_width" => c.field.hidden_width = l.num("an unsigned integer")?,
        "field.bounds_min" => c.field.bounds = Aabb::new(l.vec3()?, c.field.bounds.max),
        "field.bounds_max" => c.field.bounds = Aabb::new(c.field.bounds.min, l.vec3()?),
        "field.density_bias" => {
            c.field.density_bias = match l.value.trim() {
                "none" => DensityBias::None,
                v => {
                    let strength = v.strip_prefix("shell:").and_then(|s| s.parse().ok());
                    DensityBias::Shell {
                        strength: strength.ok_or_else(|| l.bad("`none` or `shell:<strength>`"))?,
                    }
                }
            }
        }
        "render.stratified" => c.render = c.render.with_stratified(l.flag()?),
        "render.background" => c.render = c.render.with_background(l.vec3()?),
        "render.transmittance_cutoff" => c.render = c.render.with_transmittance_cutoff(l.real()?),
        "render.precision" => {
            let p = match l.value.trim() {
                "single" => Precision::Single,
                "double" => Precision::Double,
                _ => return Err(l.bad("`single` or `double`")),
            };
            c.render = c.render.with_precision(p);
        }
        "weighting" => {
            c.weighting = match l.value.trim() {
                "sigma_squared" => Weighting::SigmaSquared,
                v => Weighting::Constant(
                    v.strip_prefix("constant:")
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| l.bad("`sigma_squared` or `constant:<w>`"))?,
                ),
            }
        }
        "provider.oracle_weight" => c.provider.oracle_weight = l.real()?,
        "provider.caa_weight" => c.provider.caa_weight = l.real()?,
        "provider.caa_grid" => {
            let (w, h) = l
                .value
                .trim()
                .split_once('x')
                .ok_or_else(|| l.bad("`<w>x<h>`"))?;
            c.provider.caa_grid = (
                w.parse().map_err(|_| l.bad("`<w>x<h>`"))?,
                h.parse().map_err(|_| l.bad("`<w>x<h>`"))?,
            );
        }
        "provider.caa_radius" => c.provider.caa_radius = l.num("an unsigned integer")?,
        "provider.guidance_scale" => c.provider.guidance_scale = l.real()?,
        "adam.lr_grid" => c.adam.lr_grid = l.real()?,
        "adam.lr_decoder" => c.adam.lr_decoder = l.real()?,
        "adam.beta1" => c.adam.beta1 = l.real()?,
        "adam.beta2" => c.adam.beta2 = l.real()?,
        "adam.epsilon" => c.adam.epsilon = l.real()?,
        "depth_margin" => c.depth_margin = l.real()?,
        "depth_resolution" => c.depth_resolution = l.num("an unsigned integer")?,
        "checkpoint_every" => c.checkpoint_every = l.num("an unsigned integer")?,
        "eval.seed" => c.eval.seed = l.num("an unsigned integer")?,
        "eval.count" => c.eval.count = l.num("an unsigned integer")?,
        "eval.width" => c.eval.width = l.num("an unsigned integer")?,
        "eval.height" => c.eval.height = l.num("an unsigned integer")?,
        "export.frames" => config.export_frames = l.num("an unsigned integer")?,
        "export.width" => config.export_width = l.num("an unsigned integer")?,
        "export.height" => config.export_height = l.num("an unsigned integer")?,
        "ablation.stages" => {
            c.ablation.run_stages =
                parse_stage_set(l.value.trim()).ok_or_else(|| l.bad("digits from `123`"))?
        }
        "ablation.pose_transform" => c.ablation.pose_transform = l.flag()?,
        key => {
            if let Some(k) = key.strip_prefix("room.palette.") {
                let k: usize = k.parse().map_err(|_| unknown())?;
                if k >= 6 {
                    return Err(unknown());
                }
                c.room.palette[k] = l.vec3()?;
                return Ok(());
            }
            let (prefix, field) = key.split_once('.').ok_or_else(unknown)?;
            let stage = match prefix {
                "stage1" => Stage::Origin,
                "stage2" => Stage::Outward,
                "stage3" => Stage::SharedCenter,
                _ => return Err(unknown()),
            };
            let st = &mut c.stages[stage.index()];
            match field {
                "iterations" => st.iterations = l.num("an unsigned integer")?,
                "views_per_iteration" => st.views_per_iteration = l.num("an unsigned integer")?,
                "position_radius" => st.position_radius = l.real()?,
                "min_radius" => st.min_radius = l.real()?,
                "pitch_range" => st.pitch_range = l.real()?,
                "t_max" => st.schedule.t_max = l.pair()?,
                "t_min" => st.schedule.t_min = l.pair()?,
                "anneal" => {
                    st.schedule.anneal = parse_anneal(l.value.trim())
                        .ok_or_else(|| l.bad("`linear` or `step:<num>/<den>`"))?
                }
                "half_fov" => {
                    let i = st.intrinsics;
                    st.intrinsics = Intrinsics::new(l.real()?, i.width(), i.height())
                        .map_err(|_| l.bad("an angle in (0, pi/2)"))?;
                }
                "width" => {
                    st.intrinsics = st
                        .intrinsics
                        .with_size(l.num("a positive integer")?, st.intrinsics.height())
                        .map_err(|_| l.bad("a positive integer"))?
                }
                "height" => {
                    st.intrinsics = st
                        .intrinsics
                        .with_size(st.intrinsics.width(), l.num("a positive integer")?)
                        .map_err(|_| l.bad("a positive integer"))?
                }
                _ => return Err(unknown()),
            }
        }
    }
    Ok(())
}

fn parse_anneal(v: &str) -> Option<Anneal> {
    if v == "linear" {
        return Some(Anneal::Linear);
    }
    let (num, den) = v.strip_prefix("step:")?.split_once('/')?;
    Some(Anneal::Step {
        num: num.parse().ok()?,
        den: den.parse().ok()?,
    })
}

/// `"13"` → stages 1 and 3 enabled.
pub fn parse_stage_set(v: &str) -> Option<[bool; 3]> {
    let mut on = [false; 3];
    for ch in v.chars() {
        let stage = Stage::from_number(ch.to_digit(10)? as u8)?;
        if std::mem::replace(&mut on[stage.index()], true) {
            return None;
        }
    }
    Some(on)
}

/// Parses and validates configuration text on top of the desk defaults.
pub fn parse(text: &str) -> Result<RunConfig, ConfigFileError> {
    let mut config = RunConfig::desk(0);
    let mut seen = std::collections::HashSet::new();
    let r = config.pipeline.render;
    // Sample count and range are only checked together, once all lines are in.
    let mut extent = (r.n_samples(), r.near(), r.far());
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let trimmed = raw.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or(ConfigFileError::Syntax { line })?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(ConfigFileError::DuplicateKey {
                line,
                key: key.into(),
            });
        }
        let l = Line { line, key, value };
        match key {
            "render.n_samples" => extent.0 = l.num("an unsigned integer")?,
            "render.near" => extent.1 = l.real()?,
            "render.far" => extent.2 = l.real()?,
            _ => apply(&mut config, &l)?,
        }
    }
    let r = config.pipeline.render;
    config.pipeline.render = RenderSettings::new(extent.0, extent.1, extent.2)
        .map_err(ConfigError::from)?
        .with_stratified(r.stratified())
        .with_background(r.background())
        .with_transmittance_cutoff(r.transmittance_cutoff())
        .with_precision(r.precision());
    config.validate()?;
    Ok(config)
}

pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigFileError> {
    parse(&std::fs::read_to_string(path)?)
}
