//! Multi-resolution hash-grid radiance field with a two-hidden-layer decoder.
//!
//! Parameter layout (one flat `f32` vector, in this order):
//!
//! 1. grid tables, level-major; level `l` holds `entries(l)` rows of
//!    `feature_dim` values. Coarse levels whose vertex lattice fits in the
//!    table are addressed densely, the rest through the spatial hash
//!    `(x * 1) ^ (y * 2654435761) ^ (z * 805459861)` in wrapping `u32`
//!    arithmetic, masked to the power-of-two table size.
//! 2. decoder, all weights stored input-major (`w[k * outputs + j]` connects
//!    input `k` to output `j`): `w1`, `b1`, `w2`, `b2`, `w3`, `b3`. The four
//!    outputs are raw density followed by raw red, green, blue.
//!
//! Density is `softplus(raw + bias(x))`, color is `logistic(raw)`. Color does
//! not depend on view direction.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Ray;
use crate::math::{Real, Vec3};

const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
const DECODER_OUTPUTS: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("field needs at least one level")]
    NoLevels,
    #[error("level resolutions must strictly increase, got {0:?}")]
    ResolutionsNotIncreasing(Vec<u32>),
    #[error("table size 2^{0} is outside the supported range 2^4..=2^24")]
    TableSize(u32),
    #[error("feature_dim and hidden_width must be non-zero")]
    EmptyLayer,
    #[error("field bounds are empty or non-finite")]
    Bounds,
    #[error("parameter vector has {got} entries, layout needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    /// Cube centered at the origin.
    pub fn cube(half_extent: f64) -> Self {
        Aabb::new(Vec3::splat(-half_extent), Vec3::splat(half_extent))
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Parametric interval `[t0, t1]` of the ray inside the box.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let o = ray.origin[axis];
            let d = ray.direction[axis];
            let (lo, hi) = (self.min[axis], self.max[axis]);
            if d == 0.0 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let a = (lo - o) / d;
            let b = (hi - o) / d;
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(near);
            t1 = t1.min(far);
        }
        (t0 <= t1).then_some((t0, t1))
    }

    fn is_valid(&self) -> bool {
        let s = self.size();
        self.min.is_finite() && self.max.is_finite() && s.x > 0.0 && s.y > 0.0 && s.z > 0.0
    }
}

/// Position-dependent offset added to raw density before the activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DensityBias {
    None,
    /// `strength * (s - 1)` with `s` the normalized Chebyshev distance from
    /// the box center (0 at the center, 1 on the boundary). Favors matter
    /// near the enclosing walls, which is where an inside-out room lives.
    Shell {
        strength: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    pub levels: usize,
    pub table_size_log2: u32,
    pub feature_dim: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub hidden_width: usize,
    pub bounds: Aabb,
    pub density_bias: DensityBias,
}

impl FieldConfig {
    /// 8 levels, 2^14 entries of 2 features, resolutions 16..256, 2x32 decoder.
    pub fn desk(bounds: Aabb) -> Self {
        FieldConfig {
            levels: 8,
            table_size_log2: 14,
            feature_dim: 2,
            base_resolution: 16,
            max_resolution: 256,
            hidden_width: 32,
            bounds,
            density_bias: DensityBias::None,
        }
    }

    /// Level resolutions: geometric progression from base to max, rounded.
    pub fn level_resolutions(&self) -> Vec<u32> {
        if self.levels == 1 {
            return vec![self.base_resolution];
        }
        let base = self.base_resolution as f64;
        let growth =
            libm::exp(libm::log(self.max_resolution as f64 / base) / (self.levels - 1) as f64);
        (0..self.levels)
            .map(|l| libm::round(base * libm::pow(growth, l as f64)) as u32)
            .collect()
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.levels == 0 {
            return Err(FieldError::NoLevels);
        }
        if !(4..=24).contains(&self.table_size_log2) {
            return Err(FieldError::TableSize(self.table_size_log2));
        }
        if self.feature_dim == 0 || self.hidden_width == 0 {
            return Err(FieldError::EmptyLayer);
        }
        if !self.bounds.is_valid() {
            return Err(FieldError::Bounds);
        }
        let res = self.level_resolutions();
        if res[0] == 0 || res.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FieldError::ResolutionsNotIncreasing(res));
        }
        Ok(())
    }

    pub fn encoding_width(&self) -> usize {
        self.levels * self.feature_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Level {
    resolution: u32,
    /// Offset of the level's first feature value in the parameter vector.
    offset: usize,
    entries: usize,
    dense: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    levels: Vec<Level>,
    grid_len: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &FieldConfig) -> Self {
        let table = 1usize << cfg.table_size_log2;
        let mut offset = 0;
        let mut levels = Vec::with_capacity(cfg.levels);
        for resolution in cfg.level_resolutions() {
            let lattice = (resolution as usize + 1).pow(3);
            let dense = lattice <= table;
            let entries = if dense { lattice } else { table };
            levels.push(Level {
                resolution,
                offset,
                entries,
                dense,
            });
            offset += entries * cfg.feature_dim;
        }
        let grid_len = offset;
        let (enc, h) = (cfg.encoding_width(), cfg.hidden_width);
        let w1 = grid_len;
        let b1 = w1 + enc * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h * DECODER_OUTPUTS;
        let total = b3 + DECODER_OUTPUTS;
        Layout {
            levels,
            grid_len,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total,
        }
    }
}

/// Density (1/m) and linear RGB color at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldSample {
    pub density: f64,
    pub color: Vec3,
}

/// Upstream derivative of a scalar loss with respect to one [`FieldSample`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleGradient {
    pub density: f64,
    pub color: Vec3,
}

/// Gradient accumulator congruent with the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradient {
    values: Vec<f64>,
}

impl FieldGradient {
    pub fn zeros(len: usize) -> Self {
        FieldGradient {
            values: vec![0.0; len],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn reset(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add(&mut self, other: &FieldGradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Intermediate values of one point evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PointTrace<F: Real = f64> {
    inside: bool,
    corner_index: Vec<u32>,
    corner_weight: Vec<F>,
    enc: Vec<F>,
    h1: Vec<F>,
    h2: Vec<F>,
    biased_density: f64,
    sample: FieldSample,
}

impl<F: Real> PointTrace<F> {
    pub fn new(cfg: &FieldConfig) -> Self {
        PointTrace {
            inside: false,
            corner_index: vec![0; cfg.levels * 8],
            corner_weight: vec![F::ZERO; cfg.levels * 8],
            enc: vec![F::ZERO; cfg.encoding_width()],
            h1: vec![F::ZERO; cfg.hidden_width],
            h2: vec![F::ZERO; cfg.hidden_width],
            biased_density: 0.0,
            sample: FieldSample::default(),
        }
    }

    pub fn sample(&self) -> FieldSample {
        self.sample
    }
}

/// Scratch space for [`RadianceField::backward`]. Decoder gradients collect
/// here in the evaluation precision until [`BackwardScratch::flush`] adds
/// them to a [`FieldGradient`].
#[derive(Clone, Debug)]
pub struct BackwardScratch<F: Real = f64> {
    dh1: Vec<F>,
    dh2: Vec<F>,
    denc: Vec<F>,
    decoder: Vec<F>,
    decoder_offset: usize,
    dirty: bool,
}

impl<F: Real> BackwardScratch<F> {
    pub fn new(field: &RadianceField) -> Self {
        let cfg = &field.config;
        BackwardScratch {
            dh1: vec![F::ZERO; cfg.hidden_width],
            dh2: vec![F::ZERO; cfg.hidden_width],
            denc: vec![F::ZERO; cfg.encoding_width()],
            decoder: vec![F::ZERO; field.layout.total - field.layout.grid_len],
            decoder_offset: field.layout.grid_len,
            dirty: false,
        }
    }

    pub fn flush(&mut self, grad: &mut FieldGradient) {
        if !self.dirty {
            return;
        }
        for (g, d) in grad.values[self.decoder_offset..]
            .iter_mut()
            .zip(self.decoder.iter_mut())
        {
            *g += d.to_f64();
            *d = F::ZERO;
        }
        self.dirty = false;
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        libm::log1p(libm::exp(z))
    }
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

#[cfg(test)]
fn hash_vertex(x: u32, y: u32, z: u32, mask: u32) -> u32 {
    (x.wrapping_mul(HASH_PRIMES[0])
        ^ y.wrapping_mul(HASH_PRIMES[1])
        ^ z.wrapping_mul(HASH_PRIMES[2]))
        & mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    layout: Layout,
    params: Vec<f32>,
}

impl RadianceField {
    /// Field with every parameter zero.
    pub fn zeroed(config: FieldConfig) -> Result<Self, FieldError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total];
        Ok(RadianceField {
            config,
            layout,
            params,
        })
    }

    /// Grid features uniform in `[-1e-4, 1e-4]`, decoder weights Xavier-uniform,
    /// decoder biases zero.
    pub fn initialized(config: FieldConfig, seed: u64) -> Result<Self, FieldError> {
        let mut field = RadianceField::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut field.params[..field.layout.grid_len] {
            *p = rng.random_range(-1e-4f32..1e-4f32);
        }
        let (enc, h) = (field.config.encoding_width(), field.config.hidden_width);
        let l = field.layout.clone();
        for (start, fan_in, fan_out) in [(l.w1, enc, h), (l.w2, h, h), (l.w3, h, DECODER_OUTPUTS)] {
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64) as f32;
            for p in &mut field.params[start..start + fan_in * fan_out] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(field)
    }

    pub fn from_params(config: FieldConfig, params: Vec<f32>) -> Result<Self, FieldError> {
        let mut field = RadianceField::zeroed(config)?;
        if params.len() != field.layout.total {
            return Err(FieldError::ParamCount {
                expected: field.layout.total,
                got: params.len(),
            });
        }
        field.params = params;
        Ok(field)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Number of leading parameters that belong to the grid tables.
    pub fn grid_param_count(&self) -> usize {
        self.layout.grid_len
    }

    /// Index of the raw density output bias (handy for constructing fields).
    pub fn density_bias_index(&self) -> usize {
        self.layout.b3
    }

    /// Indices of the raw color output biases.
    pub fn color_bias_indices(&self) -> [usize; 3] {
        [self.layout.b3 + 1, self.layout.b3 + 2, self.layout.b3 + 3]
    }

    /// Parameter block boundaries: one range per grid level, then the six
    /// decoder blocks.
    pub fn param_blocks(&self) -> Vec<core::ops::Range<usize>> {
        let f = self.config.feature_dim;
        let mut blocks: Vec<_> = self
            .layout
            .levels
            .iter()
            .map(|lv| lv.offset..lv.offset + lv.entries * f)
            .collect();
        let l = &self.layout;
        blocks.extend([
            l.w1..l.b1,
            l.b1..l.w2,
            l.w2..l.b2,
            l.b2..l.w3,
            l.w3..l.b3,
            l.b3..l.total,
        ]);
        blocks
    }

    pub fn level_resolutions(&self) -> Vec<u32> {
        self.layout.levels.iter().map(|l| l.resolution).collect()
    }

    pub fn gradient_buffer(&self) -> FieldGradient {
        FieldGradient::zeros(self.layout.total)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Little-endian bytes of the parameter vector.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|p| p.to_le_bytes()).collect()
    }

    pub fn freeze_copy(&self) -> FrozenField {
        FrozenField(self.clone())
    }

    fn bias_at(&self, p: Vec3) -> f64 {
        match self.config.density_bias {
            DensityBias::None => 0.0,
            DensityBias::Shell { strength } => {
                let b = &self.config.bounds;
                let rel = (p - b.center()).abs();
                let half = b.size() * 0.5;
                let s = (rel.x / half.x).max(rel.y / half.y).max(rel.z / half.z);
                strength * (s - 1.0)
            }
        }
    }

    /// Evaluates the field at `p`, recording intermediates in `trace`.
    pub fn forward<F: Real>(&self, p: Vec3, trace: &mut PointTrace<F>) -> FieldSample {
        let cfg = &self.config;
        if !cfg.bounds.contains(p) {
            trace.inside = false;
            trace.sample = FieldSample::default();
            return trace.sample;
        }
        trace.inside = true;
        let size = cfg.bounds.size();
        let rel = p - cfg.bounds.min;
        let unit = [rel.x / size.x, rel.y / size.y, rel.z / size.z];
        let fd = cfg.feature_dim;
        let params = &self.params;

        for (l, level) in self.layout.levels.iter().enumerate() {
            let n = level.resolution;
            let mut axis_index = [[0u32; 2]; 3];
            let mut axis_weight = [[F::ZERO; 2]; 3];
            let stride = n + 1;
            for a in 0..3 {
                let pos = unit[a].clamp(0.0, 1.0) * n as f64;
                let cell = (pos as u32).min(n - 1);
                let frac = F::from_f64(pos - cell as f64);
                axis_weight[a] = [F::ONE - frac, frac];
                axis_index[a] = if level.dense {
                    let scale = [1, stride, stride * stride][a];
                    [cell * scale, (cell + 1) * scale]
                } else {
                    [
                        cell.wrapping_mul(HASH_PRIMES[a]),
                        (cell + 1).wrapping_mul(HASH_PRIMES[a]),
                    ]
                };
            }
            let mask = if level.dense {
                u32::MAX
            } else {
                (level.entries - 1) as u32
            };
            let table = &params[level.offset..level.offset + level.entries * fd];
            let enc = &mut trace.enc[l * fd..(l + 1) * fd];
            enc.iter_mut().for_each(|e| *e = F::ZERO);
            let idx_out = &mut trace.corner_index[l * 8..(l + 1) * 8];
            let w_out = &mut trace.corner_weight[l * 8..(l + 1) * 8];
            for c in 0..8usize {
                let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
                let w = axis_weight[0][bx] * axis_weight[1][by] * axis_weight[2][bz];
                let idx = if level.dense {
                    axis_index[0][bx] + axis_index[1][by] + axis_index[2][bz]
                } else {
                    (axis_index[0][bx] ^ axis_index[1][by] ^ axis_index[2][bz]) & mask
                };
                idx_out[c] = idx;
                w_out[c] = w;
                let row = &table[idx as usize * fd..][..fd];
                for (e, &v) in enc.iter_mut().zip(row) {
                    *e += w * F::from_f32(v);
                }
            }
        }

        let lay = &self.layout;
        let h = cfg.hidden_width;
        dense_forward(
            &trace.enc,
            &params[lay.w1..lay.b1],
            &params[lay.b1..lay.w2],
            &mut trace.h1,
        );
        relu(&mut trace.h1);
        dense_forward(
            &trace.h1,
            &params[lay.w2..lay.b2],
            &params[lay.b2..lay.w3],
            &mut trace.h2,
        );
        relu(&mut trace.h2);
        let mut out = [F::ZERO; DECODER_OUTPUTS];
        for (o, b) in out.iter_mut().zip(&params[lay.b3..lay.total]) {
            *o = F::from_f32(*b);
        }
        let w3 = &params[lay.w3..lay.b3];
        for k in 0..h {
            let hk = trace.h2[k];
            for o in 0..DECODER_OUTPUTS {
                out[o] += hk * F::from_f32(w3[k * DECODER_OUTPUTS + o]);
            }
        }
        trace.biased_density = out[0].to_f64() + self.bias_at(p);
        trace.sample = FieldSample {
            density: softplus(trace.biased_density),
            color: Vec3::new(
                logistic(out[1].to_f64()),
                logistic(out[2].to_f64()),
                logistic(out[3].to_f64()),
            ),
        };
        trace.sample
    }

    /// Accumulates `d loss / d params` for the point recorded in `trace`.
    /// Grid gradients land in `grad` directly, decoder gradients in
    /// `scratch` (call [`BackwardScratch::flush`] afterwards).
    pub fn backward<F: Real>(
        &self,
        trace: &PointTrace<F>,
        upstream: SampleGradient,
        grad: &mut FieldGradient,
        scratch: &mut BackwardScratch<F>,
    ) {
        if !trace.inside {
            return;
        }
        let cfg = &self.config;
        let lay = &self.layout;
        let h = cfg.hidden_width;
        let params = &self.params;

        let c = trace.sample.color;
        let dout64 = [
            upstream.density * logistic(trace.biased_density),
            upstream.color.x * c.x * (1.0 - c.x),
            upstream.color.y * c.y * (1.0 - c.y),
            upstream.color.z * c.z * (1.0 - c.z),
        ];
        if dout64.iter().all(|d| *d == 0.0) {
            return;
        }
        scratch.dirty = true;
        let dout = dout64.map(F::from_f64);
        let base = lay.grid_len;
        let dec = &mut scratch.decoder;

        // Output layer.
        for (gb, d) in dec[lay.b3 - base..].iter_mut().zip(dout) {
            *gb += d;
        }
        let w3 = &params[lay.w3..lay.b3];
        for k in 0..h {
            let hk = trace.h2[k];
            let mut acc = F::ZERO;
            let gw = &mut dec[lay.w3 - base + k * DECODER_OUTPUTS..][..DECODER_OUTPUTS];
            for o in 0..DECODER_OUTPUTS {
                gw[o] += hk * dout[o];
                acc += F::from_f32(w3[k * DECODER_OUTPUTS + o]) * dout[o];
            }
            scratch.dh2[k] = if hk > F::ZERO { acc } else { F::ZERO };
        }

        dense_backward(
            &trace.h1,
            &params[lay.w2..lay.b2],
            &scratch.dh2,
            &mut dec[lay.w2 - base..lay.w3 - base],
            h * h,
            &mut scratch.dh1,
        );
        for (d, &hk) in scratch.dh1.iter_mut().zip(&trace.h1) {
            if !(hk > F::ZERO) {
                *d = F::ZERO;
            }
        }
        let enc_w = cfg.encoding_width();
        dense_backward(
            &trace.enc,
            &params[lay.w1..lay.b1],
            &scratch.dh1,
            &mut dec[lay.w1 - base..lay.w2 - base],
            enc_w * h,
            &mut scratch.denc,
        );

        let fd = cfg.feature_dim;
        let g = &mut grad.values;
        for (l, level) in lay.levels.iter().enumerate() {
            let denc = &scratch.denc[l * fd..(l + 1) * fd];
            for c in 0..8 {
                let w = trace.corner_weight[l * 8 + c];
                let start = level.offset + trace.corner_index[l * 8 + c] as usize * fd;
                for (gv, &d) in g[start..start + fd].iter_mut().zip(denc) {
                    *gv += (w * d).to_f64();
                }
            }
        }
    }

    pub fn query(&self, p: Vec3) -> FieldSample {
        let mut trace = PointTrace::<f64>::new(&self.config);
        self.forward(p, &mut trace)
    }

    pub fn query_points(&self, points: &[Vec3]) -> Vec<FieldSample> {
        let mut trace = PointTrace::<f64>::new(&self.config);
        points
            .iter()
            .map(|&p| self.forward(p, &mut trace))
            .collect()
    }

    /// Accumulates `sum_i J_i^T upstream_i` over points into `grad`.
    pub fn query_with_gradients(
        &self,
        points: &[Vec3],
        upstream: &[SampleGradient],
        grad: &mut FieldGradient,
    ) {
        assert_eq!(
            points.len(),
            upstream.len(),
            "one upstream gradient per point"
        );
        let mut trace = PointTrace::<f64>::new(&self.config);
        let mut scratch = BackwardScratch::<f64>::new(self);
        for (&p, &u) in points.iter().zip(upstream) {
            self.forward(p, &mut trace);
            self.backward(&trace, u, grad, &mut scratch);
        }
        scratch.flush(grad);
    }
}

/// Read-only snapshot of a field.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenField(RadianceField);

impl FrozenField {
    pub fn freeze_copy(&self) -> FrozenField {
        self.clone()
    }

    pub fn into_inner(self) -> RadianceField {
        self.0
    }
}

impl core::ops::Deref for FrozenField {
    type Target = RadianceField;
    fn deref(&self) -> &RadianceField {
        &self.0
    }
}

/// `out = bias + x W` with `W` stored input-major.
#[inline]
fn dense_forward<F: Real>(x: &[F], w: &[f32], bias: &[f32], out: &mut [F]) {
    if out.len() == 32 {
        if let Ok(out) = <&mut [F; 32]>::try_from(&mut *out) {
            return dense_forward_fixed(x, w, bias, out);
        }
    }
    let n = out.len();
    for (o, b) in out.iter_mut().zip(bias) {
        *o = F::from_f32(*b);
    }
    for (k, &xk) in x.iter().enumerate() {
        let row = &w[k * n..(k + 1) * n];
        for (o, &wkj) in out.iter_mut().zip(row) {
            *o += xk * F::from_f32(wkj);
        }
    }
}

#[inline]
fn dense_forward_fixed<F: Real, const N: usize>(
    x: &[F],
    w: &[f32],
    bias: &[f32],
    out: &mut [F; N],
) {
    let mut acc = [F::ZERO; N];
    for (a, &b) in acc.iter_mut().zip(bias) {
        *a = F::from_f32(b);
    }
    for (&xk, row) in x.iter().zip(w.chunks_exact(N)) {
        for j in 0..N {
            acc[j] += xk * F::from_f32(row[j]);
        }
    }
    *out = acc;
}

/// Accumulates weight and bias gradients of a dense layer into `g` (weights
/// first, `weight_len` values, then biases) and writes the input gradient.
#[inline]
fn dense_backward<F: Real>(
    x: &[F],
    w: &[f32],
    dy: &[F],
    g: &mut [F],
    weight_len: usize,
    dx: &mut [F],
) {
    let n = dy.len();
    let (gw, gb) = g.split_at_mut(weight_len);
    for (b, &d) in gb.iter_mut().zip(dy) {
        *b += d;
    }
    for (k, &xk) in x.iter().enumerate() {
        let row = &w[k * n..(k + 1) * n];
        let grow = &mut gw[k * n..(k + 1) * n];
        for (gj, &d) in grow.iter_mut().zip(dy) {
            *gj += xk * d;
        }
        dx[k] = dot(row, dy);
    }
}

/// Dot product with eight interleaved partial sums so the loop does not
/// serialize on one accumulator.
#[inline]
fn dot<F: Real>(w: &[f32], x: &[F]) -> F {
    let mut lanes = [F::ZERO; 8];
    let (wc, xc) = (w.chunks_exact(8), x.chunks_exact(8));
    let (wr, xr) = (wc.remainder(), xc.remainder());
    for (a, b) in wc.zip(xc) {
        for i in 0..8 {
            lanes[i] += F::from_f32(a[i]) * b[i];
        }
    }
    let mut tail = F::ZERO;
    for (&a, &b) in wr.iter().zip(xr) {
        tail += F::from_f32(a) * b;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

fn relu<F: Real>(v: &mut [F]) {
    for x in v {
        if !(*x > F::ZERO) {
            *x = F::ZERO;
        }
    }
}
