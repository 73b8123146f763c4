//! Correspondence-aware attention between views that share a camera center.
//!
//! Each source cell attends over a small window around its corresponding
//! location in every other view. Features here are plain downsampled RGB,
//! so the attended feature is a consistency target: the residual
//! `feature - attended` pulls corresponding pixels toward agreement.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{PriorError, ScoreProvider, ScoreQuery, ScoreResponse};
use crate::geometry::{correspondence_map, CorrespondenceMap};
use crate::math::Vec3;

/// Row-major grid of `dim`-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub width: u32,
    pub height: u32,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(width: u32, height: u32, dim: usize) -> Self {
        FeatureGrid {
            width,
            height,
            dim,
            data: vec![0.0; width as usize * height as usize * dim],
        }
    }

    pub fn cell(&self, i: u32, j: u32) -> &[f64] {
        let start = (j * self.width + i) as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn cell_mut(&mut self, i: u32, j: u32) -> &mut [f64] {
        let start = (j * self.width + i) as usize * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Box-filters a `width x height` color image onto a `gw x gh` grid.
    pub fn downsample(color: &[Vec3], width: u32, height: u32, gw: u32, gh: u32) -> Self {
        assert_eq!(color.len(), (width * height) as usize, "image size");
        let mut grid = FeatureGrid::zeros(gw, gh, 3);
        let mut counts = vec![0u32; (gw * gh) as usize];
        for j in 0..height {
            for i in 0..width {
                let (ci, cj) = (i * gw / width, j * gh / height);
                let c = color[(j * width + i) as usize];
                let cell = grid.cell_mut(ci, cj);
                cell[0] += c.x;
                cell[1] += c.y;
                cell[2] += c.z;
                counts[(cj * gw + ci) as usize] += 1;
            }
        }
        for (cell, &n) in grid.data.chunks_exact_mut(3).zip(&counts) {
            cell.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        grid
    }

    /// Nearest-cell upsampling of a 3-channel grid to `width x height`.
    pub fn upsample_rgb(&self, width: u32, height: u32) -> Vec<Vec3> {
        assert_eq!(self.dim, 3, "rgb grid");
        (0..height)
            .flat_map(|j| (0..width).map(move |i| (i, j)))
            .map(|(i, j)| {
                let c = self.cell(i * self.width / width, j * self.height / height);
                Vec3::new(c[0], c[1], c[2])
            })
            .collect()
    }
}

/// Query, key and value projections, each `dim x dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CaaWeights {
    pub dim: usize,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

fn identity(dim: usize) -> Vec<f64> {
    (0..dim * dim)
        .map(|k| if k / dim == k % dim { 1.0 } else { 0.0 })
        .collect()
}

/// Gram-Schmidt on a Gaussian matrix.
fn random_orthonormal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let n = libm::sqrt(v.iter().map(|a| a * a).sum());
        if n > 1e-6 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    rows.concat()
}

impl CaaWeights {
    pub fn identity(dim: usize) -> Self {
        CaaWeights {
            dim,
            query: identity(dim),
            key: identity(dim),
            value: identity(dim),
        }
    }

    pub fn random_orthonormal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        CaaWeights {
            dim,
            query: random_orthonormal(dim, rng),
            key: random_orthonormal(dim, rng),
            value: random_orthonormal(dim, rng),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.query
            .iter()
            .chain(&self.key)
            .chain(&self.value)
            .all(|v| v.is_finite())
    }
}

fn project(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = m[r * d..(r + 1) * d]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum();
    }
}

fn project_grid(m: &[f64], grid: &FeatureGrid) -> Vec<f64> {
    let mut out = vec![0.0; grid.data.len()];
    for (x, o) in grid
        .data
        .chunks_exact(grid.dim)
        .zip(out.chunks_exact_mut(grid.dim))
    {
        project(m, x, o);
    }
    out
}

/// Candidate cells for source cell `(i, j)`: `(target, cell index)` pairs.
fn candidates(
    maps: &[CorrespondenceMap],
    i: u32,
    j: u32,
    radius: usize,
    out: &mut Vec<(usize, usize)>,
) {
    out.clear();
    let r = radius as i64;
    for (l, map) in maps.iter().enumerate() {
        let Some((u, v)) = map.get(i, j) else {
            continue;
        };
        let (w, h) = map.target_size();
        let ci = (libm::floor(u) as i64).clamp(0, w as i64 - 1);
        let cj = (libm::floor(v) as i64).clamp(0, h as i64 - 1);
        for y in cj - r..=cj + r {
            for x in ci - r..=ci + r {
                if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
                    out.push((l, (y * w as i64 + x) as usize));
                }
            }
        }
    }
}

/// Attention weights over `candidates` for one query vector.
fn softmax_weights(
    q: &[f64],
    keys: &[Vec<f64>],
    dim: usize,
    cands: &[(usize, usize)],
    out: &mut Vec<f64>,
) {
    out.clear();
    out.extend(cands.iter().map(|&(l, c)| {
        let k = &keys[l][c * dim..(c + 1) * dim];
        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()
    }));
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for w in out.iter_mut() {
        *w = libm::exp(*w - max);
        total += *w;
    }
    out.iter_mut().for_each(|w| *w /= total);
}

/// Attended features for every cell of `source`.
///
/// `maps[l]` takes source cells into `targets[l]`. Cells without any
/// in-bounds correspondence keep their own feature.
pub fn caa_attention(
    source: &FeatureGrid,
    targets: &[FeatureGrid],
    maps: &[CorrespondenceMap],
    weights: &CaaWeights,
    radius: usize,
) -> Result<FeatureGrid, PriorError> {
    let dim = source.dim;
    if weights.dim != dim || targets.iter().any(|t| t.dim != dim) {
        return Err(PriorError::ShapeMismatch("feature dimensions differ"));
    }
    if maps.len() != targets.len() {
        return Err(PriorError::ShapeMismatch(
            "one correspondence map per target",
        ));
    }
    for (map, t) in maps.iter().zip(targets) {
        if map.source_size() != (source.width, source.height)
            || map.target_size() != (t.width, t.height)
        {
            return Err(PriorError::ShapeMismatch(
                "correspondence map does not match grid sizes",
            ));
        }
    }
    let keys: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| project_grid(&weights.key, t))
        .collect();
    let values: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| project_grid(&weights.value, t))
        .collect();
    let mut out = source.clone();
    let (mut q, mut cands, mut w) = (vec![0.0; dim], Vec::new(), Vec::new());
    for j in 0..source.height {
        for i in 0..source.width {
            candidates(maps, i, j, radius, &mut cands);
            if cands.is_empty() {
                continue;
            }
            project(&weights.query, source.cell(i, j), &mut q);
            softmax_weights(&q, &keys, dim, &cands, &mut w);
            let m = out.cell_mut(i, j);
            m.iter_mut().for_each(|v| *v = 0.0);
            for (&(l, c), &a) in cands.iter().zip(&w) {
                for (mv, &vv) in m.iter_mut().zip(&values[l][c * dim..(c + 1) * dim]) {
                    *mv += a * vv;
                }
            }
        }
    }
    Ok(out)
}

/// Consistency score from correspondence attention over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CaaProvider {
    pub weights: CaaWeights,
    pub grid: (u32, u32),
    pub radius: usize,
}

impl Default for CaaProvider {
    fn default() -> Self {
        CaaProvider {
            weights: CaaWeights::identity(3),
            grid: (16, 16),
            radius: 1,
        }
    }
}

impl ScoreProvider for CaaProvider {
    fn score(&self, query: &ScoreQuery<'_>) -> Result<ScoreResponse, PriorError> {
        query.check_shapes()?;
        let (gw, gh) = self.grid;
        let grid_poses = query
            .poses
            .iter()
            .map(|p| Ok(p.with_intrinsics(p.intrinsics().with_size(gw, gh)?)))
            .collect::<Result<Vec<_>, PriorError>>()?;
        let features: Vec<FeatureGrid> = query
            .renders
            .iter()
            .map(|r| FeatureGrid::downsample(&r.color, r.width, r.height, gw, gh))
            .collect();
        let mut residuals = Vec::with_capacity(features.len());
        for (v, render) in query.renders.iter().enumerate() {
            let mut targets = Vec::new();
            let mut maps = Vec::new();
            for l in (0..features.len()).filter(|&l| l != v) {
                maps.push(correspondence_map(&grid_poses[v], &grid_poses[l])?);
                targets.push(features[l].clone());
            }
            let attended =
                caa_attention(&features[v], &targets, &maps, &self.weights, self.radius)?;
            let mut diff = features[v].clone();
            diff.data
                .iter_mut()
                .zip(&attended.data)
                .for_each(|(f, m)| *f -= m);
            residuals.push(diff.upsample_rgb(render.width, render.height));
        }
        Ok(ScoreResponse { residuals })
    }
}
