//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-4, 7 and 8 are exact properties and fail the target. Criteria
//! 5, 6 and 9 are measurements of a single desk-scale training run and are
//! reported without gating.

mod common;

use std::f64::consts::{FRAC_PI_4, PI};
use std::ops::ControlFlow;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roomfield::checkpoint;
use roomfield::config;
use roomfield::run::{deterministic_part, diagnostics_path, final_checkpoint, generate};
use roomfield_core::field::{Aabb, DensityBias, FieldConfig, RadianceField};
use roomfield_core::geometry::{correspondence_map, sample_rotation, CameraPose, Intrinsics, Ray};
use roomfield_core::math::Vec3;
use roomfield_core::metrics::EvalReport;
use roomfield_core::pipeline::{
    evaluate_held_out, run, Cursor, Observer, PipelineConfig, PipelineError, PipelineState, Quiet,
};
use roomfield_core::pose_transform::{equivalent_half_fov, transform_pose};
use roomfield_core::prior::{caa_attention, CaaWeights, FeatureGrid};
use roomfield_core::render::{
    march_ray, render, render_backward, Precision, RayWork, RenderSettings,
};
use roomfield_core::sds::{SdsError, SdsStep};
use roomfield_core::view_schedule::{outward_pose, timestep_bounds, Stage, StageConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pose_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let theta1 = rng.random_range(5f64.to_radians()..60f64.to_radians());
        let d: f64 = rng.random_range(1.0..10.0);
        let d_cam: f64 = rng.random_range(0.0..d - 0.2);
        let dir = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.1..1.0),
        );
        let real = outward_pose(
            dir.normalized() * d_cam.max(1e-9),
            Intrinsics::new(theta1, 16, 16).unwrap(),
        );
        let pair = transform_pose(&real, d, 0.1).map_err(|e| e.to_string())?;
        let seen = pair.equivalent.intrinsics().half_fov().tan() * d;
        let expected = theta1.tan() * (d - pair.d_cam);
        worst = worst.max(((seen - expected) / expected).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let limit = (equivalent_half_fov(0.7, 4.0, 1e-9) - 0.7).abs();
    check(
        worst < 1e-9 && limit < 1e-9 && elapsed < 1.0,
        format!("worst relative error {worst:.2e}, theta2-theta1 at d_cam=1e-9 {limit:.1e}, {elapsed:.3} s"),
    )
}

fn tiny_field(seed: u64, bounds: f64) -> RadianceField {
    let cfg = FieldConfig {
        levels: 2,
        table_size_log2: 6,
        feature_dim: 2,
        base_resolution: 3,
        max_resolution: 6,
        hidden_width: 8,
        bounds: Aabb::cube(bounds),
        density_bias: DensityBias::None,
    };
    let mut field = RadianceField::initialized(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let grid = field.grid_param_count();
    for p in &mut field.params_mut()[..grid] {
        *p = rng.random_range(-1.0f32..1.0);
    }
    field
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let field = tiny_field(3, 1.0);
    let pose = CameraPose::looking(
        Vec3::new(-0.3, 0.1, 0.05),
        0.4,
        -0.2,
        Intrinsics::new(0.6, 8, 8).unwrap(),
    );
    let sampling = RenderSettings::new(24, 0.05, 2.5)
        .unwrap()
        .with_precision(Precision::Double)
        .sampling(11);
    let target: Vec<Vec3> = (0..64)
        .map(|i| Vec3::new(0.1 + 0.01 * i as f64, 0.6, 0.3))
        .collect();
    let loss = |f: &RadianceField| {
        let out = render(f, &pose, &sampling);
        0.5 * out
            .color
            .iter()
            .zip(&target)
            .map(|(c, t)| (*c - *t).dot(*c - *t))
            .sum::<f64>()
    };
    let out = render(&field, &pose, &sampling);
    let pixel: Vec<Vec3> = out
        .color
        .iter()
        .zip(&target)
        .map(|(c, t)| *c - *t)
        .collect();
    let mut grad = field.gradient_buffer();
    render_backward(&field, &pose, &sampling, &out, &pixel, None, &mut grad)
        .map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let touched: Vec<usize> = (0..field.param_count())
        .filter(|&i| grad.values()[i] != 0.0)
        .collect();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..50 {
        let i = touched[rng.random_range(0..touched.len())];
        let base = field.params()[i];
        let h = 1e-6f32 * base.abs().max(1.0);
        let (mut plus, mut minus) = (field.clone(), field.clone());
        plus.params_mut()[i] = base + h;
        minus.params_mut()[i] = base - h;
        let step = plus.params()[i] as f64 - minus.params()[i] as f64;
        let numeric = (loss(&plus) - loss(&minus)) / step;
        let analytic = grad.values()[i];
        let err = (numeric - analytic).abs();
        worst = worst.max(err / numeric.abs().max(analytic.abs()).max(1e-3));
        if err > (1e-3 * numeric.abs().max(analytic.abs())).max(1e-6) {
            failures += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(
        failures == 0 && elapsed < 60.0,
        format!("{failures}/50 mismatches, worst relative {worst:.1e}, {elapsed:.2} s"),
    )
}

fn conservation() -> Outcome {
    let field = {
        let cfg = FieldConfig {
            levels: 4,
            table_size_log2: 10,
            max_resolution: 64,
            hidden_width: 16,
            ..FieldConfig::desk(Aabb::cube(1.5))
        };
        let mut f = RadianceField::initialized(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = f.grid_param_count();
        f.params_mut()[..grid]
            .iter_mut()
            .for_each(|p| *p = rng.random_range(-4.0..4.0));
        f
    };
    let sampling = RenderSettings::new(48, 0.05, 4.0).unwrap().sampling(9);
    let mut work = RayWork::<f64>::new(&field, &sampling);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let o = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let d = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.05..1.0),
        );
        let r = march_ray(
            &field,
            &Ray {
                origin: o,
                direction: d.normalized(),
            },
            &sampling,
            k,
            &mut work,
        );
        let total: f64 = work.records().iter().map(|s| s.weight).sum();
        worst = worst.max((total + r.final_transmittance - 1.0).abs());
    }

    let cfg = FieldConfig {
        levels: 2,
        table_size_log2: 6,
        max_resolution: 8,
        base_resolution: 4,
        hidden_width: 4,
        ..FieldConfig::desk(Aabb::cube(10.0))
    };
    let mut slab = RadianceField::zeroed(cfg).unwrap();
    let mut slab_worst: f64 = 0.0;
    for (raw, length) in [(-1.0f32, 0.8), (0.0, 2.0), (1.5, 0.3)] {
        let db = slab.density_bias_index();
        slab.params_mut()[db] = raw;
        let sigma = (1.0 + (raw as f64).exp()).ln();
        let s = RenderSettings::new(64, 0.5, 0.5 + length)
            .unwrap()
            .sampling(1);
        let ray = Ray {
            origin: Vec3::ZERO,
            direction: Vec3::new(0.0, 0.6, 0.8),
        };
        let r = march_ray(&slab, &ray, &s, 0, &mut RayWork::<f64>::new(&slab, &s));
        slab_worst = slab_worst.max((r.opacity - (1.0 - (-sigma * length).exp())).abs());
    }
    check(
        worst < 1e-5 && slab_worst < 1e-4,
        format!("worst weight-sum error {worst:.1e}, worst slab opacity error {slab_worst:.1e}"),
    )
}

fn dense_attention(
    source: &FeatureGrid,
    src_pose: &CameraPose,
    targets: &[(FeatureGrid, CameraPose)],
    w: &CaaWeights,
    radius: i64,
) -> FeatureGrid {
    let d = source.dim;
    let mat = |m: &[f64], x: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|r| (0..d).map(|c| m[r * d + c] * x[c]).sum())
            .collect()
    };
    let mut out = source.clone();
    for j in 0..source.height {
        for i in 0..source.width {
            let dir = src_pose.pixel_direction(i as f64 + 0.5, j as f64 + 0.5);
            let q = mat(&w.query, source.cell(i, j));
            let (mut logits, mut values) = (Vec::new(), Vec::new());
            for (grid, pose) in targets {
                let Some((u, v)) = pose.project_direction(dir) else {
                    continue;
                };
                if !(u >= 0.0 && v >= 0.0 && u <= grid.width as f64 && v <= grid.height as f64) {
                    continue;
                }
                let cu = (u.floor() as i64).min(grid.width as i64 - 1);
                let cv = (v.floor() as i64).min(grid.height as i64 - 1);
                for y in 0..grid.height {
                    for x in 0..grid.width {
                        if (x as i64 - cu).abs() <= radius && (y as i64 - cv).abs() <= radius {
                            let k = mat(&w.key, grid.cell(x, y));
                            logits.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>());
                            values.push(mat(&w.value, grid.cell(x, y)));
                        }
                    }
                }
            }
            if logits.is_empty() {
                continue;
            }
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (c, m) in out.cell_mut(i, j).iter_mut().enumerate() {
                *m = logits
                    .iter()
                    .zip(&values)
                    .map(|(l, v)| l.exp() / z * v[c])
                    .sum();
            }
        }
    }
    out
}

fn correspondence_and_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst_px: f64 = 0.0;
    for _ in 0..100 {
        let intr = Intrinsics::new(rng.random_range(10f64..70.0).to_radians(), 24, 16).unwrap();
        let a = sample_rotation(rng.random_range(-PI..PI), rng.random_range(-1.2..1.2));
        let b =
            sample_rotation(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)).mul_mat(&a);
        let center = Vec3::new(0.2, -0.1, 0.3);
        let src = CameraPose::new(a, center, intr).unwrap();
        let tgt = CameraPose::new(b, center, intr).unwrap();
        let forward = correspondence_map(&src, &tgt).map_err(|e| e.to_string())?;
        let back = correspondence_map(&tgt, &src).map_err(|e| e.to_string())?;
        for j in 0..16 {
            for i in 0..24 {
                if let Some((u, v)) = forward.get(i, j) {
                    if let Some((ru, rv)) = back.map_point(u, v) {
                        worst_px = worst_px.max(
                            ((ru - i as f64 - 0.5).powi(2) + (rv - j as f64 - 0.5).powi(2)).sqrt(),
                        );
                    }
                }
            }
        }
    }

    let intr = Intrinsics::new(0.7, 4, 4).unwrap();
    let grid = |rng: &mut ChaCha8Rng, dim: usize| {
        let mut g = FeatureGrid::zeros(4, 4, dim);
        g.data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        g
    };
    let mut worst_attn: f64 = 0.0;
    for case in 0..20 {
        let dim = 3 + case % 2;
        let mut m = || {
            (0..dim * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let weights = CaaWeights {
            dim,
            query: m(),
            key: m(),
            value: m(),
        };
        let (yaw, pitch) = (rng.random_range(-3.0..3.0), rng.random_range(-0.5..0.5));
        let src_pose = CameraPose::looking(Vec3::ZERO, yaw, pitch, intr);
        let targets: Vec<_> = (0..2)
            .map(|_| {
                let p = CameraPose::looking(
                    Vec3::ZERO,
                    yaw + rng.random_range(-0.6..0.6),
                    pitch + rng.random_range(-0.3..0.3),
                    intr,
                );
                (grid(&mut rng, dim), p)
            })
            .collect();
        let source = grid(&mut rng, dim);
        let maps: Vec<_> = targets
            .iter()
            .map(|(_, p)| correspondence_map(&src_pose, p).unwrap())
            .collect();
        let grids: Vec<_> = targets.iter().map(|(g, _)| g.clone()).collect();
        let fast = caa_attention(&source, &grids, &maps, &weights, 1).map_err(|e| e.to_string())?;
        let slow = dense_attention(&source, &src_pose, &targets, &weights, 1);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            worst_attn = worst_attn.max((a - b).abs());
        }
    }
    check(
        worst_px <= 0.5 && worst_attn < 1e-6,
        format!("worst round trip {worst_px:.2e} px, worst attention difference {worst_attn:.1e}"),
    )
}

fn annealing() -> Outcome {
    let intr = Intrinsics::new(FRAC_PI_4, 8, 8).unwrap();
    let mut bad = 0;
    for cfg in [
        StageConfig::desk(Stage::Outward, intr),
        StageConfig::full_scale(Stage::Outward, intr),
    ] {
        let boundary = cfg.iterations * 2 / 3;
        for i in 0..cfg.iterations {
            let expected = if i < boundary {
                (0.02, 0.7)
            } else {
                (0.02, 0.4)
            };
            bad += (timestep_bounds(&cfg, i).map_err(|e| e.to_string())? != expected) as usize;
        }
    }
    for cfg in [
        StageConfig::desk(Stage::SharedCenter, intr),
        StageConfig::full_scale(Stage::SharedCenter, intr),
    ] {
        for i in 0..cfg.iterations {
            bad += (timestep_bounds(&cfg, i).map_err(|e| e.to_string())? != (0.02, 0.4)) as usize;
        }
    }
    check(
        bad == 0,
        format!("{bad} mismatching iterations over desk and full-scale stage 2 and 3"),
    )
}

fn deterministic_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| deterministic_part(l).to_string())
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config::parse(common::TINY).map_err(|e| e.to_string())?;
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    generate(&cfg, None, &a).map_err(|e| e.to_string())?;
    generate(&cfg, None, &b).map_err(|e| e.to_string())?;
    let same_ckpt = std::fs::read(final_checkpoint(&a)).unwrap()
        == std::fs::read(final_checkpoint(&b)).unwrap();
    let diag = deterministic_lines(&diagnostics_path(&a));
    let same_diag = diag == deterministic_lines(&diagnostics_path(&b));

    let mid = checkpoint::load(&a.join("checkpoints/stage2-iter000005.ckpt"))
        .map_err(|e| e.to_string())?;
    let done = match mid.state.cursor {
        Cursor::At {
            stage: Stage::Outward,
            iteration,
        } => mid.config.pipeline.stage(Stage::Origin).iterations + iteration,
        other => return Err(format!("unexpected cursor {other:?}")),
    };
    generate(&mid.config, Some(mid.state), &c).map_err(|e| e.to_string())?;
    let resumed = std::fs::read(final_checkpoint(&c)).unwrap()
        == std::fs::read(final_checkpoint(&a)).unwrap();
    let tail = deterministic_lines(&diagnostics_path(&c));
    let resumed_diag = tail[1..] == diag[1 + done..];
    check(
        same_ckpt && same_diag && resumed && resumed_diag,
        format!(
            "repeat checkpoint {same_ckpt}, repeat diagnostics {same_diag}, resumed checkpoint {resumed}, resumed diagnostics {resumed_diag}"
        ),
    )
}

/// Pauses the run at the end of every stage.
struct StageBreaks;

impl Observer for StageBreaks {
    fn on_stage_complete(&mut self, _: Stage, _: &PipelineState) -> ControlFlow<()> {
        ControlFlow::Break(())
    }
}

struct Counter(usize);

impl Observer for Counter {
    fn on_step(&mut self, _: &SdsStep, _: &PipelineState) -> ControlFlow<()> {
        self.0 += 1;
        ControlFlow::Continue(())
    }
}

struct DeskRun {
    config: PipelineConfig,
    after: [EvalReport; 3],
    seconds: f64,
    skip2: EvalReport,
    no_transform: Result<EvalReport, PipelineError>,
}

fn desk_run() -> Result<DeskRun, String> {
    let config = PipelineConfig::desk(7);
    let err = |e: PipelineError| e.to_string();
    let eval = |f: &RadianceField| evaluate_held_out(&config, f).map_err(|e| e.to_string());
    let start = Instant::now();
    let mut state = PipelineState::new(&config).map_err(err)?;
    run(&config, &mut state, &mut StageBreaks).map_err(err)?;
    let stage1 = state.clone();
    run(&config, &mut state, &mut StageBreaks).map_err(err)?;
    let stage2 = state.clone();
    run(&config, &mut state, &mut Quiet).map_err(err)?;
    let seconds = start.elapsed().as_secs_f64();
    let after = [
        eval(&stage1.field)?,
        eval(&stage2.field)?,
        eval(&state.field)?,
    ];

    // Skipping stage 2 continues the same stage-1 state straight into stage 3.
    let mut skip = config.clone();
    skip.ablation.run_stages = [true, false, true];
    let mut s = stage1.clone();
    s.cursor = Cursor::At {
        stage: Stage::SharedCenter,
        iteration: 0,
    };
    let mut counter = Counter(0);
    run(&skip, &mut s, &mut counter).map_err(err)?;
    assert_eq!(counter.0, config.stage(Stage::SharedCenter).iterations);
    let skip2 = eval(&s.field)?;

    let mut plain = config.clone();
    plain.ablation.pose_transform = false;
    let mut s = stage1;
    let no_transform = run(&plain, &mut s, &mut StageBreaks).map(|_| s.field);
    let no_transform = match no_transform {
        Ok(field) => Ok(eval(&field)?),
        Err(e) => Err(e),
    };
    Ok(DeskRun {
        config,
        after,
        seconds,
        skip2,
        no_transform,
    })
}

fn convergence(r: &DeskRun) -> Outcome {
    let iters: Vec<usize> = r.config.stages.iter().map(|s| s.iterations).collect();
    let psnr = r.after[2].mean_psnr;
    let minutes = r.seconds / 60.0;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    check(
        psnr >= 25.0 && minutes <= 30.0,
        format!(
            "held-out PSNR {psnr:.2} dB (need >= 25) after {iters:?} iterations; training took {minutes:.1} min on {cores} core(s) (target <= 30)"
        ),
    )
}

fn ablations(r: &DeskRun) -> Outcome {
    let full = r.after[2].mean_psnr;
    let skip2 = r.skip2.mean_psnr;
    let skip3 = r.after[1].mean_psnr;
    let with_transform = r.after[1].mean_psnr;
    let (no_transform_ok, no_transform) = match &r.no_transform {
        Ok(rep) => (
            rep.mean_psnr < with_transform,
            format!("{:.2}", rep.mean_psnr),
        ),
        Err(PipelineError::Sds(
            e @ (SdsError::NonFiniteGradient { .. } | SdsError::AbortedStage { .. }),
        )) => (true, format!("aborted ({e})")),
        Err(e) => (false, format!("error {e}")),
    };
    check(
        full - skip2 >= 1.0 && full - skip3 >= 1.0 && no_transform_ok,
        format!(
            "full {full:.2}, skip stage 2 {skip2:.2}, skip stage 3 {skip3:.2}; stage-2 end with transform {with_transform:.2}, without {no_transform}"
        ),
    )
}

fn consistency(r: &DeskRun) -> Outcome {
    let (full, stage1) = (r.after[2].reprojection_error, r.after[0].reprojection_error);
    check(
        full < 0.05 && full < stage1,
        format!("reprojection error {full:.4} after all stages, {stage1:.4} after stage 1"),
    )
}

fn main() -> ExitCode {
    let mut gate_failed = false;
    let mut report = |n: u8, gating: bool, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                gate_failed |= gating;
                ("FAIL", d)
            }
        };
        println!("criterion {n}: {tag} - {detail}");
    };
    report(1, true, pose_equivalence());
    report(2, true, gradients());
    report(3, true, conservation());
    report(4, true, correspondence_and_attention());
    report(7, true, annealing());
    report(8, true, determinism());
    match desk_run() {
        Ok(r) => {
            report(5, false, convergence(&r));
            report(6, false, ablations(&r));
            report(9, false, consistency(&r));
            let a = &r.after;
            println!(
                "desk run: PSNR after stages {:.2} / {:.2} / {:.2}, depth RMS {:.3} / {:.3} / {:.3}",
                a[0].mean_psnr, a[1].mean_psnr, a[2].mean_psnr, a[0].depth_rms, a[1].depth_rms, a[2].depth_rms
            );
        }
        Err(e) => {
            for n in [5, 6, 9] {
                report(n, false, Err(format!("desk run failed: {e}")));
            }
        }
    }
    if gate_failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
