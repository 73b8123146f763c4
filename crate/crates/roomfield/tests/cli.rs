mod common;

use common::{read, roomfield, write_config, TINY};
use roomfield::checkpoint;
use roomfield::run::{deterministic_part, diagnostics_path, final_checkpoint, stage_checkpoint};
use roomfield_core::pipeline::Cursor;
use roomfield_core::view_schedule::Stage;

fn generate(dir: &std::path::Path, out: &str, extra: &[&str]) -> std::process::Output {
    let cfg = write_config(dir, TINY);
    let out = dir.join(out);
    let mut args = vec![
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    roomfield(&args)
}

#[test]
fn full_tiny_run_writes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let o = generate(dir.path(), "a", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("a");
    for stage in Stage::ALL {
        assert!(stage_checkpoint(&out, stage).exists());
    }
    let ck = checkpoint::load(&final_checkpoint(&out)).unwrap();
    assert_eq!(ck.state.cursor, Cursor::Finished);
    let diag = String::from_utf8(read(&diagnostics_path(&out))).unwrap();
    assert_eq!(diag.lines().count(), 1 + 200 + 6 + 4);
    assert!(
        out.join("renders/frame_000.png").exists() && out.join("renders/frame_001.pfm").exists()
    );
    assert!(out.join("checkpoints/stage1-iter000005.ckpt").exists());
    assert!(!out.join(".lock").exists());
}

fn deterministic_lines(path: &std::path::Path) -> Vec<String> {
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .map(|l| deterministic_part(l).to_string())
        .collect()
}

#[test]
fn identical_runs_are_bitwise_identical_and_resume_is_seamless() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(dir.path(), "a", &[]).status.success());
    assert!(generate(dir.path(), "b", &[]).status.success());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(read(&final_checkpoint(&a)), read(&final_checkpoint(&b)));
    for stage in Stage::ALL {
        assert_eq!(
            read(&stage_checkpoint(&a, stage)),
            read(&stage_checkpoint(&b, stage))
        );
    }
    let diag = deterministic_lines(&diagnostics_path(&a));
    assert_eq!(diag, deterministic_lines(&diagnostics_path(&b)));

    // Resume from a mid-stage-2 checkpoint and from a stage boundary.
    for (name, done) in [("stage2-iter000005.ckpt", 205), ("stage1.ckpt", 200)] {
        let resumed = dir.path().join(format!("resume-{done}"));
        let ck = a.join("checkpoints").join(name);
        let o = roomfield(&[
            "generate",
            "--resume",
            ck.to_str().unwrap(),
            "--out",
            resumed.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(
            read(&final_checkpoint(&resumed)),
            read(&final_checkpoint(&a)),
            "resumed from {name}"
        );
        let tail = deterministic_lines(&diagnostics_path(&resumed));
        assert_eq!(tail[0], diag[0]);
        assert_eq!(&tail[1..], &diag[1 + done..]);
    }
}

#[test]
fn stage_selection_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(dir.path(), "one", &["--stages", "1"])
        .status
        .success());
    let ck = checkpoint::load(&final_checkpoint(&dir.path().join("one"))).unwrap();
    assert_eq!(ck.state.cursor, Cursor::Finished);
    assert!(ck.state.frozen.is_none());
    assert_eq!(ck.config.pipeline.ablation.run_stages, [true, false, false]);
    assert!(!stage_checkpoint(&dir.path().join("one"), Stage::Outward).exists());

    assert!(generate(
        dir.path(),
        "skip",
        &["--skip-stage", "2", "--no-pose-transform"]
    )
    .status
    .success());
    let ck = checkpoint::load(&final_checkpoint(&dir.path().join("skip"))).unwrap();
    assert_eq!(ck.config.pipeline.ablation.run_stages, [true, false, true]);
    assert!(!ck.config.pipeline.ablation.pose_transform);
    let lines = deterministic_lines(&diagnostics_path(&dir.path().join("skip")));
    assert_eq!(lines.len(), 1 + 200 + 4);
}

#[test]
fn render_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(dir.path(), "a", &["--stages", "1"])
        .status
        .success());
    let ck = final_checkpoint(&dir.path().join("a"));
    let ck = ck.to_str().unwrap();
    let frames = |out: &str, threads: &str| {
        let out = dir.path().join(out);
        let o = std::process::Command::new(env!("CARGO_BIN_EXE_roomfield"))
            .args([
                "render",
                "--checkpoint",
                ck,
                "--pose",
                "turntable:16,0.5,10",
                "--out",
                out.to_str().unwrap(),
            ])
            .env("ROOMFIELD_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let listed = String::from_utf8(o.stdout).unwrap();
        assert_eq!(listed.lines().count(), 32);
        (0..16)
            .flat_map(|k| [format!("frame_{k:03}.png"), format!("frame_{k:03}.pfm")])
            .map(|f| read(&out.join(f)))
            .collect::<Vec<_>>()
    };
    let single = frames("r1", "1");
    assert_eq!(single, frames("r2", "1"));
    assert_eq!(single, frames("r3", "3"));
    assert_ne!(single[0], single[2]);

    let o = roomfield(&[
        "render",
        "--checkpoint",
        ck,
        "--pose",
        "pose:0.1,0,0.2,30,-5",
        "--out",
        dir.path().join("p").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(dir.path().join("p/frame_000.png").exists());

    let eval = |name: &str| {
        let path = dir.path().join(name);
        let o = roomfield(&["eval", "--checkpoint", ck, "--out", path.to_str().unwrap()]);
        assert!(o.status.success());
        assert_eq!(read(&path), o.stdout);
        String::from_utf8(o.stdout).unwrap()
    };
    let first = eval("e1.txt");
    assert_eq!(first, eval("e2.txt"));
    assert!(first.starts_with("mean_psnr="));
    assert!(first.contains("views=3\n") && first.contains("psnr.2="));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |o: std::process::Output| o.status.code().unwrap();

    let bad = write_config(dir.path(), "stage2.positon_radius=0.5\n");
    let o = roomfield(&[
        "generate",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(o), 2);
    let crossing = write_config(dir.path(), "stage3.t_max=0.01,0.01\n");
    let o = roomfield(&[
        "generate",
        "--config",
        crossing.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(o), 2);

    // A random field has no walls to measure depth against.
    let o = generate(dir.path(), "abort", &["--stages", "2"]);
    assert_eq!(code(o), 3);

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = roomfield(&[
        "eval",
        "--checkpoint",
        junk.to_str().unwrap(),
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(code(o), 4);

    let locked = dir.path().join("locked");
    std::fs::create_dir_all(&locked).unwrap();
    std::fs::write(locked.join(".lock"), b"").unwrap();
    let o = generate(dir.path(), "locked", &[]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
    assert_eq!(code(o), 1);
}
