#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small but complete configuration: every stage runs, in a few seconds.
pub const TINY: &str = "\
seed=21
field.levels=3
field.table_size_log2=8
field.base_resolution=4
field.max_resolution=16
field.hidden_width=8
render.n_samples=24
stage1.iterations=200
stage1.views_per_iteration=4
stage1.width=8
stage1.height=8
stage2.iterations=6
stage2.views_per_iteration=2
stage2.width=8
stage2.height=8
stage3.iterations=4
stage3.views_per_iteration=2
stage3.width=8
stage3.height=8
depth_resolution=4
checkpoint_every=5
eval.count=3
eval.width=8
eval.height=8
export.frames=2
export.width=8
export.height=8
";

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn roomfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roomfield"))
        .args(args)
        .output()
        .unwrap()
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
