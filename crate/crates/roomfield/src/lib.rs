//! File formats and commands around `roomfield-core`: configuration text,
//! binary checkpoints, PNG and PFM export, and the `generate` / `render` /
//! `eval` commands.

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod run;
