//! Staged score distillation of inside-out room radiance fields.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. File formats,
//! the config parser and the command line live in the `roomfield` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod field;
pub mod fit;
pub mod geometry;
pub mod math;
pub mod metrics;
pub mod pipeline;
pub mod pose_transform;
pub mod prior;
pub mod render;
pub mod sds;
pub mod view_schedule;
