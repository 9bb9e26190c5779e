//! esigal — sensor- and source-space decoding of 3D hand kinematics from
//! EEG for grasp-and-lift recordings.
//!
//! The crate covers the full experiment path: a dependency-free on-disk
//! container and synthetic-session generator, signal conditioning
//! (zero-phase FIR band-pass, CAR, component rejection, decimation,
//! normalization), an sLORETA inverse with ROI reduction, time-lagged
//! window extraction with intra-/inter-subject splits, a small dense
//! training engine realizing three convolutional decoders plus a linear
//! baseline, Pearson-correlation evaluation with paired t-tests, and a
//! config-driven runner that caches stages and writes reproducible reports.

#[cfg(feature = "fast-alloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod container;
pub mod error;
pub mod eval;
pub mod neural;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod runner;
pub mod session;
pub mod source_imaging;
pub mod synth;
pub mod windowing;

pub use error::{Error, Result};
