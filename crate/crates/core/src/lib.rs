//! Quasi-Fresnel transform reconstruction for confocal non-line-of-sight imaging.
//!
//! A hidden scene of surfels is observed through transient histograms measured on a
//! relay wall. Each histogram is collapsed along time against a complex chirp weight
//! (`aggregate`), the resulting field is deconvolved with a separable 2-D chirp
//! (`deconv`), and albedo plus depth are read off the modulated albedo at two
//! transform parameters (`extract`). `pipeline` chains the stages in three memory
//! modes and `bench` audits their footprint and scaling.

pub mod aggregate;
pub mod bench;
pub mod deconv;
pub mod error;
pub mod extract;
pub mod forward;
pub mod io;
pub mod ledger;
pub mod model;
pub mod pipeline;

pub use error::{Error, ErrorKind, Result};
pub use model::{
    AggregatedField, Falloff, ModulatedAlbedo, PhotonEvent, PhotonEventList, Real, Reconstruction, SceneSurfels,
    Surfel, TransientHistogram, WallGrid,
};
pub use num_complex::Complex;
