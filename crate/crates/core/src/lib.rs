//! Human Gaussian Graph.
//!
//! Builds a dual-layer graph from per-frame 3D Gaussian sets and a skinned
//! body template, aggregates the Gaussians onto template vertices with
//! stacked intra-node / inter-node attention, refines one frame's Gaussians
//! into template-aligned primitives that can be re-posed with linear blend
//! skinning, and renders them with a software splatting rasterizer.
//!
//! Module map:
//!
//! * [`types`] – shared domain types, parameter packing, template validation
//! * [`skinning`] – forward kinematics, LBS, Gaussian binding and re-posing
//! * [`spatial`] – exact nearest-vertex index
//! * [`graph`] – graph construction (Gaussian→vertex and vertex→vertex edges)
//! * [`graphops`] – learnable queries, attention blocks, refinement
//! * [`splat`] – projection, compositing, rendering
//! * [`train`] – loss, gradient checks, optimizer, toy fitting loop
//! * [`synthlab`] – synthetic bodies/scenes and brute-force oracles
//! * [`io`] – HGGF container, PLY, PNG, run configs
//! * [`interface`] – the pipeline commands behind the `hgg` binary

pub mod error;
pub mod graph;
pub mod graphops;
pub mod interface;
pub mod io;
pub mod skinning;
pub mod spatial;
pub mod splat;
pub mod synthlab;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    BodyTemplate, Camera, GaussianFrame, GaussianPrimitive, Joint, Pose, ValidationReport,
};
