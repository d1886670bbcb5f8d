//! Volumetric-primitive scene representation, differentiable rendering, and
//! fitting/distillation tools.
//!
//! A scene is a set of posed, scaled, oriented voxel blocks ("primitives").
//! Rays accumulate clamped linear transmittance through the primitives they
//! cross; the accumulation is hand-differentiated so payloads and primitive
//! poses can be optimized from images, either directly (`training::fit_scene`)
//! or through latent-conditioned generator networks (`training::distill`).

pub mod accel;
pub mod autodiff;
pub mod generator;
pub mod geom;
pub mod imageio;
pub mod mesh;
pub mod render;
pub mod scene;
pub mod training;

pub use geom::{Camera, ImageBuffer, Ray, Rotation, Vec3};
pub use scene::{DeltaSet, Payload, Primitive, PrimitiveSet};
