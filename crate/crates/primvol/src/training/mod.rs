//! Training stack: losses, critic, teacher data, optimizer, and the three
//! entry points (`fit_scene`, `distill`, `invert`).
//!
//! Everything here is hand-differentiated and deterministic: batch order is
//! fixed, parallel reductions fold in index order, and the optimizer state
//! (including the RNG) serializes so a resumed run is bitwise identical to an
//! uninterrupted one.

pub mod critic;
pub mod distill;
pub mod fit;
pub mod invert;
pub mod losses;
pub mod optim;
pub mod teacher;

use thiserror::Error;

use crate::generator::GeneratorError;
use crate::autodiff::AutodiffError;
use crate::geom::GeomError;
use crate::imageio::ImageIoError;
use crate::render::RenderError;
use crate::scene::SceneError;

/// Errors surfaced by dataset construction and training loops.
#[derive(Debug, Error)]
pub enum TrainError {
    /// Mismatched dimensions between tensors, images, or parameter blocks.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid configuration or argument value.
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// Training diverged (non-finite loss or parameter).
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    /// Propagated scene error.
    #[error(transparent)]
    Scene(#[from] SceneError),
    /// Propagated render error.
    #[error(transparent)]
    Render(#[from] RenderError),
    /// Propagated gradient-computation error.
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    /// Propagated geometry error.
    #[error(transparent)]
    Geom(#[from] GeomError),
    /// Propagated generator error.
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    /// Propagated image I/O error.
    #[error(transparent)]
    ImageIo(#[from] ImageIoError),
    /// Dataset manifest or checkpoint I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Malformed dataset manifest or checkpoint contents.
    #[error("bad data file: {0}")]
    BadData(String),
}

/// Weights for the composite training objective.
///
/// The defaults match the reference configuration: perceptual proxy weighted
/// at 20, critic gradient penalty at 1e-4, and small regularizers on fade and
/// primitive volume. The adversarial term ships disabled; enabling it is an
/// explicit opt-in because it changes the optimization landscape.
#[derive(Debug, Clone)]
pub struct LossWeights {
    /// Weight of the multi-scale perceptual proxy term.
    pub lambda_perc: f64,
    /// Weight of the critic's R1 gradient penalty (used when adversarial
    /// training is enabled).
    pub lambda_reg: f64,
    /// Weight reserved for the boundary-fade annealing schedule.
    pub lambda_fade: f64,
    /// Weight of the primitive-volume prior.
    pub lambda_vol: f64,
    /// Whether the adversarial (critic) term participates in the generator
    /// objective.
    pub adversarial_enabled: bool,
    /// Number of pyramid levels in the perceptual proxy (level 0 is the
    /// full-resolution image; 1 reduces the proxy to plain reconstruction).
    pub perc_levels: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_perc: 20.0,
            lambda_reg: 1e-4,
            lambda_fade: 1e-2,
            lambda_vol: 1e-2,
            adversarial_enabled: false,
            perc_levels: 3,
        }
    }
}

pub use critic::{loss_disc, ConvCritic, CriticModel, DiscLosses, LinearCritic};
pub use distill::{
    camera_forward, distill, eval_dataset_psnr, render_latent, DistillConfig, DistillReport,
};
pub use fit::{fit_scene, fit_scene_views, FitConfig, FitReport};
pub use invert::{invert, InvertConfig, InvertReport};
pub use losses::{
    f_logistic, loss_perc_proxy, loss_rec, prior_volume, total_loss, LossBreakdown,
};
pub use optim::{Adam, AdamConfig};
pub use teacher::{make_teacher, MultiViewDataset, TeacherSpec, ViewRecord};
