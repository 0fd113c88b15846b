//! Residual estimation diffusion for low-dose PET sinogram restoration.
//!
//! The pipeline runs from synthetic ellipse phantoms through parallel-beam
//! projection and Poisson dose reduction to a pair of learned estimators: one
//! predicts the residual between low- and full-dose sinograms, the other the
//! drift that accumulates while that residual is removed step by step.
//! Classical reconstructors (FBP, MLEM, OSEM) and a DDIM baseline sit
//! alongside for comparison.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod dose;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod metrics;
pub mod schedule;
pub mod tomo;
pub mod training;

pub use diffusion::{
    apply_correction, compute_drift, forward_sample, mixed_forward_sample, reconstruct,
    reconstruct_with, residual, reverse_step, CorrectionSign, DiffusionState, DriftRecord,
    MixedMode, Predictor, ResidualField, ReverseOptions,
};
pub use dose::{denormalize, normalize, simulate_low_dose, DoseConfig, ScaleRecord};
pub use error::{RedError, Result};
pub use metrics::{nrmse, psnr, ssim, Domain, MetricsRecord, MetricsReport, Psnr, SsimConfig, SsimMode};
pub use estimator::{net_init, EstimatorParams, NetArch, NetPredictor, OptState};
pub use training::{train_dcn, train_ren, DriftCoeff, SlicePair, TrainConfig};

pub use schedule::{ResidualSchedule, ScheduleKind, TimeGrid};
pub use tomo::{Image, ProjectionGeometry, Sinogram};
