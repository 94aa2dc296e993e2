//! Two-encoder contrastive learning with exact negative-sampling expectations,
//! closed-form gradients, and numerical probes of the quantities that govern
//! its convergence.

pub mod contrastive;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod format;
pub mod linalg;
pub mod mask;
pub mod monitors;
pub mod oracle;
pub mod rng;
pub mod trainer;

pub use contrastive::{
    grad_params, losshat_all, losshat_pair, losstilde, sample_loss, total_loss, total_loss_exact, total_loss_mc,
    EncodedBatch, Estimation, Gradients, HyperParams, LossVectors, McEstimate, DEFAULT_ENUMERATION_CAP,
};
pub use dataset::{Dataset, ValidationReport};
pub use encoder::{sign_correction, ForwardTrace, Params, Shape};
pub use error::{Error, Result};
pub use linalg::{gaussian_matrix, logsumexp, spectral_norm, Matrix};
pub use mask::SignMask;
pub use rng::{RngState, Sampler};
pub use trainer::{
    gd_step, theoretical_hyperparams, train, ProblemSize, StepRecord, TheoryConstants, TheorySchedule, TrainOptions,
    TrainRun, TrainTrace,
};
pub use monitors::{
    ce_smoothness_check, descent_check, gradient_bound_probe, init_probe, loglog_fit, perturbation_probe,
    smoothness_probe, trajectory_check, DescentContext, GradientProbeConfig, InitProbeOptions, Outcome,
    PerturbationProbeOptions, ProbeReport, ScalingFit, SmoothnessProbeOptions,
};
