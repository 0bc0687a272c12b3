//! A desk-scale conditional diffusion lab for concept erasure.
//!
//! The data distribution is a plane of labeled Gaussian-mixture concepts with
//! closed-form scores, so every learned quantity has an exact oracle: the
//! analytic noise prediction checks the trained denoiser, and the exact
//! mixture posterior stands in for a learned similarity metric.
//!
//! Erasure training aligns a low-rank adapter's conditional branch with a
//! guidance target that points away from the erased concept and its
//! unconditional branch with a target that points toward it, so
//! classifier-free guidance suppresses the concept under any input
//! condition, including inversion-based editing that never mentions it. A
//! prior-consistency loss and a gamma-weighted prior correction inside the
//! unconditional target protect the remaining concepts.

pub mod checkpoint;
pub mod denoiser;
pub mod edit;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod linalg;
pub mod mathcheck;
pub mod plot;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod types;
pub mod universe;

pub use denoiser::{
    init_adapter, init_denoiser, merge_adapter, predict_eps, train_base, BaseTrainConfig,
    DenoiserArch, DenoiserModel, DenoiserParams, LoraAdapter,
};
pub use error::{Error, Result};
pub use eval::{
    ablation_run, concept_alignment, displacement, erasure_report, AblationOutcome,
    AblationVerdict, EvalProtocolConfig, EvalReport, Protocol,
};
pub use edit::{ddim_invert, edit, edit_batch, EditBatch, EditRecord, EditSpec, InversionMode};
pub use guidance::{
    cfg_compose, cond_erase_target, denoising_step_constants, uncond_erase_target,
    uncond_erase_target_with_prior, verify_cfg_decomposition, GammaTable, GuidanceConfig,
    StepConstants,
};
pub use sampler::{ddim_denoise, ddim_sample, AnalyticEpsModel, EpsModel, Trajectory};
pub use schedule::{ddim_step, forward_diffuse, NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use trainer::{
    erase_concept, estimate_gamma, estimate_gamma_table, loss_cond_align, loss_prior_consistency,
    loss_total, loss_uncond_align, make_training_latent, resolve_gamma, ErasureLog, ErasureRunConfig,
    ErasureVariant, GammaMode,
};
pub use types::{Condition, LatentState};
pub use universe::{Concept, ConceptUniverse, GaussianComponent};
