//! Diffusion sampling with guided denoising steps.
//!
//! A Gaussian mixture provides an exact denoiser through Tweedie's formula
//! and a quadrature oracle for it. The EDM sampler draws chains with
//! optional churn and, inside a window of outer steps, refines each
//! denoised prediction with a few Adam steps on a consistency loss. The
//! `control` submodule holds the closed-form optimal control that motivates
//! the per-step refinement.

pub mod control;
pub mod gmm;
pub mod sampler;

pub use control::{hamiltonian, hamiltonian_stationarity, optimal_control, simulate_controlled_ode, MIN_ODE_STEPS};
pub use gmm::{gmm_denoiser, gmm_denoiser_oracle, GmmComponent, GmmSpec, ORACLE_NODES};
pub use sampler::{
    edm_sample, face_optimize, karras_schedule, Denoiser, GuidanceConfig, GuidanceLoss, SampleOutput, SamplerConfig, TraceRow,
};
