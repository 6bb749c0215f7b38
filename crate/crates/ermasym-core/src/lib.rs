//! Sharp asymptotics for convex empirical-risk minimization with binary labels.
//!
//! Observations follow `y = f(aᵀx₀)` with i.i.d. standard Gaussian features
//! and a (possibly random) binary label function `f`. For a convex loss `ℓ`,
//! the estimator `x̂ = argmin (1/m) Σ ℓ(yᵢ aᵢᵀx)` has, in the proportional
//! limit `m/n → δ > 1`, a correlation with `x₀` that is determined by a
//! three-equation system in `(μ, α, λ)` built from the Moreau envelope of `ℓ`.
//!
//! This crate solves that system, computes the information-theoretic limit
//! over all convex losses (via the Fisher information of `W_σ = σG + SY`),
//! synthesizes the loss that attains the limit by numerical Fenchel
//! conjugation, and validates everything with a finite-dimensional Monte
//! Carlo ERM simulator.
//!
//! Module map:
//! - [`link`]: binary label models and the distribution of `SY`
//! - [`loss`]: convex losses, proximal operators, Moreau envelopes
//! - [`quad`]: deterministic expectations over `(G, SY)`
//! - [`saddle`]: the `(μ, α, λ)` system and its fixed-point solver
//! - [`limits`]: densities of `W_σ`, `κ(σ)`, `σ_opt`, Stam bound
//! - [`optloss`]: optimal-loss synthesis and achievability verification
//! - [`sim`]: finite-`n` ERM experiments and separability thresholds

pub mod error;
pub mod limits;
pub mod link;
pub mod loss;
pub mod num;
pub mod optloss;
pub mod quad;
pub mod saddle;
pub mod sim;

pub use error::CoreError;
pub use limits::{DensityTable, LsSuboptimality, SigmaOptResult, WDensity};
pub use link::{LinkModel, PairSampler};
pub use loss::{EnvelopeEval, LossSpec, Smoothness};
pub use optloss::{Convexity, OptLossTable};
pub use quad::{QuadOptions, QuadratureRule};
pub use saddle::{SaddleSolution, ScalarSaddlePoint, SolverOptions, UniquenessFlag};
pub use sim::{Experiment, ExperimentSummary, OptimizerConfig, TrialResult};
