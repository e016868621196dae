//! Continuous-time causal treatment effects for right-censored observational
//! survival data.
//!
//! The crate is organised as a pipeline:
//!
//! 1. [`cohort`] ingests and standardizes tabular cohorts and splits them.
//! 2. [`propensity`] fits an elastic-net treatment model and trims for overlap.
//! 3. [`survival`] provides Kaplan–Meier / Nelson–Aalen machinery and
//!    censoring weights.
//! 4. [`forest`] turns each horizon into doubly-robust pseudo-outcomes and
//!    fits an honest forest for conditional effects.
//! 5. [`trajectory`] fuses the horizon-wise effects into a weighted quadratic
//!    and a cross-validated smoothing spline.
//! 6. [`heterogeneity`] and [`refutation`] explain and stress-test the fit.
//!
//! [`synth`] generates cohorts with known effect trajectories and [`pipeline`]
//! wires the stages together.

pub mod cohort;
pub mod forest;
pub mod heterogeneity;
pub mod pipeline;
pub mod propensity;
pub mod refutation;
pub mod rng;
pub mod stats;
pub mod survival;
pub mod synth;
pub mod trajectory;

pub use cohort::{SubjectRecord, SurvivalCohort};
pub use forest::{Estimand, HorizonEstimate};
pub use trajectory::{EffectSeries, QuadraticFit, SplineFit};
