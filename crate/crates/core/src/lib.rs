//! Simulation laboratory for longitudinal randomized trials with
//! cause-classified intercurrent events.
//!
//! The crate is organized as a pipeline:
//!
//! * [`model`] — shared domain vocabulary: visit schedules, treatment
//!   regimens, intercurrent events, counterfactual trajectories, patients.
//! * [`config`] — scenario configuration (the generative model), loaded
//!   from TOML.
//! * [`sim`] — the patient/replicate generator and the observation model
//!   that turns counterfactual bundles into observed datasets.
//! * [`plan`] — the estimand-spec language: parser, semantic validation,
//!   and per-patient resolution of strategy/imputation decisions.
//! * [`impute`] — multiple-imputation engines (MAR, return-to-baseline,
//!   retrieved-dropout, jump-to-reference, copy-reference, special
//!   pattern), delta adjustment, and Rubin pooling.
//! * [`oracle`] — true estimand values computed directly from the
//!   counterfactual trajectories.
//! * [`analysis`] — per-copy ANCOVA, cross-replicate operating
//!   characteristics, and the study runner.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod impute;
pub mod model;
pub mod oracle;
pub mod plan;
pub mod rng;
pub mod sim;
