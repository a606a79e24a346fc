//! Behavioral metrics, chronological embeddings and temporal measurement on
//! tabular MDPs.
//!
//! The metric and distance code is generic over [`Scalar`] (`f32` or `f64`);
//! the autodiff tape and trainer work in `f64`.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod distances;
pub mod exact_metrics;
pub mod grad;
pub mod io;
pub mod mdp;
pub mod rng;
pub mod scalar;
pub mod temporal;
pub mod trainer;

pub use scalar::Scalar;

pub type Mdp = mdp::TabularMdp<f64>;
pub type Mdp32 = mdp::TabularMdp<f32>;
pub type Policy = mdp::Policy<f64>;
pub type Policy32 = mdp::Policy<f32>;
pub type MetricTable = exact_metrics::MetricTable<f64>;
pub type ChronoMetricTable = exact_metrics::ChronoMetricTable<f64>;
