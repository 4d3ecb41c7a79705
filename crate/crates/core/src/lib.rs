//! Numerical laboratory for a free massless scalar field on a periodic
//! lattice with a curved background metric.
//!
//! The Gaussian law of the field is treated as a likelihood for the metric:
//! [`field_model`] builds the precision operator, samples and stress tensor,
//! [`estimator`] fits metric charts by maximum likelihood, [`fisher_lab`]
//! and [`prior_lab`] study the information geometry, [`spectral`] checks
//! heat-kernel asymptotics and [`decoherence`] integrates out metric
//! fluctuations. [`harness`] ties everything into reproducible runs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod decoherence;
pub mod error;
pub mod estimator;
pub mod field_model;
pub mod fisher_lab;
pub mod geometry;
pub mod harness;
pub mod prior_lab;
pub mod rng;
pub mod special;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use field_model::{FieldSample, GaussianField, PrecisionOperator, SpectralDecomposition};
pub use geometry::{LatticeGeometry, MetricChart, MetricField, MetricKind};
