//! Balanced self-labelling: pseudo-labels from an equipartition-constrained
//! transport problem (solved with Sinkhorn-Knopp scaling or exactly), alternated
//! with cross-entropy training of a small classifier.

pub mod baselines;
pub mod data;
pub mod error;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod ot;
pub mod pipeline;
pub mod sinkhorn;

pub use error::{Error, Result};
pub use matrix::FeatureMatrix;
pub use metrics::Labeling;
pub use ot::{HardAssignment, LogPredictionMatrix, Marginals, TransportPlan};
pub use sinkhorn::{round_to_hard, sinkhorn_solve, SinkhornConfig};
