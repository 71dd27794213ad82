//! Gram-matrix geometry toolkit for regularized few-shot fine-tuning.
//!
//! The crate turns pairwise-similarity structure into first-class values and
//! builds everything else on top of them:
//!
//! - [`linalg`]: unit-row feature matrices, Gram and cosine-distance matrices.
//! - [`gw`]: metric-measure spaces, couplings, the transport-style objective,
//!   and a desk-scale upper estimator certified by coupling enumeration.
//! - [`mar`]: L1 Gram-alignment losses between a frozen and a tuned feature
//!   set, global (batch) and local (token) level, with analytic gradients.
//! - [`hms`]: supervised query-support sculpting with layer-decay weighting
//!   and a cosine temperature schedule.
//! - [`tape`]: the small reverse-mode autodiff engine the trainer runs on.
//! - [`encoder`]: a toy transformer with activation capture, value-path
//!   pseudo-forward projection, grouped freezing, and binary checkpoints.
//! - [`metrics`]: rank-correlation RSA, Calinski-Harabasz, silhouette,
//!   Hellinger distance, cosine feature shift.
//! - [`data`] / [`trainer`]: synthetic few-shot datasets and the full
//!   training loop (blended-logit cross-entropy plus the regularizers).

pub mod data;
pub mod encoder;
pub mod fdcheck;
pub mod gw;
pub mod hms;
pub mod linalg;
pub mod mar;
pub mod metrics;
pub mod tape;
pub mod trainer;

pub use linalg::{cosine_distance_matrix, gram, DistanceMatrix, FeatureMatrix, GramMatrix};
