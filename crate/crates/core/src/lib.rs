//! Curvature-aligned federated learning.
//!
//! Clients train small MLPs under a penalty on the top eigenvalue of the
//! empirical Fisher over their correctly classified examples; the server
//! weights client models by inverse eval loss and inverse Fisher eigenvalue
//! and keeps a stochastic weight average of the global model. Baselines
//! (FedAvg, FedSAM, FedSWA, distillation FedAvg), the curvature tooling, and
//! group fairness metrics live alongside.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curvature;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod runner;
pub mod seed;

pub use error::{Error, Result};
pub use nn::{Batch, MlpSpec, ParamVector};
