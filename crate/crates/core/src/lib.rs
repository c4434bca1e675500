//! Federated training of wind turbine normal-behavior models.
//!
//! * [`nn`]: the small MLPs, backpropagation and Nesterov SGD.
//! * [`data`]: SCADA ingestion, normalization, splits and a synthetic fleet.
//! * [`federation`]: FedAvg client/server logic and the local-only baseline.
//! * [`customization`]: per-client finetuning of trailing layers.
//! * [`transport`]: wire frames plus in-process and TCP channels.
//! * [`experiment`]: configuration, strategy comparison and reports.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod customization;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod transport;

pub use error::{Error, Result};
