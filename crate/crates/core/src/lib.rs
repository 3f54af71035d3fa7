//! Multivariate time-series anomaly detection with a cluster-partitioned
//! LSTM variational autoencoder, dynamic Peaks-Over-Threshold thresholds and
//! counterfactual (yearly-median replacement) feature attribution.

#![forbid(unsafe_code)]

pub mod attribution;
pub mod clustering;
pub mod clv;
pub mod error;
pub mod eval;
pub mod nn;
pub mod preprocess;
pub mod special;
pub mod stats;
pub mod synth;
pub mod table;
pub mod threshold;

pub use error::{Error, ErrorClass, Result};
pub use table::TimeTable;
