//! Federated cellular-traffic forecasting simulator.
//!
//! Trains forecasting models under FedAvg across simulated base stations,
//! meters training/inference energy and communication volume, and scores
//! every model with a multiplicative sustainability indicator.

pub mod tensor;
pub mod model;
pub mod data;
pub mod metrics;
pub mod energy;
pub mod fed;
pub mod sustainability;
pub mod experiment;
