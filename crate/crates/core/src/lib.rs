//! Real-time monitoring stack for residential collective self-consumption.
//!
//! Simulated Linky meters emit TIC frames, gateways publish telemetry over
//! an MQTT 3.1.1 subset, and a service stores the data, computes
//! self-consumption and self-sufficiency rates, allocates production under
//! distribution keys, supervises gateways and serves an HTTP API.

pub mod analytics;
pub mod clock;
pub mod gateway;
pub mod mqtt;
pub mod service;
pub mod sim;
pub mod store;
pub mod tic;
