//! Simulated data-parallel gradient exchange.
//!
//! Reproduces the gather-versus-reduce accumulation behaviour of a tied
//! embedding/projection variable, whose gradient arrives partly as indexed
//! row slices and partly dense, and measures what each exchange strategy
//! costs in buffer bytes and modeled time.

pub mod collectives;
pub mod costmodel;
pub mod harness;
pub mod tensor;
pub mod workload;
