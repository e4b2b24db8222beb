//! Multi-cycle time-to-DLT dose-escalation models with overdose control, the
//! logistic comparators, and a trial simulation harness.

pub mod config;
pub mod experiment;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod policy;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod trial;
