//! Evolutionary search over textual reasoning principles for vision-language
//! questions, with a simulation harness for the search dynamics.

pub mod aggregation;
pub mod cli;
pub mod client;
pub mod config;
pub mod evolution;
pub mod fitness;
pub mod grounding;
pub mod level;
pub mod mock;
pub mod pipeline;
pub mod rational;
pub mod routing;
pub mod scheduler;
pub mod simulation;
