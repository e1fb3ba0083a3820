//! Persistence, HTTP review API and batch runner for the trialmatch
//! prescreening engine.

pub mod api;
pub mod config;
pub mod engine;
pub mod evaluation;
pub mod runner;
pub mod store;
pub mod workspace;
