//! Job-based prover service, public bulletin and `csmt` command line on top
//! of `csmt-core`.

pub mod api;
pub mod bundle;
pub mod cli;
pub mod client;
pub mod server;
pub mod service;
pub mod workflow;
