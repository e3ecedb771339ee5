//! Benchmarking harness for concurrent generative-AI workloads sharing one machine.
//!
//! A benchmark is a YAML file naming app tasks and a workflow that strings
//! them together. The harness expands it into a dependency graph, runs the
//! graph with the chosen GPU sharing policy (live against real servers or on
//! a simulated GPU), samples system metrics, and reports per-app SLO
//! attainment next to resource usage.

pub mod clock;
pub mod config;
pub mod dag;
pub mod adapters;
pub mod monitor;
pub mod orchestrator;
pub mod simgpu;
pub mod stats;
pub mod trace;
pub mod engine;
pub mod metrics;
pub mod cli;
