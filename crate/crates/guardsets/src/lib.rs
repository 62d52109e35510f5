//! Guard set formation for Tor-like networks, built on AS customer cones,
//! together with the bandwidth-quantum baseline design it is measured
//! against and the adversary machinery used to compare the two.

pub mod adversary;
pub mod asgraph;
pub mod assignment;
pub mod bwsets;
pub mod exec;
pub mod hierarchy;
pub mod ids;
pub mod ingest;
pub mod pathsec;
pub mod simkit;
