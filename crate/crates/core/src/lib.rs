//! Simulation and reference implementation of a layered key management
//! system for a metropolitan QKD network.

pub mod aaa_manager;
pub mod audit;
pub mod config;
pub mod controller;
pub mod crypto_relay;
pub mod deploy;
pub mod domain;
pub mod engine;
pub mod kms_akms;
pub mod kms_ckms;
pub mod kms_ukms;
pub mod qkd_link_sim;
pub mod rng;
pub mod sae;
pub mod transport;
