//! Deterministic federated-learning simulator with an untargeted
//! model-poisoning adversary and the attestedFL behavioural defense.

pub mod attack;
pub mod config;
pub mod data;
pub mod defense;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod model;
pub mod param;
pub mod seed;

pub use error::{Error, Result};
