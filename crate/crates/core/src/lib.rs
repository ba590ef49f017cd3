//! Simulator for federated and centralized cross-validation of a cardiac
//! phenotype classifier over synthetic multi-center phantoms.

pub mod aggregation;
pub mod augmentation;
pub mod cli;
pub mod config;
pub mod evaluation;
pub mod federation;
pub mod grid;
pub mod harmonization;
pub mod model;
pub mod phantom;
pub mod seeding;
