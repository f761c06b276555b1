//! Curriculum-learning engine for imitation-learned driving planners.
//!
//! Pipeline: synthesize segments ([`world`], [`corpus`]), embed them
//! ([`embedding`]), learn a difficulty score from counterfactual planner
//! outcomes ([`difficulty`]), partition into decile buckets ([`buckets`]),
//! sample with a strategy ([`curricula`]), train a BC + MGAIL agent
//! ([`trainer`]) and evaluate it closed loop ([`eval`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod agent;
pub mod buckets;
pub mod corpus;
pub mod curricula;
pub mod difficulty;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod seeding;
pub mod stats;
pub mod trainer;
pub mod world;

pub use error::{CoreError, Result};
