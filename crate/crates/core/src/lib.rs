// Index loops over several same-shaped arrays are the clearer idiom for the
// dynamic-programming code in this crate.
#![allow(clippy::needless_range_loop)]

//! Tabular episodic reinforcement-learning experimentation engine.
//!
//! Implements exact posterior sampling over finite hypothesis sets warmed up
//! by expert demonstrations, the bootstrapped randomized value-iteration
//! agent family (uninformed / partially informed / informed), the Deep Sea
//! benchmark, and a seed-parallel experiment harness producing regret CSVs.

pub mod cli;
pub mod envs;
pub mod expert;
pub mod harness;
pub mod ipsrl;
pub mod mdp;
pub mod rlsvi;
pub mod rng;
