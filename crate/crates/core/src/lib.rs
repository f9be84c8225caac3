//! Core simulation and learning machinery for modular robots that redesign
//! themselves by breaking weld joints and walking off with the remaining body.
//!
//! Everything in this crate is `no_std` (with `alloc`) and deterministic:
//! all randomness flows through explicitly seeded generators, so identical
//! seeds produce identical morphologies, physics rollouts, and training runs
//! on a given platform. IO, file formats, parallel orchestration, and the
//! CLI live in the companion `molt` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod eval;
pub mod expert;
pub mod math;
pub mod morphology;
pub mod physics;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod runtime;
pub mod stats;
pub mod trajectory;
