//! Graph-prior detection head: a class co-occurrence prior turned into scene
//! graphs, doubly stochastic graph attention over proposals, and an energy
//! model that refines graphs with Langevin dynamics.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod energy;
pub mod error;
pub mod graph;
pub mod mp;
pub mod params;
pub mod prior;
pub mod scenes;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
