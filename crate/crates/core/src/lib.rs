//! Surrogate forward modelling and neural inverse design for multimode
//! post-loaded SIW resonators.

pub mod checksum;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod neural;
pub mod pipeline;
pub mod wave;
