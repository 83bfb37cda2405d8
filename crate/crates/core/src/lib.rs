//! Aux-VAE disentanglement lab.

pub mod tensor;
pub mod nn;
pub mod genmodel;
pub mod objective;
pub mod metrics;
pub mod datagen;
pub mod trainer;
pub mod experiments;
