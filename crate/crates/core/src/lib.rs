//! Differentiable mean shift: clustering with a similarity kernel learned
//! from pairwise "similar / dissimilar" side information.
//!
//! The pipeline is: build [`training::SideInfoGraph`] constraints, train a
//! [`kernels::KernelModel`] with [`training::train`], then run
//! [`refiner::cluster`] to find centers, merge duplicates and assign points.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod kernels;
pub mod kmeans;
pub mod meanshift;
pub mod metrics;
pub mod refiner;
pub mod training;

pub use autodiff::{Tape, Tensor};
pub use error::{Error, Result};
pub use kernels::{ClassicalKernel, KernelModel, KernelVariant};
pub use refiner::{ClusterResult, NOISE};
pub use data::Dataset;
pub use refiner::ClusterConfig;
pub use training::{SideInfoGraph, Supervision, TrainConfig};
