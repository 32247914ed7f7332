//! EnsNet: a convolutional base network whose final feature-maps are split
//! along channels into disjoint blocks, each feeding an independently
//! trained fully connected subnetwork. Prediction is a majority vote of the
//! base network and all subnetworks.
//!
//! The crate is self-contained: a small define-by-run autodiff engine
//! ([`graph`]), the layers the architecture needs ([`layers`]), Adam
//! ([`optim`]), the model builder ([`model`]), alternating training
//! ([`train`]), voting ([`inference`]), dataset loading and augmentation
//! ([`data`]), metrics export ([`metrics`]) and run configuration
//! ([`config`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, DataError, Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};
