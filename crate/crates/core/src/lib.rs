//! Local-learning engine for residual image classifiers: a reverse-mode tensor
//! tape, gradient-isolated module partitioning, and trainers for end-to-end,
//! greedy local, cascaded and leap-augmented local objectives.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod nn;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{ActivationMeter, Graph, MeterReading, NodeId, NormMode, Region};
pub use network::{BackboneSpec, HeadConfig, Machinery, Network, PartitionPlan};
pub use params::{ParamId, ParamStore};
pub use tensor::{Element, Precision, Tensor};
