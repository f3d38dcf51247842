//! Model-based goal data augmentation for goal-conditioned weighted
//! supervised learning on maze tasks.

pub mod augment;
pub mod cluster;
pub mod data;
pub mod env;
pub mod error;
pub mod config;
pub mod evaluate;
pub mod dynmodel;
pub mod numerics;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod stats;

pub use error::{Error, Result};
