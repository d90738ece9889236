//! Predicting which patent classification codes a company will apply for
//! next, from a continuous-time stream of patent applications.
//!
//! Companies, leaf codes and the inner nodes of the classification
//! taxonomy each carry a memory vector that is updated by a gated
//! recurrent cell whenever an application touches them. Scores fuse the
//! memories with static embeddings and the ancestors' memories.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod export;
pub mod fusion;
pub mod hierarchy;
pub mod memory;
pub mod model;
pub mod nn;
pub mod replay;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};
