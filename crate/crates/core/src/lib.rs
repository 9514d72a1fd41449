//! Sparse Access Memory engine.

pub mod alloc;
pub mod ann;
pub mod bench;
pub mod controller;
pub mod error;
pub mod la;
pub mod linkage;
pub mod memory;
pub mod model;
pub mod snapshot;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
