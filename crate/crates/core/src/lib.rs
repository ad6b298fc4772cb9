//! Three-factor low-rank adapters with a shared, meta-trained down projection.

pub mod adapter;
pub mod artifacts;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metatrain;
pub mod numerics;
pub mod personalize;
pub mod toymodel;

pub use error::{Error, Result};
