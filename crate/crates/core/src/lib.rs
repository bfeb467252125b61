//! Heterogeneous graph prompt tuning: a contrastively pre-trained graph
//! encoder is frozen and adapted to few-shot node classification through
//! class tokens, feature tokens, and multi-view neighborhood attention.

pub mod aggregation;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod hetgraph;
pub mod numerics;
pub mod prompts;
pub mod synth;
pub mod tuner;

pub use error::{Error, ErrorKind, Result};
