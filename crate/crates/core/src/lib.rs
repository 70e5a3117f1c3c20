//! Rain detection in fixed-camera video from the orientation statistics of
//! rain streaks.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bgmodel;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod hosmix;
pub mod ingest;
pub mod pipeline;
pub mod streaks;
pub mod synthrain;
pub mod temporal;

pub use error::{Error, Result};
