//! X-supervised discriminative clustering: joint learning of a Nyström
//! kernel feature map and cluster labels from any mix of labeled and
//! unlabeled data.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod balancing;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod io;
pub mod labeling;
pub mod linalg;
pub mod stats;
pub mod trainer;
pub mod ulr;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
