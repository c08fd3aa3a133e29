//! Linear-complexity attention over learned semantic groups, the semantic
//! segmentation branches built around it, an exact FLOP/parameter cost
//! model with an instrumented executor to check it, and a panoptic-quality
//! evaluator.

pub mod autodiff;
pub mod branches;
pub mod cost;
pub mod einsum;
pub mod error;
pub mod io;
pub mod lintention;
pub mod metrics;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod verification;

pub use error::{Error, Result};
pub use tensor::{Axis, Tensor};
