//! Exact per-instance linear forms of feed-forward networks.
//!
//! For one concrete input `x`, every layer of a piecewise-linear network
//! (dense, convolution, pooling, batch norm, residual blocks) acts as an
//! affine map. Composing the per-layer maps yields a single pair `(W, b)`
//! with `F(x) = W·x + b`, exactly. This crate builds those pairs and uses
//! them for feature attribution, prediction decomposition (`W·x` vs `b`),
//! local-region probing, and interpretable parametric dimension reduction,
//! together with the minimal SGD machinery needed to train the networks
//! it analyzes.

pub mod attribute;
pub mod experiments;
pub mod linearize;
pub mod model;
pub mod tensor;
pub mod trainer;
