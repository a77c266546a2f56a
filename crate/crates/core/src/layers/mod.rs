//! Sparse layer kernels with exact backward passes.
//!
//! Every spatial layer is driven by a [`RuleBook`]: for each filter offset
//! it lists which active input row feeds which output row. Convolution is a
//! pure neighbourhood gather (channels multiply by `f³`), the learned part
//! lives in the per-site linear projection followed by Leaky ReLU, and
//! pooling takes the channel-wise maximum over active inputs only.

mod gather;
mod linear;
mod pool;
mod rulebook;

pub use gather::{conv_gather_backward, conv_gather_forward, gather_backward_rows, gather_rows};
pub use linear::{
    leaky_relu, linear_backward_rows, linear_forward_rows, linear_leakyrelu_backward,
    linear_leakyrelu_forward, LinearCache, LinearGrads, LinearParams, DEFAULT_ALPHA,
};
pub use pool::{maxpool_backward, maxpool_backward_rows, maxpool_forward, maxpool_rows, PoolCache};
pub use rulebook::{build_rulebook, output_spatial_size, RuleBook};
