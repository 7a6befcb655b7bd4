//! Sequence segmentation by balanced kernel clustering with a sigmoid-based
//! relaxation of segment boundaries.
//!
//! Segment boundaries are modelled as midpoints of steep sigmoids whose sum
//! gives every sample a continuous label. That makes the kernel k-means
//! objective differentiable in a handful of unconstrained parameters, which
//! are then fitted by gradient descent ([`segmenter::kcsr_segment`]), by
//! minibatch SGD on partial kernels ([`segmenter::skcsr_segment`]), or
//! jointly over several related sequences ([`segmenter::mkcsr_segment`]).
//!
//! [`dp`] holds an exact dynamic-programming solver for small inputs and
//! [`metrics`] the matched accuracy and NMI scores.

pub mod data;
pub mod dp;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod segmenter;
pub mod sigmoid;

pub use data::{DataSequence, MultiSequence};
pub use error::{KcsrError, Result};
pub use kernels::{KernelMatrix, KernelSpec};
pub use segmenter::{
    kcsr_segment, mkcsr_segment, skcsr_segment, LambdaPolicy, Method, Segmentation, SegmentationRequest,
    SegmentationResult,
};
