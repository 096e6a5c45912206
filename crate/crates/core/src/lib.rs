//! Cooperative flow-based alignment of `k` distributions.
//!
//! Each domain `j` gets an invertible flow `T_j`; all latents share one
//! density model `Q`. Training alternates between fitting `Q` to the latent
//! mixture and moving every `T_j` toward `Q`, minimizing
//!
//! ```text
//! L = sum_j w_j E_{x ~ P_j}[ -ln|det J_{T_j}(x)| - ln Q(T_j(x)) ]
//! ```
//!
//! which upper-bounds the generalized Jensen-Shannon divergence of the
//! latents up to the constant `sum_j w_j H(P_j)`. Translation between domains
//! is `T_{j'}^{-1}(T_j(x))`.
//!
//! Fixing `Q` to `N(0, I)` recovers independent maximum-likelihood flows;
//! fixing `T_2` to the identity with `k = 2` recovers a single-map
//! log-likelihood-ratio setup. Both are available as [`alignment::Mode`]s.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the double-precision instantiations used by the harness.

pub mod alignment;
pub mod checkpoint;
pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod flows;
pub mod matrix;
pub mod nn;
pub mod numeric;
pub mod scalar;

pub use error::{AubError, Result};
pub use scalar::Scalar;

pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type FlowSequence64 = flows::FlowSequence<f64>;
pub type FlowSequence32 = flows::FlowSequence<f32>;
pub type ParameterStore64 = numeric::ParameterStore<f64>;
pub type AlignmentModel64 = alignment::AlignmentModel<f64>;
pub type AlignmentModel32 = alignment::AlignmentModel<f32>;
pub type DomainDataset64 = data::DomainDataset<f64>;
