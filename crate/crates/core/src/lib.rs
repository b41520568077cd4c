//! PARAFAC2 for ragged three-way arrays, fitted either by direct-fitting
//! alternating least squares or by mean-field variational Bayes with
//! orthogonality-constrained projections (matrix von Mises-Fisher or a
//! constrained-mean matrix normal), per-slab noise precisions and ARD.

pub mod direct;
pub mod error;
pub mod io;
pub mod linalg;
pub mod seed;
pub mod select;
pub mod serde_float;
pub mod synth;
pub mod tensor;
pub mod vb;
pub mod vmf;

pub use error::{Error, Result};
pub use tensor::RaggedTensor3;
