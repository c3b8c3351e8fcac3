//! Deformable butterfly (DeBut) structured sparse matrices.
//!
//! A DeBut factor `R^(p,q)_(r,s,t)` is a `p × q` matrix made of
//! `b = p/(r·t)` diagonal blocks, each an `r × s` grid of `t × t` diagonal
//! matrices, so it stores only `p·s` values. Chains of such factors replace a
//! dense (flattened convolution) matrix at a fraction of its parameters and
//! multiply-adds.
//!
//! * [`factor`]: signatures, masks and the structured product.
//! * [`chain`]: chain validation, statistics, expansion and initialization.
//! * [`generator`]: automatic chain design for a convolution layer or model.
//! * [`conv`]: im2col lowering, chain-based convolution, the
//!   depthwise/pointwise reading of a chain, and the KL feature distance.
//! * [`fitting`]: alternating least squares on chain values.
//! * [`io`]: JSON chain specs and binary tensor files.
//!
//! ```
//! use debut::{DeButChain, FactorSignature, ChainKind};
//!
//! let sigs = [
//!     FactorSignature::new(18, 27, 2, 3, 1)?,
//!     FactorSignature::new(6, 18, 1, 3, 2)?,
//!     FactorSignature::new(6, 6, 3, 3, 2)?,
//! ];
//! let chain = DeButChain::from_signatures(&sigs)?;
//! assert_eq!(chain.kind(), ChainKind::Monotonic);
//! assert_eq!(chain.shape(), (6, 27));
//! assert_eq!(chain.stats().nnz_total, 90);
//! # Ok::<(), debut::DebutError>(())
//! ```

pub mod chain;
pub mod conv;
pub mod error;
pub mod factor;
pub mod fitting;
pub mod generator;
pub mod io;
pub mod tally;
pub mod tensor;

pub use chain::{validate_chain, ChainKind, ChainStats, DeButChain, InitScheme};
pub use conv::{
    apply_dsc, chain_filters, conv_direct, conv_via_chain, flatten_filters, im2col, interpret_as_dsc,
    kl_feature_distance, unflatten_filters, ConvParams, DscPlan, LayerOperator, SamplingCase,
};
pub use error::{DebutError, Result};
pub use factor::{nonzero_mask, DeButFactor, FactorSignature};
pub use fitting::{als_fit, als_fit_from, fit_error, FitOptions, FitReport};
pub use generator::{
    generate_chain, generate_model, ChainType, GeneratorConfig, GeneratorPlan, LayerSpec, ModelSpec,
};
pub use io::{ChainSpecFile, Dtype};
pub use tensor::Tensor;

pub use nalgebra::DMatrix;
