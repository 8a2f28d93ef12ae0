//! Differential clustering of embedding sets with random Fourier features.
//!
//! Given a test set `X` and a reference set `Y`, FINC finds directions in a
//! Gaussian-kernel feature space along which `X` carries more mass than
//! `rho` times `Y`. Each such direction (a *mode*) scores samples by how
//! strongly they belong to a cluster that is over-represented in `X`.

pub mod covariance;
pub mod error;
pub mod linalg;
pub mod oracle;
pub mod pipeline;
pub mod rff;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod tensor_io;
pub mod tuning;

pub use covariance::{conditional_covariance, ConditionalCovariance, CovarianceAccumulator};
pub use error::{FincError, Result};
pub use rff::{sample_basis, FeatureVector, FourierBasis};
pub use spectral::{
    extract_modes, finc_spectrum, finc_spectrum_auto, ConditionalSpectrum, Mode, ModeThreshold, SpectrumRoute,
};
pub use tensor_io::{load_embeddings, save_embeddings, EmbeddingSet};
