//! Unsupervised deep clustering for multichannel speech separation.
//!
//! A complex angular central Gaussian mixture model (cACGMM) fitted per
//! mixture acts as a teacher. Its frequency-aligned posterior masks supervise
//! a deep clustering student that only sees the log spectrum of one channel.
//! At prediction time the student's k-means masks are used directly or seed a
//! second cACGMM fit, and sources are extracted by masking or by a mask-driven
//! MVDR beamformer.
//!
//! Conventions shared by every module:
//! - STFT tensors are stored `T x F x D` (frame-major, then bin, then channel).
//! - Masks are stored `K x T x F`.
//! - Whenever time-frequency slots are flattened, the order is t-major,
//!   f-minor: slot `n = t * F + f`.

pub mod beamform;
pub mod cacgmm;
pub mod clustering;
pub mod error;
pub mod linalg;
pub mod masks;
pub mod metrics;
pub mod mixsim;
pub mod permalign;
pub mod pipeline;
pub mod stft;
pub mod student;
pub mod tensor_io;

pub use error::{Error, Result};

/// Double precision complex scalar used for all spectral computations.
pub type C64 = num_complex::Complex<f64>;
