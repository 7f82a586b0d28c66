//! Sound source localization for small microphone arrays.
//!
//! The crate provides two localizers that share one STFT front end:
//!
//! * [`dsvd::DsvdPhat`] subtracts an offline noise correlation estimate from
//!   the running correlation, PHAT-normalizes the pairwise cross-spectra and
//!   finds the SRP-PHAT peak by projecting onto a truncated SVD of the
//!   steering matrix followed by an exact k-d tree search.
//! * [`music::GsvdMusic`] decomposes `R_nn^-1 R_xx` in every bin and scans the
//!   MUSIC pseudo-spectrum over the same direction grid.
//!
//! [`simroom`] renders reverberant, noisy scenes with the image method and
//! [`eval`] turns per-frame estimates into ROC curves, AUC tables and
//! timing reports.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the common `f64` instantiations.

pub mod correlation;
pub mod dsvd;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod geometry;
pub mod kdtree;
pub mod music;
pub mod scalar;
pub mod signals;
pub mod simroom;
pub mod stft;
pub mod wav;

pub use error::{Error, Result};
pub use scalar::Real;
pub use eval::{EvalRecord, Method};

pub type Complex64 = num_complex::Complex<f64>;

pub type MultichannelSignal = stft::MultichannelSignal<f64>;
pub type SpectraFrame = stft::SpectraFrame<f64>;
pub type MicArrayGeometry = geometry::MicArrayGeometry<f64>;
pub type DoaGrid = geometry::DoaGrid<f64>;
pub type SteeringMatrix = geometry::SteeringMatrix<f64>;
pub type CorrelationSet = correlation::CorrelationSet<f64>;
pub type CrossSpectraVector = correlation::CrossSpectraVector<f64>;
pub type SvdIndex = dsvd::SvdIndex<f64>;
pub type DsvdPhat = dsvd::DsvdPhat<f64>;
pub type GsvdMusic = music::GsvdMusic<f64>;
pub type SteeringVectorBank = music::SteeringVectorBank<f64>;
pub type DoaEstimate = estimate::DoaEstimate<f64>;

pub type SvdIndexF32 = dsvd::SvdIndex<f32>;
pub type DsvdPhatF32 = dsvd::DsvdPhat<f32>;
pub type GsvdMusicF32 = music::GsvdMusic<f32>;
