//! Reconstruction of the wave-speed coefficient `c(x) = 1 + q(x)` of
//! `c(x) u_tt = Δu` from boundary measurements generated by a line of point
//! sources, through the linear integral equation
//!
//! ```text
//! v(x, x0) = (1/4π) ∫_Ω q(ξ) / (|x - ξ| |ξ - x0|) dξ
//! ```
//!
//! whose left side is computed from time moments of the measured waves.

pub mod basis;
pub mod data;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod interp;
pub mod pipeline;
pub mod qrm;
pub mod recon;
pub mod system;

pub use error::{Error, Result};
