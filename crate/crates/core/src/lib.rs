//! Inclusive transition radiation from a single Dirac-particle wave packet
//! (charge and/or anomalous magnetic moment) crossing an ideally conducting
//! mirror, with an explicit spinor-algebra cross-check and the N-packet
//! coherent extension.
//!
//! All quantities are in natural units (ħ = c = 1). The library itself is
//! agnostic about the energy unit; the CLI converts everything to eV at the
//! boundary (see [`units`]).

// `!(x > 0.0)` is used on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classical;
pub mod cli;
pub mod config;
pub mod error;
pub mod kinematics;
pub mod quadrature;
pub mod radiation;
pub mod spinor;
pub mod units;
pub mod verify;
pub mod wavepackets;

pub use error::{Error, Result};

/// Real 3-vector (momenta, directions, spin vectors).
pub type Vec3 = nalgebra::Vector3<f64>;
/// Complex 3-vector (photon polarization vectors).
pub type CVec3 = nalgebra::Vector3<num_complex::Complex64>;
/// Contravariant Minkowski 4-vector, metric (+,−,−,−).
pub type FourVector = [f64; 4];

/// Minkowski product a^μ b_μ.
#[inline]
pub fn minkowski_dot(a: &FourVector, b: &FourVector) -> f64 {
    a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
}
