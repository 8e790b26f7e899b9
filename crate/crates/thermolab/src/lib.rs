//! Numerical laboratory for generalized thermostat flows on the unit tangent
//! bundle of a closed hyperbolic surface.
//!
//! The library models flows generated by F = X + lambda V on SM, where X is
//! the geodesic spray of a (possibly conformally deformed) hyperbolic metric,
//! V the fiber rotation field, and the thermostat intensity
//! lambda(x, v) = f(x) + <e(x), iv> + q_x(v, v) combines a scalar potential,
//! a vector-field coupling and a quadratic differential term.  On top of the
//! flow itself it computes the asymptotic invariants of the weak foliations:
//! stable/unstable slope fields, Godbillon-Vey integrals, Lyapunov exponents
//! and entropy production.
//!
//! All computations happen in the Poincaré disk chart of the universal cover;
//! the closed surface is the quotient by an explicit genus-2 octagon group
//! ([`geom::FuchsianGroup`]).

pub mod util;
pub mod elliptic;
pub mod families;
pub mod fields;
pub mod flow;
pub mod fourier;
pub mod geom;
pub mod liouville;
pub mod mesh;
pub mod riccati;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point too close to the ideal boundary: |z| = {0}")]
    OutsideDisk(f64),
    #[error("could not reduce point to the fundamental domain within {0} steps")]
    ReductionFailed(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("numerical fault: {0}")]
    Numerical(String),
    #[error("hyperbolicity not certified: {0}")]
    NotCertified(String),
    #[error("scenario schema violation: {0}")]
    Schema(String),
    #[error("verification mismatch: {0}")]
    VerifyMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
