//! Numerical laboratory for stochastic differential equations with irregular drift.
//!
//! The crate is organized around the chain of tools used to make sense of an SDE
//!
//! ```text
//!     dX_t = b(t, X_t) dt + sigma(t, X_t) dW_t
//! ```
//!
//! whose drift `b` is too rough for the classical theory:
//!
//! * [`grid`] — uniform periodic space-time lattices, sampled fields, smooth
//!   cutoffs, mollifiers, and a local Hardy–Littlewood maximal function;
//! * [`norms`] — Bessel-potential norms `H^{alpha,p}` and their localized
//!   space-time versions (supremum over cutoff translates of an `L^q`-in-time,
//!   `H^{alpha,p}`-in-space norm);
//! * [`pde`] — semi-implicit spectral/finite-difference solvers for the model
//!   parabolic equation and its adjoint, duality checks, and a maximal-regularity
//!   survey that tabulates how solution norms scale against source norms;
//! * [`zvonkin`] — the drift-removing diffeomorphism `Phi(t,x) = x + u(t,x)`
//!   built from a vector-valued parabolic solve, with its inverse, the
//!   transformed coefficients, and a Monte Carlo conjugacy check;
//! * [`sde`] — Euler–Maruyama path ensembles with variational flow matrices,
//!   a catalog of coefficient families (smooth through critically singular),
//!   and estimator batteries: occupation-time (Krylov) ratios, exponential
//!   (Khasminskii) functionals, Bismut–Elworthy–Li gradient weights, flow
//!   moments, pathwise contraction, tightness moduli, and weak agreement
//!   between mollification shapes;
//! * [`cli`] — scenario configs, validation, deterministic multi-worker runs,
//!   and machine-readable reports for the `zvonkin-lab` binary;
//! * [`suite`] — the bundled verification suite the binary and integration
//!   tests share.
//!
//! Everything is deterministic by construction: per-path RNG streams are
//! derived from `(master seed, path index)` so results are bit-identical for
//! any worker count, and all reductions run in a canonical order.

pub mod cli;
pub mod error;
pub mod fft;
pub mod grid;
pub mod io;
pub mod norms;
pub mod pde;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod suite;
pub mod zvonkin;

pub use error::{Error, Result};
