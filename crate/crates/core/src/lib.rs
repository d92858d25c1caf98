//! High-dimensional LIBOR market model pricing through PDE expansions.
//!
//! The value function of an `N`-factor LMM derivative is approximated by a
//! weighted sum of one- and two-dimensional heat-equation solves in the
//! principal-component coordinates of the log-rate covariance matrix. The
//! weights come from finite-difference stencils in eigenvalue space, which
//! is the same thing as an anchored ANOVA decomposition of the solution.
//!
//! Modules:
//! - [`model`]: correlation, covariance, spectrum, frozen drift, z-transform.
//! - [`heatpde`]: Crank-Nicolson / Peaceman-Rachford solvers on arctan-mapped grids.
//! - [`anova`]: stencils, expansion plans and term combination.
//! - [`products`]: Bermudan payer swaption and ratchet floor.
//! - [`mcbench`]: Monte Carlo benchmarks (log-Euler LMM, Andersen-Broadie bounds,
//!   shared-noise estimation of expansion terms).
//! - [`cli`]: batch experiment runner.

pub mod anova;
pub mod cli;
pub mod error;
pub mod heatpde;
pub mod mcbench;
pub mod model;
pub mod products;
pub mod spline;

pub use error::{Error, Result};
