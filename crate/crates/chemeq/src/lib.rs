//! Chemical-equilibrium calculations by Gibbs energy minimization, with an
//! on-demand learning layer that replaces most solver calls by first-order
//! predictions from previously solved states, and a 1D reactive-transport
//! driver that exercises the two side by side.
//!
//! Module map:
//! - [`chemsys`]: elements, species, phases, formula matrix.
//! - [`thermo`]: standard potentials, activities, chemical potentials and
//!   their derivatives.
//! - [`equilibrium`]: the conventional solver (KKT interior point) and the
//!   sensitivity derivatives of the equilibrium state.
//! - [`smart`]: record store, nearest-neighbor search, predict/accept/learn.
//! - [`transport`]: implicit advection-diffusion of element amounts with
//!   per-cell equilibration (operator splitting).
//! - [`config`] / [`cli`]: file format and command-line front end.

pub mod chemsys;
pub mod cli;
pub mod config;
pub mod equilibrium;
pub mod linalg;
pub mod presets;
pub mod smart;
pub mod thermo;
pub mod transport;
