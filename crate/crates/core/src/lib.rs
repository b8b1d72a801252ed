//! Equiaffine geometry of frontals.
//!
//! The crate is organised bottom-up: [`jets`] and [`expr`] provide exact
//! derivative data, [`frame`] builds the moving-basis matrices of a frontal,
//! [`equiaffine`] and [`blaschke`] compute transversal-field invariants, and
//! [`reconstruct`] rebuilds a frontal from its structure data.

pub mod blaschke;
pub mod catalog;
pub mod config;
pub mod equiaffine;
pub mod expr;
pub mod frame;
pub mod jets;
pub mod reconstruct;
pub mod report;

pub use config::Config;
