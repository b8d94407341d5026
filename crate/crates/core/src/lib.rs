//! Simulation and analysis toolkit for a low-loss, polarization-maintaining
//! electro-optic photon router built from a semi-common-path Mach-Zehnder
//! interferometer with birefringence-compensated modulators.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fit;
pub mod harness;
pub mod multiphoton;
pub mod optimize;
pub mod elements;
pub mod polmath;
pub mod router;
pub mod tomography;

pub use error::{Error, Result};
