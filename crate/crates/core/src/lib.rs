#![no_std]
//! Numerical core for stochastic gradient flows on the 2-Wasserstein space.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assignment;
pub mod basis;
pub mod diffeo;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod gradient;
pub mod linalg;
pub mod measure;
pub mod pme;
pub mod quadrature;
pub mod reference;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
