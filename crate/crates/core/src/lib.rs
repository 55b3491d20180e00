//! Digital image correlation for full-field displacement measurement under
//! large deformation, with crack detection from displacement fields using a
//! critical crack-tip-opening-displacement threshold.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod correlation;
pub mod crack;
pub mod error;
pub mod image;
pub mod interp;
pub mod io;
pub mod rgdic;
pub mod synthetic;

pub use error::{DicError, Result};
