#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod haf;
mod layers;
pub mod numerics;
pub mod params;
pub mod protocol;
pub mod tevd;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
