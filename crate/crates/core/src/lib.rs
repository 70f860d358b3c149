//! Bias correction and stochastic downscaling of daily mean temperature.
//!
//! The crate is organised along the processing chain: coarse-scale moment
//! modelling and correction ([`moments`], [`correction`]), the fine-scale
//! residual weather generator ([`residual`], [`downscale`]), the empirical
//! quantile mapping reference ([`eqm`]) and out-of-sample verification
//! ([`evaluation`]). [`synth`] generates worlds with known parameters and
//! [`pipeline`] wires the stages to files.

pub mod calendar;
pub mod correction;
pub mod downscale;
pub mod eqm;
pub mod evaluation;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod moments;
pub mod normal;
pub mod optim;
pub mod pipeline;
pub mod regrid;
pub mod residual;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
