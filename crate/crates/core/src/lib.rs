//! Core of a hierarchically decoupled crowd-counting network.
//!
//! Point annotations become Gaussian density maps and density-level labels
//! ([`gt`]). A small multi-resolution [`backbone`] feeds two branches: the
//! decoupling branch ([`ddm`]) classifies every cell into background or one of
//! `n` density levels, and the estimation branch ([`fdem`]) runs one density
//! expert per level on features enriched by scale-adaptive fusion ([`saff`]).
//! Each expert's map is gated by its level's soft mask and the gated maps are
//! summed into the final density. Both branches train jointly ([`trainer`])
//! on the regression and classification losses ([`objective`]).
//!
//! The crate is `no_std` and needs only `alloc`; IO lives in a companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ablation;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod ddm;
pub mod error;
pub mod fdem;
pub mod graph;
pub mod gt;
pub mod layers;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod saff;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::HdNet;
pub use trainer::TrainConfig;
