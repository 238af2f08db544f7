//! Refinement of noisy segmentation label maps with conditional random
//! fields over pixel grids.
//!
//! The crate takes an appearance image plus an initial (typically noisy)
//! label map, turns the labels into per-class unary costs controlled by a
//! single confidence parameter, and sharpens them by mean-field inference
//! in one of two pairwise models:
//!
//! * a fully-connected model with Gaussian edge potentials over joint
//!   position/color features, made tractable by approximate
//!   high-dimensional filtering on a permutohedral lattice
//!   ([`filter::fast_filter`]), and
//! * a 4-connected grid Potts model as the classical baseline.
//!
//! Supporting modules cover PNG raster and palette I/O ([`io`]),
//! accuracy/IoU evaluation against ground truth ([`eval`]), and
//! deterministic synthetic fixtures for end-to-end testing ([`fixtures`]).

pub mod error;
pub mod eval;
pub mod filter;
pub mod fixtures;
pub mod inference;
pub mod io;
pub mod model;
pub mod unary;

pub use error::{Error, Result};
pub use model::{
    builtin_palette, validate_params, ClassPalette, CrfParams, ImageTensor, LabelMap,
    MarginalField, ModelKind, UnaryField,
};
