//! Analytic synthetic worlds: Gaussian-mixture superclasses, invertible affine
//! contexts and a few-shot subject carved out of one superclass.

mod gaussian;
mod io;
mod world;

pub use gaussian::{Gaussian, Mixture};
pub use world::{Affine, Subject, TrainExample, World, WorldConfig};

pub(crate) use world::quantile;
