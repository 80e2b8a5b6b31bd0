//! Desk-scale laboratory for personalising a conditional diffusion model to a
//! few-shot subject while anchoring it to its pretrained superclass.
//!
//! The pieces, bottom up:
//!
//! - [`nn`]: dense layers, SiLU, low-rank adapters and Adam, all in `f64`.
//! - [`diffusion`]: variance-preserving schedules, DDPM/DDIM samplers and
//!   guidance combinators.
//! - [`concepts`]: analytic worlds of Gaussian-mixture superclasses, affine
//!   contexts and a rare subject with exact densities.
//! - [`objectives`]: reconstruction, prior-preservation, blended and anchored
//!   losses, plus a checker for their algebraic equivalence.
//! - [`personalize`]: pretraining, snapshotting, the four personalisation
//!   methods and the anchor-weight sweep.
//! - [`metrics`] and [`dynamics`]: fidelity/alignment scores and the drift
//!   probes recorded during training.
//! - [`lab`]: config parsing, run directories and the commands behind the
//!   `anchorlab` binary.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod concepts;
pub mod condition;
pub mod diffusion;
pub mod dynamics;
pub mod error;
pub mod lab;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod personalize;
pub mod rng;
pub mod stats;
pub mod svg;

pub use condition::{Concept, Condition, Context};
pub use error::{Error, Result};
