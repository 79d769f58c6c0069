//! Distilling a teacher ensemble into a deep latent factor student: one
//! network emitting a mean and a low-rank loading matrix, fitted by EM to the
//! teachers' function values at a set of design points. Sampling latents
//! from the fitted student yields an arbitrary number of cheap members.
//!
//! Everything numeric is generic over [`Real`]; the aliases below fix the
//! scalar to `f64`, which is what the pipeline and CLI use.

// `!(x > 0.0)` is how NaN gets rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod dlf;
pub mod error;
pub mod metrics;
pub mod multi;
pub mod network;
pub mod noise;
pub mod numerics;
pub mod ood;
pub mod pipeline;
pub mod scalar;
pub mod shift;
pub mod teacher;

pub use error::{Error, Result};
pub use numerics::SeededRng;
pub use scalar::Real;

pub type Matrix = numerics::Matrix<f64>;
pub type LowRankGaussian = numerics::LowRankGaussian<f64>;
pub type DlfModel = dlf::DlfModel<f64>;
pub type MultiDlfModel = multi::MultiDlfModel<f64>;
pub type TeacherEnsemble = teacher::TeacherEnsemble<f64>;
pub type PredictiveMixture = metrics::PredictiveMixture<f64>;
pub type AdaptedHead = shift::AdaptedHead<f64>;
