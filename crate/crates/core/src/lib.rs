//! Deterministic simulator and placement engine for Mixture-of-Experts
//! inference spread over cooperating edge servers.
//!
//! Numeric kernels (co-activation estimation, synthetic activations, token
//! fusion, popularity tracking) are generic over [`Scalar`]; the aliases
//! below fix them to `f64` or `f32`. Simulated time is always `f64`.

pub mod compression;
pub mod edgenet;
pub mod error;
pub mod model;
pub mod paging;
pub mod placement;
pub mod plan;
pub mod scalar;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type CoActivationMatrix = model::CoActivation<f64>;
pub type CoActivationMatrix32 = model::CoActivation<f32>;
pub type PopularityModel = paging::Popularity<f64>;
pub type PopularityModel32 = paging::Popularity<f32>;
pub type ActivationSynth = model::ActivationSynth<f64>;
pub type ActivationSynth32 = model::ActivationSynth<f32>;
pub type FusionOutcome = compression::FusionOutcome<f64>;
