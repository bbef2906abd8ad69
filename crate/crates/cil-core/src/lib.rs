//! Class-incremental learning toolkit built around three pieces:
//!
//! - **Memory-centric mix** ([`mcmix`]): a CutMix variant whose label
//!   coefficients are rescaled by class rarity through a non-stationary
//!   schedule, so replayed exemplars regain weight late in training.
//! - **A von Mises-Fisher classifier** ([`vmf`]): softmax over
//!   `kappa * <mu_i, z>` on the unit hypersphere, with a single learnable
//!   concentration and closed-form KL between vMF distributions.
//! - **A dynamic backbone** ([`backbone`]): one frozen feature extractor per
//!   past task plus one trainable extractor; features concatenate.
//!
//! [`training`] assembles the per-task loop (NLL + auxiliary + matching
//! losses, weight alignment, CNN/NME predictors), [`data`] builds B0/B50
//! task streams, and [`memory`] maintains the herding-based exemplar store.
//! Everything is `f64` and deterministic given a seed.

pub mod backbone;
pub mod data;
pub mod error;
pub mod mcmix;
pub mod memory;
pub mod nn;
pub mod training;
pub mod vmf;

pub use error::{CilError, Result};
