//! Score distillation engine.
//!
//! The crate optimizes an explicit voxel grid so that its renders, when
//! noised and denoised by a diffusion prior, agree with that prior's idea
//! of the conditioned scene. The pieces are deliberately small and pure:
//!
//! * [`schedules`]: closed-form parameter schedules over diffusion time
//!   and optimization iteration.
//! * [`guidance`]: classifier-free guidance arithmetic and the rescaled
//!   variant that fixes its variance inflation.
//! * [`freeu`]: training-free feature rebalancing for decoder stages,
//!   dynamic variants included.
//! * [`prior`]: the diffusion noise schedule plus two interchangeable
//!   noise predictors (a closed-form Gaussian mixture and a tiny trained
//!   UNet with a hand-written backward pass).
//! * [`renderer`]: emission-absorption voxel rendering with an analytic
//!   gradient with respect to the grid.
//! * [`sds`]: the score distillation loop tying the above together, with
//!   AdamW on the raw grid parameters.
//! * [`config`]: the INI-style experiment description read by the CLI.
//!
//! Everything is `f64` and single-threaded on purpose: runs are
//! bit-reproducible for a fixed seed, which the test suite relies on.

pub mod config;
pub mod error;
pub mod freeu;
pub mod guidance;
pub mod oracle;
pub mod prior;
pub mod renderer;
pub mod schedules;
pub mod sds;

pub use error::{Error, Result};
