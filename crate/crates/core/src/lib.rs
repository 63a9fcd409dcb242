//! Multi-source knowledge distillation into the learnable prompts of a
//! frozen dual-encoder vision-language model.
//!
//! Heterogeneous teacher agents (vision, language, text-to-image,
//! image-to-text) supervise a prompted student through three distillation
//! channels fused by mixture-of-agents gates. After training the agents,
//! gates and projections are dropped and the student runs alone.
//!
//! ```
//! use transagent::eval::harmonic_mean;
//! assert!((harmonic_mean(85.29, 77.62).unwrap() - 81.27).abs() < 0.01);
//! ```

pub mod agents;
pub mod autodiff;
pub mod cache;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gating;
pub mod losses;
pub mod model;
pub mod seed;
pub mod trainer;
pub mod world;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{EvalReport, Experiment};
pub use trainer::{TrainConfig, TrainedStudent, Trainer};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/agents.md")]
    mod agents {}
    #[doc = include_str!("../../../book/src/gating.md")]
    mod gating {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/cache.md")]
    mod cache {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
