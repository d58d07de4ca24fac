//! Guided hybrid flow-matching sampling on a toy molecular domain.
//!
//! Continuous atom positions follow exact Gaussian velocity fields; atom
//! types, charges and bond orders follow a masking CTMC driven by exact
//! empirical posteriors. On top of that sit classifier-free guidance,
//! autoguidance, model guidance, the four discrete guidance formats, and
//! Gaussian-process tuning of the guidance weights.

pub mod bayesopt;
pub mod cli;
pub mod config;
pub mod ctmc;
pub mod denoisers;
pub mod experiments;
pub mod flowcore;
pub mod metrics;
pub mod sampler;
pub mod toymol;
