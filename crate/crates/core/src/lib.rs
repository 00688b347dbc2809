//! Machine unlearning as a two-task optimization problem.
//!
//! The retain loss `L_R` is minimized while the forget loss `L_F` is
//! maximized. Per-task gradients from [`autodiff`] are merged by a
//! [`combiners`] rule into one direction `g_UN = c_t·g_R − (1−c_t)·g_F`
//! (NGDiff uses the normalized difference `g_R/‖g_R‖ − g_F/‖g_F‖`), and the
//! [`scheduler`] can pick the step size from a three-point quadratic fit of
//! `L_R` along that direction. [`engine`] runs the loop and records traces.

pub mod autodiff;
pub mod bench;
pub mod combiners;
pub mod engine;
pub mod error;
pub mod objectives;
pub mod scheduler;

pub use error::{Error, Result};
