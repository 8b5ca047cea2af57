//! Prediction-augmented MPC with an online-tuned contextual
//! disturbance predictor.
//!
//! The crate simulates the closed loop
//!
//! ```text
//!   context ─▶ encoder ─▶ embedding ─▶ affine decoder g_θ ─▶ ŵ
//!                                            ▲                │
//!                                  delayed projected          ▼
//!                                  gradient update      MPC action u_t
//!                                            ▲                │
//!                                            └── realized w ◀─┘
//! ```
//!
//! for linear plants with quadratic costs, plus an analysis suite that
//! checks the cost-gap identity, regret against the best fixed decoder
//! in hindsight, surrogate-loss discrepancy decay, and the no-signal
//! robustness limits of the decoder parameters.

pub mod analysis;
pub mod cdp;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod llm_client;
pub mod losses;
pub mod lqr;
pub mod mpc;
pub mod rng;
pub mod tuner;

pub use error::{Error, Result};
pub use lqr::SystemModel;
