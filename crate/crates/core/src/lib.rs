//! Desk-scale laboratory for query-only test-time training (qTTT) on a
//! minimal decoder-only transformer.
//!
//! The crate provides:
//!
//! * [`numeric`] — deterministic dense f64 math and a pinned seeded RNG;
//! * [`attention`] — single-query attention plus executable forms of the
//!   retrieval-margin theory (score dilution, margin requirements,
//!   needle-signal bounds);
//! * [`model`] — a tiny decoder-only transformer with prefill, frozen KV
//!   cache, RoPE toggle, span losses, query-projection gradients, decoding,
//!   and full training;
//! * [`adapt`] — the query-only test-time training loop and the closed-form
//!   single-step query-update theory;
//! * [`tasks`] — deterministic generators and oracle validators for the
//!   synthetic long-context retrieval tasks;
//! * [`flops`] — exact integer cost formulas and compute-budget matching;
//! * [`diagnostics`] — attention-mass measurement and dilution/margin sweeps;
//! * [`verification`] — the randomized theory-check suites shared by the CLI
//!   and the acceptance tests;
//! * [`harness`] — experiment configuration, runs, and report aggregation.

pub mod adapt;
pub mod attention;
pub mod diagnostics;
pub mod error;
pub mod flops;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod tasks;
pub mod verification;

pub use error::{Error, Result};
