//! Fine-grained traffic volume inference on signalized road networks.
//!
//! The crate is organized as a pipeline:
//!
//! * [`roadnet`] — the static movement graph and per-minute signal timing plan,
//!   plus their on-disk formats.
//! * [`simulator`] — a mesoscopic queue simulator over synthetic grid networks
//!   that generates conservation-exact volume/flow datasets.
//! * [`ftstg`] — the time-layered graph whose edges carry signal-dependent
//!   mobility weights, and per-frame node features.
//! * [`model`] — the graph network (embedding, weighted max-pool propagation,
//!   gated aggregation, flow heads), its exact reverse-mode gradients, the
//!   flow-conservative state transition, and the discounted multi-step rollout.
//! * [`training`] — chronological splits, Adam, the training loop with early
//!   stopping, and the checkpoint format.
//! * [`evaluation`] — RMSE/MAPE metrics, spatio-temporal smoothness (STMAD),
//!   and the reference baselines.
//! * [`manifest`] — reproducibility manifests written next to every CLI output.
//! * [`cli`] — the `fdti` command-line front end.

pub mod cli;
pub mod evaluation;
pub mod ftstg;
pub mod manifest;
pub mod model;
pub mod roadnet;
pub mod simulator;
pub mod training;

/// Column-file float formatting: 17 significant digits round-trips every
/// finite `f64` exactly through parse.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
