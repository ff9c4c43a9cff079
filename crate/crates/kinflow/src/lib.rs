//! File formats, the staged experiment pipeline and the `kinflow` CLI on top
//! of [`kinflow_core`].
//!
//! - [`config`]: the declarative [`ExperimentConfig`] and its profiles.
//! - [`formats`]: CSV/JSON readers and writers for every artifact.
//! - [`stages`]: generate, train, sample, diagnose and sweep as functions.
//! - [`verify`]: the theory suite.
//! - [`pipeline`]: cached end-to-end runs with a [`RunManifest`].
//! - [`plot`]: SVG energy curves and KPE box summaries.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod plot;
pub mod stages;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{Error, Result, Stage};
pub use pipeline::{run_pipeline, RunManifest};
