//! HTTP/JSON API and shared plumbing for the `trackscreen` command-line tool.
//!
//! [`api::router`] builds the axum application over a [`trackscreen_core::Store`] and an
//! in-memory [`runs::RunRegistry`]. The CLI verbs in `main.rs` call the same functions
//! the handlers do.

pub mod api;
pub mod config;
pub mod error;
pub mod files;
pub mod report;
pub mod runs;
pub mod views;

pub use api::{router, AppState};
pub use config::ServerConfig;
pub use error::ApiError;
