//! HTTP/SSE front end and command-line plumbing for the procedure engine.

pub mod api;
pub mod config;
pub mod events;

pub use api::{router, ApiError, AppState};
pub use config::{FileConfig, Settings};
pub use events::Broadcaster;
