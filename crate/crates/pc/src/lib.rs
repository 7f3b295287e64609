//! Files, backends and serving for `pc-core`.
//!
//! * [`container`]: the manifest + raw `f32` blob directory format, and the
//!   profile, adaptor-weight, direction-catalog and mask layouts built on it;
//! * [`imageio`]: PNG conversion;
//! * [`bundle`]: backend bundle specs (JSON or TOML) and the component registry;
//! * [`runner`]: a thread-per-branch runner for composition;
//! * [`report`]: evaluation reports as JSON and CSV;
//! * [`service`]: the HTTP job service.

pub mod bundle;
pub mod container;
mod error;
pub mod imageio;
pub mod report;
pub mod runner;
pub mod service;

pub use error::{PcError, PcResult};
