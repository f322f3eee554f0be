//! Persistence: run configuration files and `LPFT` checkpoints.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{scatter_masks, swap_adapter, Checkpoint, Stage};
pub use config::{load_config, parse_config, render_config};
