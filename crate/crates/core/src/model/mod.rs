//! VSSD backbone: configuration, layers, blocks, counting and checkpoints.

pub mod backbone;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod count;
pub mod layers;
pub mod params;

pub use backbone::Model;
pub use block::{Forward, NcssdForm, Probe};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Mixer, ModelConfig, StageSpec};
pub use count::{count_params_flops, count_params_flops_at, ParamFlopReport};
pub use params::{Bound, ParamId, ParamStore};
