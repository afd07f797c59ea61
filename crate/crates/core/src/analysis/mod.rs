//! Receptive fields, `m` heatmaps and the `m` stability probe.

pub mod erf;
pub mod heatmap;
pub mod image;
pub mod stability;

pub use erf::{erf_map, erf_model, DwConvStack, ErfMap};
pub use heatmap::{bilinear_upsample, m_heatmap, MHeatmap};
pub use stability::{comparative_report, stability_probe, StabilityTrace};
