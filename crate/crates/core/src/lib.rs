//! Core building blocks for restoring artefacts in scanning-probe-microscopy
//! frames: image and mask types with their file formats, artefact
//! simulators, mask acquisition, classical inpainting baselines and masked
//! quality metrics.

pub mod frame;
pub mod inpaint;
pub mod io;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod sim;
pub mod stats;

pub use frame::{normalize_frame, Channel, FrameError, MaskImage, ScanFrame};
pub use manifest::{ArtefactClass, ManifestEntry, ManifestError, Split};
