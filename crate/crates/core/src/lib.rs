//! Ground reaction forces and moments from wearable-sensor accelerations.
//!
//! The crate covers the whole chain: trial ingest and quality gating, virtual
//! accelerometers from marker trajectories, orientation alignment, stance
//! detection, image/target encoding, a compact convolutional regressor and
//! agreement metrics. A deterministic synthetic generator stands in for
//! laboratory data.

pub mod align;
pub mod encode;
pub mod eval;
pub mod gait;
pub mod hash;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod simulate;
pub mod trial;

pub use trial::*;
