//! Multi-turn grounding-based policy optimization on a synthetic
//! high-resolution visual search environment.

pub mod geometry;
pub mod imaging;
pub mod taskgen;
pub mod policy;
pub mod rewards;
pub mod rollout;
pub mod optimizer;
pub mod trainer;
