//! Vision-style localization and autonomous driving of a bronchoscope in a
//! branched airway tree.
//!
//! The crate is organized bottom-up:
//!
//! * [`skeleton`]: airway centerline tree, structural queries, synthetic trees
//! * [`geometry`]: poses, the visibility cone, ground-truth observations, pose errors
//! * [`perception`]: noise-configurable stand-ins for the airway networks and the training loss
//! * [`localization`]: per-frame rigid alignment and the bifurcation particle filter
//! * [`control`]: trajectory planning, view-angle controller, recovery supervisor
//! * [`simulator`]: scope kinematics, tracking/driving episodes, JSON Lines logs
//! * [`evaluation`]: F1, averaged precision-recall, tracking errors, driving statistics

pub mod control;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod localization;
pub mod perception;
pub mod simulator;
pub mod skeleton;

use std::path::Path;

use serde::de::DeserializeOwned;

pub use error::{Error, Result};
pub use geometry::{Pose, ViewAngles, VisibilityConfig};
pub use skeleton::{AirwayId, AirwayTree, TreeGenConfig};

/// Reads a JSON configuration file; unknown fields are rejected by the
/// config types themselves.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
