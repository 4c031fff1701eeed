//! Pose estimation in CT frame from airway observations.
//!
//! Two paths: [`airwaynet`] matches a labeled observation against the
//! skeleton and aligns it rigidly, with no memory between frames;
//! [`filter`] assigns unlabeled observations to skeleton bifurcations with
//! a stateful particle filter.

pub mod airwaynet;
pub mod filter;

use serde::{Deserialize, Serialize};

pub use airwaynet::{align_pose, find_consistent_bifurcation, solve_wahba, AirwayNetLocalizer, BifurcationMatch};
pub use filter::{
    assignment_fits, filter_step, fit_probability, normal_pdf, p_gen, select_particle, FilterConfig, FilterEstimate, FilterState, Fit,
    Particle, Prior,
};

use crate::geometry::Pose;
use crate::skeleton::AirwayId;

/// A localizer's output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub pose: Pose,
    /// Bifurcation the observation was assigned to.
    pub parent: AirwayId,
    pub children: Vec<AirwayId>,
}

/// Which localization path an episode runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LocalizerKind {
    #[default]
    AirwayNet,
    ParticleFilter(FilterConfig),
}
