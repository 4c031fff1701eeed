use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::perception::{ObservationMatrix, ObservationRow};
use crate::skeleton::{AirwayId, AirwayTree};

/// Directions closer than this (in `|a x b|`) count as collinear.
const COLLINEAR_TOLERANCE: f64 = 1e-6;

/// A bifurcation whose observed children agree with the skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationMatch {
    pub parent_id: AirwayId,
    pub child_ids: Vec<AirwayId>,
    pub obs_parent: ObservationRow,
    pub obs_children: Vec<ObservationRow>,
}

impl BifurcationMatch {
    /// Camera-frame bifurcation point (the parent's `y_p`).
    pub fn bif_point_cam(&self) -> Vector3<f64> {
        self.obs_parent.y_p
    }
}

/// Picks the airway with the highest `p_hasVisChild` (ties: nearest) among
/// those whose bifurcation and at least two skeleton children are visible.
pub fn find_consistent_bifurcation(obs: &ObservationMatrix, tree: &AirwayTree, threshold: f64) -> Option<BifurcationMatch> {
    let mut best: Option<(f64, f64, AirwayId)> = None;
    for a in tree.airways() {
        let row = obs.row(a.id);
        if row.p_has_vis_child < threshold || !a.is_bifurcation() {
            continue;
        }
        let visible_children = a.children.iter().filter(|&&c| obs.is_visible(c, threshold)).count();
        if visible_children < 2 {
            continue;
        }
        let key = (row.p_has_vis_child, row.y_p.norm());
        let better = match best {
            None => true,
            Some((p, d, _)) => key.0 > p || (key.0 == p && key.1 < d),
        };
        if better {
            best = Some((key.0, key.1, a.id));
        }
    }
    let (_, _, parent_id) = best?;
    let child_ids: Vec<AirwayId> = tree
        .airway(parent_id)
        .children
        .iter()
        .copied()
        .filter(|&c| obs.is_visible(c, threshold))
        .collect();
    Some(BifurcationMatch {
        parent_id,
        obs_parent: *obs.row(parent_id),
        obs_children: child_ids.iter().map(|&c| *obs.row(c)).collect(),
        child_ids,
    })
}

/// Rotation `R` minimizing `sum |R cam_k - ct_k|^2` (SVD solution of
/// Wahba's problem with unit weights).
pub fn solve_wahba(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Rotation3<f64>> {
    let spans = |pick: fn(&(Vector3<f64>, Vector3<f64>)) -> Vector3<f64>| {
        let first = pairs.first().map(pick).unwrap_or_default();
        pairs.iter().any(|p| pick(p).cross(&first).norm() > COLLINEAR_TOLERANCE)
    };
    if !spans(|p| p.0) || !spans(|p| p.1) {
        return Err(Error::DegenerateDirections);
    }
    let b: Matrix3<f64> = pairs.iter().map(|(cam, ct)| ct * cam.transpose()).sum();
    let svd = b.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let d = (u.determinant() * v_t.determinant()).signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    Ok(Rotation3::from_matrix_unchecked(r))
}

/// Backs out the camera pose from a matched bifurcation: rotation from the
/// parent and child direction pairs, then position from the bifurcation
/// point.
pub fn align_pose(m: &BifurcationMatch, tree: &AirwayTree) -> Result<Pose> {
    let parent = tree.get(m.parent_id)?;
    let mut pairs = Vec::with_capacity(1 + m.child_ids.len());
    pairs.push((m.obs_parent.direction(), parent.distal_direction()));
    for (&c, row) in m.child_ids.iter().zip(&m.obs_children) {
        pairs.push((row.direction(), tree.get(c)?.proximal_direction()));
    }
    let rotation = solve_wahba(&pairs)?;
    let position = parent.distal_point() - rotation * m.bif_point_cam();
    Ok(Pose::from_rotation(position, rotation))
}

/// Stateless per-frame localizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirwayNetLocalizer {
    pub threshold: f64,
}

impl Default for AirwayNetLocalizer {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl AirwayNetLocalizer {
    pub fn localize(&self, obs: &ObservationMatrix, tree: &AirwayTree) -> Option<(Pose, BifurcationMatch)> {
        let m = find_consistent_bifurcation(obs, tree, self.threshold)?;
        let pose = align_pose(&m, tree).ok()?;
        Some((pose, m))
    }
}
