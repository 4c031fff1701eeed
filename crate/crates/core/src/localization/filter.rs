//! Bifurcation particle filter.
//!
//! Each particle is a skeleton bifurcation hypothesized to be the one in
//! view. A particle's posterior is the product of a measurement fit (how
//! well the observed child directions line up with the skeleton's once the
//! bifurcation point and parent axis are aligned) and a prior built from
//! insertion depth, proximity to previously seen airways, the previous
//! position estimate and the previous roll.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{minimal_rotation, pose_errors, Pose};
use crate::localization::airwaynet::{align_pose, BifurcationMatch};
use crate::perception::{ObservationRow, UnlabeledObservation};
use crate::skeleton::{AirwayId, AirwayTree};

pub fn normal_pdf(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / ((2.0 * PI).sqrt() * sigma)
}

/// Relative weight of an airway `d` generations from a previously visible one.
pub fn p_gen(d: usize) -> f64 {
    if d <= 3 {
        10f64.powi(1 - d as i32)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_candidates: usize,
    /// Std of `1 - cos` child-direction residuals.
    pub sigma_fit: f64,
    /// Insertion depth tolerance (mm).
    pub sigma_ins: f64,
    /// Position continuity (mm).
    pub sigma_x: f64,
    /// Roll continuity (rad).
    pub sigma_r: f64,
    pub threshold: f64,
    /// Largest lateral offset (mm) of a child's reported point from the ray
    /// leaving the bifurcation point along the child's direction.
    pub child_offset: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_candidates: 3,
            sigma_fit: 0.1,
            sigma_ins: 10.0,
            sigma_x: 10.0,
            sigma_r: 0.35,
            threshold: 0.5,
            child_offset: 3.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates < 1 {
            return Err(Error::config("n_candidates", "must be at least 1"));
        }
        for (f, s) in [
            ("sigma_fit", self.sigma_fit),
            ("sigma_ins", self.sigma_ins),
            ("sigma_x", self.sigma_x),
            ("sigma_r", self.sigma_r),
            ("child_offset", self.child_offset),
        ] {
            if !(s > 0.0) {
                return Err(Error::config(f, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Result of matching observed child directions to a candidate bifurcation.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub p_fit: f64,
    /// Roll about the parent axis applied after aligning the parent direction.
    pub roll: f64,
    /// `(observed child index, skeleton child)` pairs, by observed index.
    pub assignment: Vec<(usize, AirwayId)>,
}

/// All injective pairings between `n_obs` observed and `cands` skeleton
/// children, in lexicographic order of the skeleton IDs they produce.
fn injective_assignments(n_obs: usize, cands: &[AirwayId]) -> Vec<Vec<(usize, AirwayId)>> {
    fn rec(
        slots: usize,
        pool: usize,
        chosen: &mut Vec<usize>,
        used: &mut Vec<bool>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if chosen.len() == slots {
            out.push(chosen.clone());
            return;
        }
        for k in 0..pool {
            if !used[k] {
                used[k] = true;
                chosen.push(k);
                rec(slots, pool, chosen, used, out);
                chosen.pop();
                used[k] = false;
            }
        }
    }
    let mut raw = Vec::new();
    let mut sorted: Vec<AirwayId> = cands.to_vec();
    sorted.sort();
    if n_obs <= sorted.len() {
        // Each observed child gets a distinct skeleton child.
        rec(n_obs, sorted.len(), &mut Vec::new(), &mut vec![false; sorted.len()], &mut raw);
        raw.into_iter()
            .map(|pick| pick.into_iter().enumerate().map(|(o, c)| (o, sorted[c])).collect())
            .collect()
    } else {
        // Each skeleton child gets a distinct observed child.
        rec(sorted.len(), n_obs, &mut Vec::new(), &mut vec![false; n_obs], &mut raw);
        let mut out: Vec<Vec<(usize, AirwayId)>> = raw
            .into_iter()
            .map(|pick| {
                let mut pairs: Vec<(usize, AirwayId)> = pick.into_iter().zip(sorted.iter().copied()).collect();
                pairs.sort();
                pairs
            })
            .collect();
        out.sort_by(|a, b| {
            let ka: Vec<Option<AirwayId>> = (0..n_obs).map(|o| a.iter().find(|p| p.0 == o).map(|p| p.1)).collect();
            let kb: Vec<Option<AirwayId>> = (0..n_obs).map(|o| b.iter().find(|p| p.0 == o).map(|p| p.1)).collect();
            ka.cmp(&kb)
        });
        out
    }
}

/// Signed angle from `a` to `b` about `axis`, after projecting both onto
/// the plane normal to `axis`; also returns the product of projected norms.
fn planar_residual(axis: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> (f64, f64) {
    let a_perp = a - axis * axis.dot(a);
    let b_perp = b - axis * axis.dot(b);
    let w = a_perp.norm() * b_perp.norm();
    (axis.dot(&a_perp.cross(&b_perp)).atan2(a_perp.dot(&b_perp)), w)
}

/// Probability that the observed children fit a candidate bifurcation,
/// maximized over child assignments and the roll about the parent axis.
pub fn fit_probability(
    obs_parent_dir: &Vector3<f64>,
    obs_children_dirs: &[Vector3<f64>],
    candidate: AirwayId,
    tree: &AirwayTree,
    sigma_fit: f64,
) -> Result<Fit> {
    let fits = assignment_fits(obs_parent_dir, obs_children_dirs, candidate, tree, sigma_fit)?;
    let mut best = &fits[0];
    for f in &fits[1..] {
        if f.p_fit > best.p_fit {
            best = f;
        }
    }
    Ok(best.clone())
}

/// One roll-optimal [`Fit`] per injective child assignment.
pub fn assignment_fits(
    obs_parent_dir: &Vector3<f64>,
    obs_children_dirs: &[Vector3<f64>],
    candidate: AirwayId,
    tree: &AirwayTree,
    sigma_fit: f64,
) -> Result<Vec<Fit>> {
    let cand = tree.get(candidate)?;
    if obs_children_dirs.len() < 2 || !cand.is_bifurcation() {
        return Err(Error::config("children", "need at least two observed and two skeleton children"));
    }
    let axis = cand.distal_direction();
    let r0 = minimal_rotation(&obs_parent_dir.normalize(), &axis).unwrap_or_else(|| {
        let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        Rotation3::from_axis_angle(&Unit::new_normalize(axis.cross(&helper)), PI)
    });
    let aligned: Vec<Vector3<f64>> = obs_children_dirs.iter().map(|d| r0 * d.normalize()).collect();
    let ct: Vec<(AirwayId, Vector3<f64>)> = cand.children.iter().map(|&c| (c, tree.airway(c).proximal_direction())).collect();
    let ct_dir = |id: AirwayId| ct.iter().find(|(c, _)| *c == id).expect("candidate child").1;

    let mut fits = Vec::new();
    for assignment in injective_assignments(aligned.len(), &cand.children) {
        let (mut s, mut c) = (0.0, 0.0);
        for &(o, id) in &assignment {
            let (phi, w) = planar_residual(&axis, &aligned[o], &ct_dir(id));
            s += w * phi.sin();
            c += w * phi.cos();
        }
        let roll = if s == 0.0 && c == 0.0 { 0.0 } else { s.atan2(c) };
        let spin = Rotation3::from_axis_angle(&Unit::new_unchecked(axis), roll);
        let n = assignment.len() as f64;
        let p_fit = assignment
            .iter()
            .map(|&(o, id)| normal_pdf(1.0 - (spin * aligned[o]).dot(&ct_dir(id)), sigma_fit))
            .sum::<f64>()
            / n;
        fits.push(Fit { p_fit, roll, assignment });
    }
    Ok(fits)
}

/// Components of a particle's prior probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub p_ins: f64,
    pub p_a: f64,
    pub p_x: f64,
    pub p_r: f64,
}

impl Prior {
    pub fn value(&self) -> f64 {
        self.p_ins * self.p_a * self.p_x * self.p_r
    }
}

/// Filter memory carried between frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub prev_pose: Option<Pose>,
    pub prev_visible: Vec<AirwayId>,
    pub config: FilterConfig,
}

/// A scored bifurcation hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub bifurcation: AirwayId,
    pub fit: Fit,
    pub prior: Prior,
    pub pose: Pose,
}

impl Particle {
    pub fn posterior(&self) -> f64 {
        self.fit.p_fit * self.prior.value()
    }

    pub fn children(&self) -> Vec<AirwayId> {
        self.fit.assignment.iter().map(|p| p.1).collect()
    }
}

/// Estimate produced by one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterEstimate {
    pub pose: Pose,
    pub parent: AirwayId,
    pub children: Vec<AirwayId>,
    pub posterior: f64,
}

/// The observed bifurcation in an unlabeled observation: the first row
/// reporting a visible bifurcation, plus the visible rows whose point lies
/// on the ray from the bifurcation point along their own direction, within
/// `max_offset` mm.
pub fn observed_bifurcation(
    obs: &UnlabeledObservation,
    threshold: f64,
    max_offset: f64,
) -> Option<(ObservationRow, Vec<ObservationRow>)> {
    let k = obs
        .rows
        .iter()
        .position(|r| r.p_has_vis_child >= threshold && r.p_is_vis >= threshold)?;
    let parent = obs.rows[k];
    let children: Vec<ObservationRow> = obs
        .rows
        .iter()
        .enumerate()
        .filter(|&(i, r)| {
            let v = r.y_p - parent.y_p;
            let along = v.dot(&r.direction());
            i != k && r.p_is_vis >= threshold && along >= -max_offset && (v - r.direction() * along).norm() <= max_offset
        })
        .map(|(_, r)| *r)
        .collect();
    (children.len() >= 2).then_some((parent, children))
}

/// Ranks by posterior, then fit, then lowest ID.
fn cmp_particles(a: &Particle, b: &Particle) -> Ordering {
    a.posterior()
        .total_cmp(&b.posterior())
        .then(a.fit.p_fit.total_cmp(&b.fit.p_fit))
        .then(b.bifurcation.cmp(&a.bifurcation))
}

/// Keeps the `n` particles with the highest prior and returns the index of
/// the maximum-posterior particle among them.
pub fn select_particle(particles: &[Particle], n: usize) -> Option<usize> {
    let mut order: Vec<usize> = (0..particles.len()).collect();
    order.sort_by(|&i, &j| {
        particles[j]
            .prior
            .value()
            .total_cmp(&particles[i].prior.value())
            .then(particles[i].bifurcation.cmp(&particles[j].bifurcation))
    });
    order.truncate(n);
    order.into_iter().max_by(|&i, &j| cmp_particles(&particles[i], &particles[j]))
}

impl FilterState {
    pub fn new(config: FilterConfig) -> Self {
        Self {
            prev_pose: None,
            prev_visible: Vec::new(),
            config,
        }
    }

    pub fn has_history(&self) -> bool {
        self.prev_pose.is_some()
    }

    /// `p_a` for every airway, normalized over the tree. `None` without
    /// history.
    pub fn airway_weights(&self, tree: &AirwayTree) -> Option<Vec<f64>> {
        if self.prev_visible.is_empty() {
            return None;
        }
        let raw: Vec<f64> = tree
            .ids()
            .map(|i| {
                self.prev_visible
                    .iter()
                    .map(|&j| p_gen(tree.generation_distance(j, i).unwrap_or(usize::MAX)))
                    .sum()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Some(raw.into_iter().map(|w| if total > 0.0 { w / total } else { 0.0 }).collect())
    }

    /// Prior for a candidate whose implied pose is `candidate_pose`.
    /// `depth` is the observed bifurcation's camera-frame z.
    pub fn prior_probability(
        &self,
        candidate: AirwayId,
        tree: &AirwayTree,
        u_ins: f64,
        depth: f64,
        candidate_pose: &Pose,
        airway_weights: Option<&[f64]>,
    ) -> Result<Prior> {
        let cfg = &self.config;
        let z_bif = tree.insertion_length_to_bifurcation(candidate)?;
        let p_ins = normal_pdf(u_ins + depth - z_bif, cfg.sigma_ins);
        let p_a = airway_weights.map_or(1.0, |w| w[candidate.index()]);
        let (p_x, p_r) = match &self.prev_pose {
            Some(prev) => {
                let dist = (candidate_pose.position() - prev.position()).norm();
                let roll = pose_errors(candidate_pose, prev).map_or(PI, |e| e.e_r.to_radians());
                (normal_pdf(dist, cfg.sigma_x), normal_pdf(roll, cfg.sigma_r))
            }
            None => (1.0, 1.0),
        };
        Ok(Prior { p_ins, p_a, p_x, p_r })
    }

    /// Scores every skeleton bifurcation against the observation. Empty when
    /// the observation shows no usable bifurcation.
    pub fn score_all(&self, obs: &UnlabeledObservation, u_ins: f64, tree: &AirwayTree) -> Vec<Particle> {
        let Some((parent, children)) = observed_bifurcation(obs, self.config.threshold, self.config.child_offset) else {
            return Vec::new();
        };
        let parent_dir = parent.direction();
        let child_dirs: Vec<Vector3<f64>> = children.iter().map(ObservationRow::direction).collect();
        let weights = self.airway_weights(tree);

        let mut particles = Vec::new();
        for b in tree.bifurcations() {
            let Ok(fits) = assignment_fits(&parent_dir, &child_dirs, b, tree, self.config.sigma_fit) else {
                continue;
            };
            // One particle per bifurcation: the assignment with the best posterior.
            let mut best: Option<Particle> = None;
            for fit in fits {
                let m = BifurcationMatch {
                    parent_id: b,
                    child_ids: fit.assignment.iter().map(|p| p.1).collect(),
                    obs_parent: parent,
                    obs_children: fit.assignment.iter().map(|p| children[p.0]).collect(),
                };
                let Ok(pose) = align_pose(&m, tree) else { continue };
                let Ok(prior) = self.prior_probability(b, tree, u_ins, parent.y_p.z, &pose, weights.as_deref()) else {
                    continue;
                };
                let p = Particle {
                    bifurcation: b,
                    fit,
                    prior,
                    pose,
                };
                if best.as_ref().map_or(true, |q| cmp_particles(&p, q) == Ordering::Greater) {
                    best = Some(p);
                }
            }
            particles.extend(best);
        }
        particles
    }

    /// One filter update. Without a usable bifurcation in view the state is
    /// left untouched and no estimate is produced.
    pub fn step(&mut self, obs: &UnlabeledObservation, u_ins: f64, tree: &AirwayTree) -> Option<FilterEstimate> {
        let particles = self.score_all(obs, u_ins, tree);
        let winner = &particles[select_particle(&particles, self.config.n_candidates)?];
        let children = winner.children();
        self.prev_pose = Some(winner.pose);
        self.prev_visible = std::iter::once(winner.bifurcation).chain(children.iter().copied()).collect();
        Some(FilterEstimate {
            pose: winner.pose,
            parent: winner.bifurcation,
            children,
            posterior: winner.posterior(),
        })
    }
}

/// Functional form of [`FilterState::step`].
pub fn filter_step(
    obs: &UnlabeledObservation,
    u_ins: f64,
    tree: &AirwayTree,
    state: &FilterState,
) -> (Option<FilterEstimate>, FilterState) {
    let mut next = state.clone();
    let est = next.step(obs, u_ins, tree);
    (est, next)
}
