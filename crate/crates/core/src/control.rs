//! Trajectory planning and the view-angle motion controller.
//!
//! The controller is proportional on the view-angle error `(dα, dβ)`
//! toward a look-ahead point on the airway being followed. Tendon
//! increments come from the pseudo-inverse of the antagonistic tendon map
//! `J`, rotated into the tendon frame by the scope roll; insertion speed
//! ramps down linearly with the angular error.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, ViewAngles};
use crate::perception::{ObservationMatrix, ObservationRow};
use crate::skeleton::{AirwayId, AirwayTree};

/// Airways expected in view, root first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub airway_ids: Vec<AirwayId>,
    pub target_id: AirwayId,
}

pub fn plan_trajectory(tree: &AirwayTree, target: AirwayId) -> Result<Trajectory> {
    Ok(Trajectory {
        airway_ids: tree.path_to(target)?,
        target_id: target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub k: f64,
    /// Maximum insertion speed (mm/s).
    pub v_ins: f64,
    /// View error at which insertion stops (rad).
    pub e_max: f64,
    /// Distance of the aim point in front of the camera (mm).
    pub lookahead: f64,
    /// Distance to an airway's bifurcation at which the next airway takes over (mm).
    pub handoff_dist: f64,
    /// `p_isVis` cutoff for treating an airway as visible.
    pub threshold: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            k: 0.5,
            v_ins: 10.0,
            e_max: std::f64::consts::FRAC_PI_2,
            lookahead: 15.0,
            handoff_dist: 15.0,
            threshold: 0.5,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("k", self.k),
            ("v_ins", self.v_ins),
            ("e_max", self.e_max),
            ("lookahead", self.lookahead),
            ("handoff_dist", self.handoff_dist),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if self.e_max > std::f64::consts::PI {
            return Err(Error::config("e_max", "must not exceed pi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    #[default]
    Follow,
    Recover,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub du_tendons: [f64; 4],
    /// Insertion speed (mm/s); negative retracts.
    pub du_ins: f64,
    pub mode: Mode,
    /// View-angle error the command was computed from.
    pub view_error: ViewAngles,
}

impl Command {
    pub fn zero(mode: Mode) -> Self {
        Self {
            du_tendons: [0.0; 4],
            du_ins: 0.0,
            mode,
            view_error: ViewAngles::ZERO,
        }
    }
}

fn roll_matrix(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// `du = k J^+ R_θ^T (dα, dβ)` with `J = [[1,0,-1,0],[0,1,0,-1]]`, `J^+ = J^T / 2`.
pub fn tendon_command(error: ViewAngles, theta: f64, cfg: &ControllerConfig) -> [f64; 4] {
    let v = roll_matrix(theta).transpose() * Vector2::new(error.alpha, error.beta) * (cfg.k / 2.0);
    [v.x, v.y, -v.x, -v.y]
}

/// Heading change produced by tendon increments: `(1/k) R_θ J du`.
pub fn achieved_heading(du: &[f64; 4], theta: f64, k: f64) -> ViewAngles {
    let j = Vector2::new(du[0] - du[2], du[1] - du[3]);
    let e = roll_matrix(theta) * j / k;
    ViewAngles::new(e.x, e.y)
}

/// Linear insertion ramp: full speed at zero error, zero at `e_max`.
pub fn insertion_command(error: ViewAngles, cfg: &ControllerConfig) -> f64 {
    (cfg.v_ins * (1.0 - error.norm() / cfg.e_max)).max(0.0)
}

/// View angles of a camera-frame direction; total, unlike
/// [`crate::geometry::direction_to_alpha_beta`].
fn view_angles_of(v: &Vector3<f64>) -> ViewAngles {
    let d = v.normalize();
    ViewAngles::new((-d.y).atan2(d.z), d.x.clamp(-1.0, 1.0).asin())
}

/// Point on the camera-frame segment `entry → y_p` whose distance from the
/// camera is closest to `lookahead`, preferring the far end.
pub fn aim_point(entry: &Vector3<f64>, y_p: &Vector3<f64>, lookahead: f64) -> Vector3<f64> {
    let la2 = lookahead * lookahead;
    if y_p.norm_squared() <= la2 {
        return *y_p;
    }
    let v = y_p - entry;
    let a = v.norm_squared();
    if a == 0.0 {
        return *y_p;
    }
    let b = entry.dot(&v);
    let disc = b * b - a * (entry.norm_squared() - la2);
    let s = if disc >= 0.0 && (-b + disc.sqrt()) / a >= 0.0 {
        ((-b + disc.sqrt()) / a).min(1.0)
    } else {
        (-b / a).clamp(0.0, 1.0)
    };
    entry + v * s
}

/// Camera-frame proximal end of an observed airway: the parent's observed
/// bifurcation point when available, else `y_p` moved back along the airway
/// by at most its length.
pub fn observed_entry(obs: &ObservationMatrix, tree: &AirwayTree, airway: AirwayId, threshold: f64) -> Result<Vector3<f64>> {
    let a = tree.get(airway)?;
    if let Some(p) = a.parent {
        let row = obs.row(p);
        if row.p_is_vis >= threshold && row.p_has_vis_child >= threshold {
            return Ok(row.y_p);
        }
    }
    let row: &ObservationRow = obs.row(airway);
    let d = row.direction();
    Ok(row.y_p - d * a.length().min(row.y_p.dot(&d)).max(0.0))
}

/// View-angle error toward the aim point on `airway`.
pub fn view_error(obs: &ObservationMatrix, tree: &AirwayTree, airway: AirwayId, cfg: &ControllerConfig) -> Result<ViewAngles> {
    if !obs.is_visible(airway, cfg.threshold) {
        return Err(Error::AirwayNotVisible(airway));
    }
    let entry = observed_entry(obs, tree, airway, cfg.threshold)?;
    Ok(view_angles_of(&aim_point(&entry, &obs.row(airway).y_p, cfg.lookahead)))
}

/// High-level driving state: which trajectory airway is being followed and
/// whether the controller is recovering from lost sight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supervisor {
    pub trajectory: Trajectory,
    pub active_index: usize,
    pub mode: Mode,
    pub reached: bool,
    /// Number of FOLLOW → RECOVER transitions.
    pub recoveries: usize,
}

impl Supervisor {
    pub fn new(trajectory: Trajectory) -> Result<Self> {
        if trajectory.airway_ids.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        Ok(Self {
            trajectory,
            active_index: 0,
            mode: Mode::Follow,
            reached: false,
            recoveries: 0,
        })
    }

    pub fn active_airway(&self) -> AirwayId {
        self.trajectory.airway_ids[self.active_index]
    }

    /// Switch to a new target; the new trajectory starts at the root again.
    pub fn replan(&mut self, tree: &AirwayTree, target: AirwayId) -> Result<()> {
        self.trajectory = plan_trajectory(tree, target)?;
        self.active_index = 0;
        self.reached = false;
        Ok(())
    }

    fn steer(&self, obs: &ObservationMatrix, tree: &AirwayTree, airway: AirwayId, theta: f64, cfg: &ControllerConfig) -> Result<Command> {
        let e = view_error(obs, tree, airway, cfg)?;
        Ok(Command {
            du_tendons: tendon_command(e, theta, cfg),
            du_ins: insertion_command(e, cfg),
            mode: Mode::Follow,
            view_error: e,
        })
    }

    fn recover(&mut self, obs: &ObservationMatrix, tree: &AirwayTree, theta: f64, cfg: &ControllerConfig) -> Command {
        if self.mode != Mode::Recover {
            self.recoveries += 1;
            self.mode = Mode::Recover;
        }
        let nearest = tree
            .ids()
            .filter(|&i| obs.is_visible(i, cfg.threshold))
            .min_by(|&a, &b| obs.row(a).y_p.norm().total_cmp(&obs.row(b).y_p.norm()));
        let e = nearest
            .and_then(|i| view_error(obs, tree, i, cfg).ok())
            .unwrap_or(ViewAngles::ZERO);
        Command {
            du_tendons: tendon_command(e, theta, cfg),
            du_ins: -cfg.v_ins,
            mode: Mode::Recover,
            view_error: e,
        }
    }

    /// One control decision. `estimate` is the localizer's pose, if any;
    /// `theta` is the scope roll used to map view errors into tendon space.
    pub fn step(
        &mut self,
        estimate: Option<&Pose>,
        obs: &ObservationMatrix,
        tree: &AirwayTree,
        theta: f64,
        cfg: &ControllerConfig,
    ) -> Result<Command> {
        if self.reached {
            return Ok(Command::zero(self.mode));
        }
        let ids = self.trajectory.airway_ids.clone();
        let visible = |i: AirwayId| obs.is_visible(i, cfg.threshold);

        if !ids.iter().any(|&i| visible(i)) {
            return Ok(self.recover(obs, tree, theta, cfg));
        }
        self.mode = Mode::Follow;

        if !visible(ids[self.active_index]) {
            match (self.active_index + 1..ids.len()).find(|&j| visible(ids[j])) {
                Some(j) => self.active_index = j,
                None => {
                    // Only airways behind the active one are in view: steer
                    // toward the deepest of them without moving the index back.
                    let j = (0..self.active_index).rev().find(|&j| visible(ids[j])).expect("some trajectory airway visible");
                    return self.steer(obs, tree, ids[j], theta, cfg);
                }
            }
        }

        let active = ids[self.active_index];
        let airway = tree.get(active)?;
        let to_bifurcation = match estimate {
            Some(pose) => (pose.position() - airway.distal_point()).norm(),
            None => obs.row(active).y_p.norm(),
        };
        if to_bifurcation <= cfg.handoff_dist {
            if active == self.trajectory.target_id {
                self.reached = true;
                return Ok(Command::zero(Mode::Follow));
            }
            if self.active_index + 1 < ids.len() && visible(ids[self.active_index + 1]) {
                self.active_index += 1;
            }
        }
        self.steer(obs, tree, ids[self.active_index], theta, cfg)
    }
}
