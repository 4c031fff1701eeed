//! Point-camera bronchoscope kinematics, episode runners and JSON Lines
//! episode logs.
//!
//! The scope tip is a camera whose heading changes by the view angles the
//! tendons achieve and which advances along its optical axis at the
//! commanded insertion speed. Positions leaving the lumen are projected
//! back onto the wall.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{achieved_heading, plan_trajectory, Command, ControllerConfig, Mode, Supervisor};
use crate::error::{Error, Result};
use crate::geometry::{minimal_rotation, GroundTruth, Pose, ViewAngles, VisibilityConfig};
use crate::localization::{AirwayNetLocalizer, Estimate, FilterState, LocalizerKind};
use crate::perception::{NoiseConfig, ObservationMatrix, PerceptionOracle, UnlabeledObservation};
use crate::skeleton::{AirwayId, AirwayTree};

/// Pose and actuator state of the scope tip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeState {
    pub pose: Pose,
    /// Integrated insertion (mm), never negative.
    pub u_ins: f64,
    /// Roll of the tendon frame relative to the camera (rad).
    pub roll: f64,
    pub tendons: [f64; 4],
}

impl ScopeState {
    pub fn new(pose: Pose, u_ins: f64, roll: f64) -> Self {
        Self {
            pose,
            u_ins,
            roll,
            tendons: [0.0; 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WallMode {
    /// Project onto the wall.
    #[default]
    Clamp,
    /// Drop the outward part of the step first, then project.
    Slide,
}

/// Direction of motion when the insertion command is negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retraction {
    /// Back along the optical axis, like insertion.
    Axis,
    /// Back along the local centerline toward the root, as a shaft pulled
    /// out of the airway would move.
    #[default]
    Lumen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub max_steps: usize,
    /// rad/s
    pub heading_rate_limit: f64,
    pub wall_mode: WallMode,
    pub retraction: Retraction,
    /// Tendon displacement to view angle gain of the plant.
    pub tendon_gain: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            max_steps: 20_000,
            heading_rate_limit: 1.5,
            wall_mode: WallMode::Clamp,
            retraction: Retraction::Lumen,
            tendon_gain: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [("dt", self.dt), ("heading_rate_limit", self.heading_rate_limit), ("tendon_gain", self.tendon_gain)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "must be positive"));
        }
        Ok(())
    }
}

/// Keeps `pos` inside the lumen; `prev` is the position before the step.
/// Returns the corrected position and whether the wall was hit.
fn constrain(tree: &AirwayTree, prev: &Point3<f64>, pos: Point3<f64>, mode: WallMode) -> (Point3<f64>, bool) {
    let foot = tree.nearest_centerline(&pos);
    if foot.distance <= foot.radius {
        return (pos, false);
    }
    let clamp = |p: Point3<f64>| {
        let f = tree.nearest_centerline(&p);
        if f.distance <= f.radius {
            p
        } else {
            f.point + (p - f.point) * (f.radius * (1.0 - 1e-9) / f.distance)
        }
    };
    let pos = match mode {
        WallMode::Clamp => clamp(pos),
        WallMode::Slide => {
            let n = (pos - foot.point) / foot.distance;
            let step = pos - prev;
            clamp(prev + step - n * step.dot(&n).max(0.0))
        }
    };
    (pos, true)
}

/// Distal-pointing centerline tangent at the foot point nearest `q`.
fn centerline_tangent(tree: &AirwayTree, q: &Point3<f64>) -> Vector3<f64> {
    let foot = tree.nearest_centerline(q);
    let cl = &tree.airway(foot.airway).centerline;
    let k = cl
        .windows(2)
        .position(|w| {
            let seg = w[1] - w[0];
            (foot.point - w[0]).dot(&seg) <= seg.norm_squared()
        })
        .unwrap_or(cl.len() - 2);
    (cl[k + 1] - cl[k]).normalize()
}

/// Advances the scope by one time step. Returns the new state and whether
/// the lumen wall was hit.
pub fn step(state: &ScopeState, cmd: &Command, tree: &AirwayTree, cfg: &SimConfig) -> (ScopeState, bool) {
    let mut turn = achieved_heading(&cmd.du_tendons, state.roll, cfg.tendon_gain);
    let limit = cfg.heading_rate_limit * cfg.dt;
    if turn.norm() > limit {
        let s = limit / turn.norm();
        turn = ViewAngles::new(turn.alpha * s, turn.beta * s);
    }
    let pose = state.pose.rotated_by_view_angles(turn);
    let prev = pose.position();
    let heading = if cmd.du_ins < 0.0 && cfg.retraction == Retraction::Lumen {
        centerline_tangent(tree, &prev)
    } else {
        pose.p_z()
    };
    let moved = prev + heading * (cmd.du_ins * cfg.dt);
    let (position, hit) = if cmd.du_ins == 0.0 { (moved, false) } else { constrain(tree, &prev, moved, cfg.wall_mode) };
    let mut tendons = state.tendons;
    for (t, d) in tendons.iter_mut().zip(cmd.du_tendons) {
        *t += d;
    }
    let next = ScopeState {
        pose: pose.with_position(position),
        u_ins: (state.u_ins + cmd.du_ins * cfg.dt).max(0.0),
        roll: state.roll,
        tendons,
    };
    (next, hit)
}

// ---------------------------------------------------------------------------
// Logs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Tracking,
    Driving,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub episode: EpisodeKind,
    pub tree_hash: String,
    pub vis: VisibilityConfig,
    pub noise: NoiseConfig,
    pub localizer: LocalizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerConfig>,
    pub targets: Vec<AirwayId>,
}

/// Ground truth kept per frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameTruth {
    pub visible: Vec<AirwayId>,
    /// Nearest bifurcation with two visible children.
    pub bifurcation: Option<AirwayId>,
}

impl FrameTruth {
    pub fn from_ground_truth(gt: &GroundTruth, tree: &AirwayTree) -> Self {
        Self {
            visible: gt.visible_ids(),
            bifurcation: gt.nearest_bifurcation(tree),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum Observation {
    Matrix(ObservationMatrix),
    Unlabeled(UnlabeledObservation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub state: ScopeState,
    pub truth: FrameTruth,
    pub observation: Observation,
    pub estimate: Option<Estimate>,
    pub command: Option<Command>,
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub completion_time: Option<f64>,
    pub recoveries: usize,
    pub collisions: usize,
    pub targets_reached: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub frames: Vec<Frame>,
    pub outcome: Outcome,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum RecordRef<'a> {
    Header(&'a EpisodeHeader),
    Frame(&'a Frame),
    Outcome(&'a Outcome),
}

#[derive(Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header(EpisodeHeader),
    Frame(Box<Frame>),
    Outcome(Outcome),
}

impl EpisodeLog {
    /// One JSON object per line: header, frames, outcome.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let line = |out: &mut String, r: RecordRef| {
            let _ = writeln!(out, "{}", serde_json::to_string(&r).expect("log records serialize"));
        };
        line(&mut out, RecordRef::Header(&self.header));
        for f in &self.frames {
            line(&mut out, RecordRef::Frame(f));
        }
        line(&mut out, RecordRef::Outcome(&self.outcome));
        out
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::MalformedLog {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut header = None;
        let mut frames = Vec::new();
        let mut outcome = None;
        for (i, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let n = i + 1;
            let rec: Record = serde_json::from_str(raw).map_err(|e| bad(n, e.to_string()))?;
            match rec {
                Record::Header(h) if header.is_none() && n == 1 => header = Some(h),
                Record::Header(_) => return Err(bad(n, "header must be the first line".into())),
                Record::Frame(_) | Record::Outcome(_) if header.is_none() => {
                    return Err(bad(n, "missing header".into()))
                }
                Record::Frame(_) if outcome.is_some() => return Err(bad(n, "frame after outcome".into())),
                Record::Frame(f) => frames.push(*f),
                Record::Outcome(_) if outcome.is_some() => return Err(bad(n, "duplicate outcome".into())),
                Record::Outcome(o) => outcome = Some(o),
            }
        }
        let end = text.lines().count();
        Ok(Self {
            header: header.ok_or_else(|| bad(1, "missing header".into()))?,
            frames,
            outcome: outcome.ok_or_else(|| bad(end, "missing outcome record".into()))?,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_jsonl(&std::fs::read_to_string(path).map_err(Error::at(path))?, path)
    }

    pub fn verify_tree(&self, tree: &AirwayTree) -> Result<()> {
        let actual = tree.content_hash();
        if actual != self.header.tree_hash {
            return Err(Error::TreeHashMismatch {
                expected: self.header.tree_hash.clone(),
                actual,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tracking

/// One pose of a scripted path with the insertion reading fed to the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptFrame {
    pub pose: Pose,
    pub u_ins: f64,
}

/// Evenly spaced poses along the centerline from the root to the distal end
/// of `target`, looking along the local tangent. `u_ins` is the arc length.
/// `roll` applies to the first frame; later frames are parallel-transported.
pub fn centerline_script(tree: &AirwayTree, target: AirwayId, frames: usize, roll: f64) -> Result<Vec<ScriptFrame>> {
    if frames < 2 {
        return Err(Error::config("frames", "need at least two frames"));
    }
    let mut points: Vec<Point3<f64>> = Vec::new();
    for id in tree.path_to(target)? {
        let cl = &tree.airway(id).centerline;
        let skip = usize::from(!points.is_empty());
        points.extend_from_slice(&cl[skip..]);
    }
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let mut out: Vec<ScriptFrame> = Vec::with_capacity(frames);
    let mut seg = 0;
    for i in 0..frames {
        let s = total * i as f64 / (frames - 1) as f64;
        while seg + 2 < points.len() && cum[seg + 1] <= s {
            seg += 1;
        }
        let dir = points[seg + 1] - points[seg];
        let len = cum[seg + 1] - cum[seg];
        let pos = points[seg] + dir * ((s - cum[seg]) / len);
        let dir = dir.normalize();
        let pose = match out.last() {
            None => Pose::looking_along(pos, dir, roll),
            Some(prev) => {
                let turn = minimal_rotation(&prev.pose.p_z(), &dir).expect("centerline never reverses");
                Pose::from_rotation(pos, turn * prev.pose.rotation())
            }
        };
        out.push(ScriptFrame { pose, u_ins: s });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub vis: VisibilityConfig,
    pub noise: NoiseConfig,
    pub localizer: LocalizerKind,
    pub sim: SimConfig,
}

enum Localizer {
    AirwayNet(AirwayNetLocalizer),
    Filter(FilterState),
}

impl Localizer {
    fn new(kind: LocalizerKind) -> Result<Self> {
        Ok(match kind {
            LocalizerKind::AirwayNet => Self::AirwayNet(AirwayNetLocalizer::default()),
            LocalizerKind::ParticleFilter(cfg) => {
                cfg.validate()?;
                Self::Filter(FilterState::new(cfg))
            }
        })
    }

    fn observe(&self, oracle: &mut PerceptionOracle, pose: &Pose, tree: &AirwayTree) -> (Observation, GroundTruth) {
        match self {
            Self::AirwayNet(_) => {
                let (m, gt) = oracle.airwaynet(pose, tree);
                (Observation::Matrix(m), gt)
            }
            Self::Filter(_) => {
                let (u, gt) = oracle.bifurcationnet(pose, tree);
                (Observation::Unlabeled(u), gt)
            }
        }
    }

    fn localize(&mut self, obs: &Observation, u_ins: f64, tree: &AirwayTree) -> Option<Estimate> {
        match (self, obs) {
            (Self::AirwayNet(l), Observation::Matrix(m)) => l.localize(m, tree).map(|(pose, m)| Estimate {
                pose,
                parent: m.parent_id,
                children: m.child_ids,
            }),
            (Self::Filter(s), Observation::Unlabeled(u)) => s.step(u, u_ins, tree).map(|e| Estimate {
                pose: e.pose,
                parent: e.parent,
                children: e.children,
            }),
            _ => None,
        }
    }
}

/// Runs perception and localization over a scripted pose sequence.
pub fn run_tracking_episode(tree: &AirwayTree, script: &[ScriptFrame], cfg: &TrackingConfig) -> Result<EpisodeLog> {
    cfg.sim.validate()?;
    let mut oracle = PerceptionOracle::new(cfg.vis, cfg.noise)?;
    let mut localizer = Localizer::new(cfg.localizer)?;
    let mut frames = Vec::with_capacity(script.len());
    for (i, s) in script.iter().enumerate() {
        let (observation, gt) = localizer.observe(&mut oracle, &s.pose, tree);
        let estimate = localizer.localize(&observation, s.u_ins, tree);
        frames.push(Frame {
            t: i as f64 * cfg.sim.dt,
            state: ScopeState::new(s.pose, s.u_ins, 0.0),
            truth: FrameTruth::from_ground_truth(&gt, tree),
            observation,
            estimate,
            command: None,
            mode: None,
        });
    }
    let completion_time = frames.last().map(|f| f.t);
    Ok(EpisodeLog {
        header: EpisodeHeader {
            episode: EpisodeKind::Tracking,
            tree_hash: tree.content_hash(),
            vis: cfg.vis,
            noise: cfg.noise,
            localizer: cfg.localizer,
            sim: Some(cfg.sim),
            controller: None,
            targets: vec![],
        },
        frames,
        outcome: Outcome {
            success: true,
            completion_time,
            recoveries: 0,
            collisions: 0,
            targets_reached: 0,
        },
    })
}

/// Re-runs a localizer over a recorded episode's observations.
pub fn replay_localization(log: &EpisodeLog, tree: &AirwayTree, kind: LocalizerKind) -> Result<Vec<Option<Estimate>>> {
    log.verify_tree(tree)?;
    let mut localizer = Localizer::new(kind)?;
    Ok(log
        .frames
        .iter()
        .map(|f| localizer.localize(&f.observation, f.state.u_ins, tree))
        .collect())
}

// ---------------------------------------------------------------------------
// Driving

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrivingConfig {
    pub vis: VisibilityConfig,
    pub noise: NoiseConfig,
    pub controller: ControllerConfig,
    pub sim: SimConfig,
}

impl DrivingConfig {
    pub fn validate(&self) -> Result<()> {
        self.vis.validate()?;
        self.noise.validate()?;
        self.controller.validate()?;
        self.sim.validate()
    }
}

/// Start pose 5 mm into the root airway, on its centerline up to a
/// seed-dependent lateral offset, with a random tendon-frame roll.
pub fn initial_state(tree: &AirwayTree, seed: u64) -> ScopeState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root = tree.airway(tree.root_id());
    let axis = root.proximal_direction();
    let roll = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let base = Pose::looking_along(root.proximal_point() + axis * 5.0, axis, roll);
    let offset = rng.gen_range(0.0..0.25 * root.radius[0]);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let position = base.position() + (base.p_x() * phi.cos() + base.p_y() * phi.sin()) * offset;
    ScopeState::new(base.with_position(position), 5.0, roll)
}

struct Driver<'a> {
    tree: &'a AirwayTree,
    cfg: DrivingConfig,
    oracle: PerceptionOracle,
    localizer: AirwayNetLocalizer,
    supervisor: Supervisor,
    state: ScopeState,
    collisions: usize,
}

struct Tick {
    observation: ObservationMatrix,
    truth: GroundTruth,
    estimate: Option<Estimate>,
    command: Command,
}

impl<'a> Driver<'a> {
    fn new(tree: &'a AirwayTree, first_target: AirwayId, cfg: &DrivingConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            tree,
            cfg: *cfg,
            oracle: PerceptionOracle::new(cfg.vis, cfg.noise)?,
            localizer: AirwayNetLocalizer {
                threshold: cfg.controller.threshold,
            },
            supervisor: Supervisor::new(plan_trajectory(tree, first_target)?)?,
            state: initial_state(tree, cfg.sim.seed),
            collisions: 0,
        })
    }

    /// Perception, localization and one control decision at the current state.
    fn decide(&mut self) -> Result<Tick> {
        let (observation, truth) = self.oracle.airwaynet(&self.state.pose, self.tree);
        let estimate = self.localizer.localize(&observation, self.tree).map(|(pose, m)| Estimate {
            pose,
            parent: m.parent_id,
            children: m.child_ids,
        });
        let command = self.supervisor.step(
            estimate.as_ref().map(|e| &e.pose),
            &observation,
            self.tree,
            self.state.roll,
            &self.cfg.controller,
        )?;
        Ok(Tick {
            observation,
            truth,
            estimate,
            command,
        })
    }

    fn advance(&mut self, cmd: &Command) {
        let (next, hit) = step(&self.state, cmd, self.tree, &self.cfg.sim);
        self.state = next;
        self.collisions += hit as usize;
    }
}

/// Closed-loop drive to each target in turn, replanning from the root
/// after every success. Running out of steps is a failed episode.
pub fn run_driving_episode(tree: &AirwayTree, targets: &[AirwayId], cfg: &DrivingConfig) -> Result<EpisodeLog> {
    let first = *targets.first().ok_or(Error::Empty("targets"))?;
    for &t in targets {
        tree.get(t)?;
    }
    let mut d = Driver::new(tree, first, cfg)?;
    let mut frames = Vec::new();
    let mut reached = 0;
    let mut completion_time = None;
    for i in 0..cfg.sim.max_steps {
        let t = i as f64 * cfg.sim.dt;
        let tick = d.decide()?;
        frames.push(Frame {
            t,
            state: d.state,
            truth: FrameTruth::from_ground_truth(&tick.truth, tree),
            observation: Observation::Matrix(tick.observation),
            estimate: tick.estimate,
            command: Some(tick.command),
            mode: Some(tick.command.mode),
        });
        if d.supervisor.reached {
            reached += 1;
            match targets.get(reached) {
                Some(&next) => d.supervisor.replan(tree, next)?,
                None => {
                    completion_time = Some(t);
                    break;
                }
            }
        }
        d.advance(&tick.command);
    }
    Ok(EpisodeLog {
        header: EpisodeHeader {
            episode: EpisodeKind::Driving,
            tree_hash: tree.content_hash(),
            vis: cfg.vis,
            noise: cfg.noise,
            localizer: LocalizerKind::AirwayNet,
            sim: Some(cfg.sim),
            controller: Some(cfg.controller),
            targets: targets.to_vec(),
        },
        frames,
        outcome: Outcome {
            success: completion_time.is_some(),
            completion_time,
            recoveries: d.supervisor.recoveries,
            collisions: d.collisions,
            targets_reached: reached,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub seconds: f64,
    pub rate_hz: f64,
}

/// Times the perception → localization → supervisor → step loop. The
/// scope cycles through the leaves as targets so every iteration does
/// real work.
pub fn benchmark(tree: &AirwayTree, iterations: usize, cfg: &DrivingConfig) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::config("iterations", "must be positive"));
    }
    let leaves: Vec<AirwayId> = tree.leaves().collect();
    let mut next_leaf = 0;
    let mut d = Driver::new(tree, leaves[0], cfg)?;
    let start = Instant::now();
    for _ in 0..iterations {
        let tick = d.decide()?;
        if d.supervisor.reached {
            next_leaf = (next_leaf + 1) % leaves.len();
            d.supervisor.replan(tree, leaves[next_leaf])?;
        }
        d.advance(&tick.command);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        iterations,
        seconds,
        rate_hz: iterations as f64 / seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_errors;
    use crate::skeleton::{generate_tree, Airway, TreeGenConfig};

    fn tube(radius: f64) -> AirwayTree {
        AirwayTree::new(
            AirwayId(0),
            500,
            vec![Airway {
                id: AirwayId(0),
                parent: None,
                children: vec![],
                centerline: vec![Point3::origin(), Point3::new(0.0, 0.0, 100.0)],
                radius: vec![radius; 2],
            }],
        )
        .unwrap()
    }

    fn cmd(du_tendons: [f64; 4], du_ins: f64) -> Command {
        Command {
            du_tendons,
            du_ins,
            mode: Mode::Follow,
            view_error: ViewAngles::ZERO,
        }
    }

    #[test]
    fn zero_command_is_fixed_point() {
        let t = tube(8.0);
        let s = ScopeState::new(Pose::looking_along(Point3::new(1.0, 2.0, 30.0), Vector3::new(0.1, 0.2, 1.0).normalize(), 0.3), 12.0, 0.7);
        let (next, hit) = step(&s, &Command::zero(Mode::Follow), &t, &SimConfig::default());
        assert_eq!(next, s);
        assert!(!hit);
    }

    #[test]
    fn straight_insertion() {
        let t = tube(8.0);
        let s = ScopeState::new(Pose::looking_along(Point3::new(0.0, 0.0, 10.0), Vector3::z(), 0.0), 10.0, 0.0);
        let (next, _) = step(&s, &cmd([0.0; 4], 10.0), &t, &SimConfig::default());
        assert!((next.pose.position().z - 10.2).abs() < 1e-12);
        assert!((next.u_ins - 10.2).abs() < 1e-12);
    }

    #[test]
    fn heading_follows_tendons_and_is_rate_limited() {
        let t = tube(8.0);
        let s = ScopeState::new(Pose::looking_along(Point3::new(0.0, 0.0, 10.0), Vector3::z(), 0.0), 10.0, 0.4);
        let small = ViewAngles::new(0.01, -0.005);
        let du = crate::control::tendon_command(small, s.roll, &ControllerConfig::default());
        let (next, _) = step(&s, &cmd(du, 0.0), &t, &SimConfig::default());
        let expect = s.pose.rotated_by_view_angles(small);
        assert!(pose_errors(&expect, &next.pose).unwrap().e_d < 1e-9);

        let big = crate::control::tendon_command(ViewAngles::new(1.0, 0.0), s.roll, &ControllerConfig::default());
        let (next, _) = step(&s, &cmd(big, 0.0), &t, &SimConfig::default());
        let turned = crate::geometry::angle_between(&s.pose.p_z(), &next.pose.p_z());
        assert!((turned - 0.03).abs() < 1e-12);
    }

    #[test]
    fn wall_contains_position() {
        let t = tube(5.0);
        for mode in [WallMode::Clamp, WallMode::Slide] {
            let cfg = SimConfig {
                wall_mode: mode,
                ..SimConfig::default()
            };
            let mut s = ScopeState::new(Pose::looking_along(Point3::new(0.0, 0.0, 10.0), Vector3::new(1.0, 0.0, 0.2).normalize(), 0.0), 10.0, 0.0);
            let mut hits = 0;
            for _ in 0..200 {
                let (n, hit) = step(&s, &cmd([0.0; 4], 10.0), &t, &cfg);
                s = n;
                hits += hit as usize;
                let p = s.pose.position();
                assert!(p.x.hypot(p.y) <= 5.0 + 1e-9);
            }
            assert!(hits > 0);
        }
    }

    #[test]
    fn lumen_retraction_follows_centerline() {
        let t = tube(8.0);
        let tilted = Vector3::new(0.5, 0.0, 1.0).normalize();
        let s = ScopeState::new(Pose::looking_along(Point3::new(0.0, 0.0, 50.0), tilted, 0.0), 50.0, 0.0);
        let (lumen, _) = step(&s, &cmd([0.0; 4], -10.0), &t, &SimConfig::default());
        assert!((lumen.pose.position() - Point3::new(0.0, 0.0, 49.8)).norm() < 1e-12);
        let axis = SimConfig {
            retraction: Retraction::Axis,
            ..SimConfig::default()
        };
        let (back, _) = step(&s, &cmd([0.0; 4], -10.0), &t, &axis);
        assert!((back.pose.position() - (Point3::new(0.0, 0.0, 50.0) - tilted * 0.2)).norm() < 1e-12);
    }

    #[test]
    fn retraction_floors_insertion() {
        let t = tube(8.0);
        let s = ScopeState::new(Pose::looking_along(Point3::new(0.0, 0.0, 10.0), Vector3::z(), 0.0), 0.1, 0.0);
        let (next, _) = step(&s, &cmd([0.0; 4], -10.0), &t, &SimConfig::default());
        assert_eq!(next.u_ins, 0.0);
    }

    #[test]
    fn script_follows_centerline() {
        let tree = generate_tree(&TreeGenConfig::with_depth(4, 2)).unwrap();
        let leaf = tree.leaves().next().unwrap();
        let script = centerline_script(&tree, leaf, 300, 0.0).unwrap();
        assert_eq!(script.len(), 300);
        let end = script.last().unwrap();
        assert!((end.pose.position() - tree.airway(leaf).distal_point()).norm() < 1e-9);
        for s in &script {
            let foot = tree.nearest_centerline(&s.pose.position());
            assert!(foot.distance < 1e-9);
            assert!((foot.insertion - s.u_ins).abs() < 1e-6);
        }
    }

    #[test]
    fn script_never_spins() {
        let tree = generate_tree(&TreeGenConfig::with_depth(5, 3)).unwrap();
        let leaf = tree.leaves().last().unwrap();
        let script = centerline_script(&tree, leaf, 400, 0.7).unwrap();
        assert!((script[0].pose.p_z() - tree.airway(tree.root_id()).proximal_direction()).norm() < 1e-12);
        for w in script.windows(2) {
            assert!(crate::geometry::pose_errors(&w[1].pose, &w[0].pose).unwrap().e_r < 1e-6);
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let tree = generate_tree(&TreeGenConfig::with_depth(3, 1)).unwrap();
        let leaf = tree.leaves().next().unwrap();
        let script = centerline_script(&tree, leaf, 40, 0.2).unwrap();
        let log = run_tracking_episode(&tree, &script, &TrackingConfig::default()).unwrap();
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 42);
        let back = EpisodeLog::from_jsonl(&text, Path::new("mem")).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.to_jsonl(), text);

        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(matches!(EpisodeLog::from_jsonl(&truncated, Path::new("x")), Err(Error::MalformedLog { .. })));
        let garbled = text.replacen("\"record\":\"frame\"", "\"record\":\"nope\"", 1);
        match EpisodeLog::from_jsonl(&garbled, Path::new("x")) {
            Err(Error::MalformedLog { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replay_checks_tree_hash() {
        let tree = generate_tree(&TreeGenConfig::with_depth(3, 1)).unwrap();
        let other = generate_tree(&TreeGenConfig::with_depth(3, 2)).unwrap();
        let leaf = tree.leaves().next().unwrap();
        let script = centerline_script(&tree, leaf, 60, 0.0).unwrap();
        let log = run_tracking_episode(&tree, &script, &TrackingConfig::default()).unwrap();
        let replayed = replay_localization(&log, &tree, LocalizerKind::AirwayNet).unwrap();
        assert_eq!(replayed, log.frames.iter().map(|f| f.estimate.clone()).collect::<Vec<_>>());
        assert!(matches!(
            replay_localization(&log, &other, LocalizerKind::AirwayNet),
            Err(Error::TreeHashMismatch { .. })
        ));
    }

    #[test]
    fn blind_frames_have_no_estimate() {
        let tree = generate_tree(&TreeGenConfig::with_depth(3, 1)).unwrap();
        // At the tracheal entry looking out of the tree.
        let pose = Pose::looking_along(Point3::origin(), -Vector3::z(), 0.0);
        let script = vec![ScriptFrame { pose, u_ins: 0.0 }; 5];
        let log = run_tracking_episode(&tree, &script, &TrackingConfig::default()).unwrap();
        assert!(log.frames.iter().all(|f| f.estimate.is_none() && f.truth.visible.is_empty()));
    }

    #[test]
    fn zero_noise_drive_reaches_leaf() {
        let tree = generate_tree(&TreeGenConfig::with_depth(5, 3)).unwrap();
        let leaf = tree.leaves().last().unwrap();
        let log = run_driving_episode(&tree, &[leaf], &DrivingConfig::default()).unwrap();
        assert!(log.outcome.success, "{:?}", log.outcome);
        for w in log.frames.windows(2) {
            assert!(w[1].t > w[0].t);
        }
    }
}
