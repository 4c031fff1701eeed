//! Perception oracles standing in for the trained networks, the weighted
//! training loss, and threshold sweeps over visibility scores.
//!
//! The oracles start from exact ground truth and degrade it according to a
//! [`NoiseConfig`]. With every noise parameter at zero they are pure
//! functions of the pose and never touch their RNG.

use std::cmp::Ordering;
use std::collections::VecDeque;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    alpha_beta_to_direction, angle_between, direction_to_alpha_beta_lenient, ground_truth_observation,
    GroundTruth, Pose, ViewAngles, VisibilityConfig,
};
use crate::skeleton::{AirwayId, AirwayTree};

/// Predicted characteristics of one airway.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservationRow {
    pub p_is_vis: f64,
    pub p_has_vis_child: f64,
    pub y_p: Vector3<f64>,
    pub y_d: ViewAngles,
}

impl ObservationRow {
    fn is_blank(&self) -> bool {
        *self == ObservationRow::default()
    }

    /// Camera-frame unit direction of the airway.
    pub fn direction(&self) -> Vector3<f64> {
        alpha_beta_to_direction(self.y_d)
    }
}

/// AirwayNet-style output: one row per airway ID, `max_rows` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SparseMatrix", into = "SparseMatrix")]
pub struct ObservationMatrix {
    rows: Vec<ObservationRow>,
}

/// Serialized form: blank rows are omitted.
#[derive(Serialize, Deserialize)]
struct SparseMatrix {
    max_rows: usize,
    rows: Vec<SparseRow>,
}

#[derive(Serialize, Deserialize)]
struct SparseRow {
    id: AirwayId,
    #[serde(flatten)]
    row: ObservationRow,
}

impl From<ObservationMatrix> for SparseMatrix {
    fn from(m: ObservationMatrix) -> Self {
        SparseMatrix {
            max_rows: m.rows.len(),
            rows: m
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.is_blank())
                .map(|(i, r)| SparseRow { id: AirwayId(i), row: *r })
                .collect(),
        }
    }
}

impl TryFrom<SparseMatrix> for ObservationMatrix {
    type Error = Error;

    fn try_from(s: SparseMatrix) -> Result<Self> {
        let mut m = ObservationMatrix::zeros(s.max_rows);
        for r in s.rows {
            let slot = m.rows.get_mut(r.id.index()).ok_or(Error::UnknownAirway(r.id))?;
            *slot = r.row;
        }
        m.validate()?;
        Ok(m)
    }
}

impl ObservationMatrix {
    pub fn zeros(max_rows: usize) -> Self {
        Self {
            rows: vec![ObservationRow::default(); max_rows],
        }
    }

    pub fn from_rows(rows: Vec<ObservationRow>) -> Result<Self> {
        let m = Self { rows };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            for p in [r.p_is_vis, r.p_has_vis_child] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::ProbabilityOutOfRange { airway: i, value: p });
                }
            }
        }
        Ok(())
    }

    pub fn max_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[ObservationRow] {
        &self.rows
    }

    pub fn row(&self, id: AirwayId) -> &ObservationRow {
        &self.rows[id.index()]
    }

    pub fn row_mut(&mut self, id: AirwayId) -> &mut ObservationRow {
        &mut self.rows[id.index()]
    }

    pub fn is_visible(&self, id: AirwayId, threshold: f64) -> bool {
        self.rows.get(id.index()).is_some_and(|r| r.p_is_vis >= threshold)
    }

    pub fn visible_ids(&self, threshold: f64) -> Vec<AirwayId> {
        (0..self.rows.len())
            .map(AirwayId)
            .filter(|&i| self.rows[i.index()].p_is_vis >= threshold)
            .collect()
    }
}

/// BifurcationNet-style output: at most four unlabeled rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UnlabeledObservation {
    pub rows: Vec<ObservationRow>,
}

pub const UNLABELED_ROWS: usize = 4;

/// Sort key for unlabeled rows: distance rounded to 1 mm, then the angle
/// between the airway direction and the optical axis.
pub fn ordering_key(row: &ObservationRow) -> (f64, f64) {
    (row.y_p.norm().round(), angle_between(&row.direction(), &Vector3::z()))
}

fn cmp_keys(a: &(f64, f64), b: &(f64, f64)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Gaussian std on each `y_p` component (mm).
    pub sigma_pos: f64,
    /// Gaussian std on alpha and beta (rad).
    pub sigma_dir: f64,
    /// Probability a visible airway is reported below 0.5.
    pub p_miss: f64,
    /// Probability an invisible airway within two hops of a visible one is
    /// reported above 0.5.
    pub p_false: f64,
    /// Probability, per bifurcation, that its first two children's rows
    /// are exchanged.
    pub p_swap: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_pos == 0.0 && self.sigma_dir == 0.0 && self.p_miss == 0.0 && self.p_false == 0.0 && self.p_swap == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("sigma_pos", self.sigma_pos), ("sigma_dir", self.sigma_dir)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        for (field, p) in [("p_miss", self.p_miss), ("p_false", self.p_false), ("p_swap", self.p_swap)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Draws confidences and regression noise.
struct Corruptor<'a> {
    noise: &'a NoiseConfig,
    rng: &'a mut ChaCha8Rng,
    pos: Option<Normal<f64>>,
    dir: Option<Normal<f64>>,
}

impl<'a> Corruptor<'a> {
    fn new(noise: &'a NoiseConfig, rng: &'a mut ChaCha8Rng) -> Self {
        let normal = |s: f64| (s > 0.0).then(|| Normal::new(0.0, s).expect("validated sigma"));
        Self {
            pos: normal(noise.sigma_pos),
            dir: normal(noise.sigma_dir),
            noise,
            rng,
        }
    }

    fn low(&mut self) -> f64 {
        self.rng.gen_range(0.0..0.5)
    }

    /// Uniform on (0.5, 1].
    fn high(&mut self) -> f64 {
        1.0 - self.rng.gen_range(0.0..0.5)
    }

    fn position(&mut self, y: Vector3<f64>) -> Vector3<f64> {
        match self.pos {
            Some(n) => y + Vector3::from_fn(|_, _| n.sample(self.rng)),
            None => y,
        }
    }

    fn angles(&mut self, y: ViewAngles) -> ViewAngles {
        match self.dir {
            Some(n) => ViewAngles::new(y.alpha + n.sample(self.rng), y.beta + n.sample(self.rng)),
            None => y,
        }
    }

    fn visible_row(&mut self, has_vis_child: bool, y_p: Vector3<f64>, y_d: ViewAngles) -> ObservationRow {
        let missed = self.rng.gen_bool(self.noise.p_miss);
        let p_is_vis = if missed { self.low() } else { self.high() };
        let p_has_vis_child = if has_vis_child && !missed { self.high() } else { self.low() };
        ObservationRow {
            p_is_vis,
            p_has_vis_child,
            y_p: self.position(y_p),
            y_d: self.angles(y_d),
        }
    }

    /// Row for an invisible airway near the visible set.
    fn hidden_row(&mut self, pose: &Pose, tree: &AirwayTree, id: AirwayId) -> ObservationRow {
        if self.rng.gen_bool(self.noise.p_false) {
            let a = tree.airway(id);
            let y_d = direction_to_alpha_beta_lenient(&pose.dir_to_camera(&a.distal_direction())).unwrap_or_default();
            ObservationRow {
                p_is_vis: self.high(),
                p_has_vis_child: self.low(),
                y_p: self.position(pose.to_camera(&a.distal_point())),
                y_d: self.angles(y_d),
            }
        } else {
            ObservationRow {
                p_is_vis: self.low(),
                p_has_vis_child: self.low(),
                ..ObservationRow::default()
            }
        }
    }
}

fn exact_row(gt: &crate::geometry::AirwayGroundTruth) -> ObservationRow {
    ObservationRow {
        p_is_vis: 1.0,
        p_has_vis_child: if gt.has_vis_child { 1.0 } else { 0.0 },
        y_p: gt.y_p.unwrap_or_default(),
        y_d: gt.y_d.unwrap_or_default(),
    }
}

/// Airways within two hops of a visible airway.
fn near_visible(tree: &AirwayTree, truth: &GroundTruth) -> Vec<bool> {
    let mut hops = vec![usize::MAX; tree.len()];
    let mut queue: VecDeque<AirwayId> = truth.visible_ids().into_iter().collect();
    for id in &queue {
        hops[id.index()] = 0;
    }
    while let Some(u) = queue.pop_front() {
        if hops[u.index()] == 2 {
            continue;
        }
        let a = tree.airway(u);
        for v in a.children.iter().copied().chain(a.parent) {
            if hops[v.index()] == usize::MAX {
                hops[v.index()] = hops[u.index()] + 1;
                queue.push_back(v);
            }
        }
    }
    hops.into_iter().map(|h| h <= 2).collect()
}

/// Emulated AirwayNet output for a pose, together with the ground truth it
/// was derived from.
pub fn oracle_airwaynet(
    pose: &Pose,
    tree: &AirwayTree,
    vis: &VisibilityConfig,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> (ObservationMatrix, GroundTruth) {
    let truth = ground_truth_observation(pose, vis, tree);
    let mut matrix = ObservationMatrix::zeros(tree.max_rows());

    if noise.is_zero() {
        for gt in truth.rows.iter().filter(|r| r.is_vis) {
            *matrix.row_mut(gt.airway_id) = exact_row(gt);
        }
        return (matrix, truth);
    }

    let near = near_visible(tree, &truth);
    let mut c = Corruptor::new(noise, rng);
    for gt in &truth.rows {
        let id = gt.airway_id;
        let row = if gt.is_vis {
            let exact = exact_row(gt);
            c.visible_row(gt.has_vis_child, exact.y_p, exact.y_d)
        } else if near[id.index()] {
            c.hidden_row(pose, tree, id)
        } else {
            continue;
        };
        *matrix.row_mut(id) = row;
    }
    if noise.p_swap > 0.0 {
        for b in tree.bifurcations() {
            if c.rng.gen_bool(noise.p_swap) {
                let kids = &tree.airway(b).children;
                matrix.rows.swap(kids[0].index(), kids[1].index());
            }
        }
    }
    (matrix, truth)
}

/// Emulated BifurcationNet output: up to four visible airways without IDs,
/// ordered by [`ordering_key`].
pub fn oracle_bifurcationnet(
    pose: &Pose,
    tree: &AirwayTree,
    vis: &VisibilityConfig,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> (UnlabeledObservation, GroundTruth) {
    let truth = ground_truth_observation(pose, vis, tree);
    let mut rows: Vec<ObservationRow> = if noise.is_zero() {
        truth.rows.iter().filter(|r| r.is_vis).map(exact_row).collect()
    } else {
        let near = near_visible(tree, &truth);
        let mut c = Corruptor::new(noise, rng);
        let mut out = Vec::new();
        for gt in &truth.rows {
            if gt.is_vis {
                let exact = exact_row(gt);
                out.push(c.visible_row(gt.has_vis_child, exact.y_p, exact.y_d));
            } else if near[gt.airway_id.index()] {
                out.push(c.hidden_row(pose, tree, gt.airway_id));
            }
        }
        out.retain(|r| r.p_is_vis >= 0.5);
        out
    };
    let mut keyed: Vec<((f64, f64), ObservationRow)> = rows.drain(..).map(|r| (ordering_key(&r), r)).collect();
    keyed.sort_by(|a, b| cmp_keys(&a.0, &b.0));
    keyed.truncate(UNLABELED_ROWS);
    (
        UnlabeledObservation {
            rows: keyed.into_iter().map(|(_, r)| r).collect(),
        },
        truth,
    )
}

/// Owns its RNG; one instance per thread.
#[derive(Debug, Clone)]
pub struct PerceptionOracle {
    pub vis: VisibilityConfig,
    pub noise: NoiseConfig,
    rng: ChaCha8Rng,
}

impl PerceptionOracle {
    pub fn new(vis: VisibilityConfig, noise: NoiseConfig) -> Result<Self> {
        vis.validate()?;
        noise.validate()?;
        Ok(Self {
            vis,
            noise,
            rng: ChaCha8Rng::seed_from_u64(noise.seed),
        })
    }

    pub fn airwaynet(&mut self, pose: &Pose, tree: &AirwayTree) -> (ObservationMatrix, GroundTruth) {
        oracle_airwaynet(pose, tree, &self.vis, &self.noise, &mut self.rng)
    }

    pub fn bifurcationnet(&mut self, pose: &Pose, tree: &AirwayTree) -> (UnlabeledObservation, GroundTruth) {
        oracle_bifurcationnet(pose, tree, &self.vis, &self.noise, &mut self.rng)
    }
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            c1: 2.0,
            c2: 2.0,
            c3: 1.0,
            c4: 10.0,
            c5: 0.1,
            c6: 6.0,
            c7: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.c5 > 0.0 && self.c6 > self.c5) {
            return Err(Error::config("c5", "need 0 < c5 < c6"));
        }
        Ok(())
    }

    /// Depth weighting: nearby airways weigh more.
    pub fn depth_weight(&self, y_p: &Vector3<f64>) -> f64 {
        self.c5.max(self.c6 - self.c7 * y_p.norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CrossEntropy {
    /// Penalizes both false negatives and false positives.
    #[default]
    TwoSided,
    /// Only the positive-label terms.
    PositiveOnly,
}

const LOG_FLOOR: f64 = 1e-7;

fn bce(label: bool, p: f64, mode: CrossEntropy) -> f64 {
    match (label, mode) {
        (true, _) => -p.max(LOG_FLOOR).ln(),
        (false, CrossEntropy::TwoSided) => -(1.0 - p).max(LOG_FLOOR).ln(),
        (false, CrossEntropy::PositiveOnly) => 0.0,
    }
}

/// Weighted classification + regression loss of a prediction against
/// ground truth. Rows beyond the tree's airways are ignored.
pub fn airwaynet_loss(pred: &ObservationMatrix, truth: &GroundTruth, w: &LossWeights, ce: CrossEntropy) -> Result<f64> {
    if pred.max_rows() < truth.rows.len() {
        return Err(Error::CapacityMismatch(pred.max_rows(), truth.rows.len()));
    }
    pred.validate()?;
    let mut total = 0.0;
    for gt in &truth.rows {
        let p = pred.row(gt.airway_id);
        let mut term = w.c1 * bce(gt.is_vis, p.p_is_vis, ce) + w.c2 * bce(gt.has_vis_child, p.p_has_vis_child, ce);
        let weight = match gt.y_p {
            Some(y_p) if gt.is_vis => {
                let y_d = gt.y_d.unwrap_or_default();
                term += w.c3 * (p.y_p - y_p).norm_squared();
                term += w.c4 * ((p.y_d.alpha - y_d.alpha).powi(2) + (p.y_d.beta - y_d.beta).powi(2));
                w.depth_weight(&y_p)
            }
            _ => w.c5,
        };
        total += weight * term;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Threshold sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// 0 when the airway was never visible.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Per-airway counts at every threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct AirwaySweep {
    pub airway: AirwayId,
    /// Frames in which the airway was truly visible.
    pub support: usize,
    /// Highest score ever assigned to the airway.
    pub max_score: f64,
    pub counts: Vec<Counts>,
}

impl AirwaySweep {
    pub fn precision(&self) -> Vec<f64> {
        self.counts.iter().map(Counts::precision).collect()
    }

    pub fn recall(&self) -> Vec<f64> {
        self.counts.iter().map(Counts::recall).collect()
    }
}

/// One frame of scores (`p_isVis` per airway ID) with true visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFrame {
    pub scores: Vec<f64>,
    pub truth: Vec<bool>,
}

/// Counts `score >= threshold` against truth for every airway and threshold.
pub fn sweep_frames(frames: &[ScoredFrame], thresholds: &[f64]) -> Result<Vec<AirwaySweep>> {
    if frames.is_empty() {
        return Err(Error::Empty("no frames to sweep"));
    }
    let n = frames.iter().map(|f| f.truth.len().max(f.scores.len())).max().unwrap_or(0);
    let mut out: Vec<AirwaySweep> = (0..n)
        .map(|i| AirwaySweep {
            airway: AirwayId(i),
            support: 0,
            max_score: 0.0,
            counts: vec![Counts::default(); thresholds.len()],
        })
        .collect();
    for f in frames {
        for (i, sweep) in out.iter_mut().enumerate() {
            let score = f.scores.get(i).copied().unwrap_or(0.0);
            let truth = f.truth.get(i).copied().unwrap_or(false);
            sweep.support += truth as usize;
            sweep.max_score = sweep.max_score.max(score);
            for (c, &tau) in sweep.counts.iter_mut().zip(thresholds) {
                match (score >= tau, truth) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => {}
                }
            }
        }
    }
    Ok(out)
}

/// Per-airway threshold sweep of AirwayNet predictions against ground truth.
pub fn score_threshold_sweep(pred: &[ObservationMatrix], truth: &[GroundTruth], thresholds: &[f64]) -> Result<Vec<AirwaySweep>> {
    if pred.len() != truth.len() {
        return Err(Error::CapacityMismatch(pred.len(), truth.len()));
    }
    let frames: Vec<ScoredFrame> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ScoredFrame {
            scores: t.rows.iter().map(|r| p.row(r.airway_id).p_is_vis).collect(),
            truth: t.rows.iter().map(|r| r.is_vis).collect(),
        })
        .collect();
    sweep_frames(&frames, thresholds)
}
