//! Camera poses, the field-of-view visibility model, ground-truth
//! camera-frame airway observations and pose error metrics.

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Airway, AirwayId, AirwayTree};

const ORTHONORMAL_TOLERANCE: f64 = 1e-9;
const UNIT_TOLERANCE: f64 = 1e-9;
/// Maximum spacing between centerline samples tested for visibility (mm).
pub const SAMPLE_SPACING: f64 = 0.5;

/// Camera pose in CT frame. The rotation's columns are the camera axes
/// `p_x`, `p_y`, `p_z` (optical axis) expressed in CT coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    position: Point3<f64>,
    rotation: Rotation3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    position: [f64; 3],
    p_x: [f64; 3],
    p_y: [f64; 3],
    p_z: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let c = |v: Vector3<f64>| [v.x, v.y, v.z];
        PoseRepr {
            position: [p.position.x, p.position.y, p.position.z],
            p_x: c(p.p_x()),
            p_y: c(p.p_y()),
            p_z: c(p.p_z()),
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        let m = Matrix3::from_columns(&[r.p_x.into(), r.p_y.into(), r.p_z.into()]);
        Pose::new(Point3::from(r.position), m)
    }
}

impl Pose {
    /// Validates orthonormality (to 1e-9) and handedness.
    pub fn new(position: Point3<f64>, rotation: Matrix3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOLERANCE) || !position.coords.iter().all(|x| x.is_finite()) {
            return Err(Error::config("rotation", format!("not orthonormal (error {err:e})")));
        }
        if rotation.determinant() < 0.0 {
            return Err(Error::config("rotation", "determinant is -1"));
        }
        Ok(Self {
            position,
            rotation: Rotation3::from_matrix_unchecked(rotation),
        })
    }

    pub fn from_rotation(position: Point3<f64>, rotation: Rotation3<f64>) -> Self {
        Self { position, rotation }
    }

    pub fn identity() -> Self {
        Self::from_rotation(Point3::origin(), Rotation3::identity())
    }

    /// Camera at `position` looking along `pointing`, rolled by `roll` about
    /// the optical axis relative to the frame obtained by the minimal
    /// rotation of CT z onto `pointing`.
    pub fn looking_along(position: Point3<f64>, pointing: Vector3<f64>, roll: f64) -> Self {
        let pz = pointing.normalize();
        let base = Rotation3::rotation_between(&Vector3::z(), &pz)
            .unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
        Self::from_rotation(position, base * Rotation3::from_axis_angle(&Vector3::z_axis(), roll))
    }

    pub fn position(&self) -> Point3<f64> {
        self.position
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn p_x(&self) -> Vector3<f64> {
        self.rotation.matrix().column(0).into()
    }

    pub fn p_y(&self) -> Vector3<f64> {
        self.rotation.matrix().column(1).into()
    }

    pub fn p_z(&self) -> Vector3<f64> {
        self.rotation.matrix().column(2).into()
    }

    /// CT point to camera frame.
    pub fn to_camera(&self, q: &Point3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(q - self.position))
    }

    /// CT direction to camera frame.
    pub fn dir_to_camera(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(v)
    }

    pub fn to_ct(&self, q_cam: &Vector3<f64>) -> Point3<f64> {
        self.position + self.rotation * q_cam
    }

    pub fn with_position(&self, position: Point3<f64>) -> Self {
        Self { position, ..*self }
    }

    /// Applies a camera-frame rotation `R_x(alpha) R_y(beta)` and
    /// re-orthonormalizes.
    pub fn rotated_by_view_angles(&self, angles: ViewAngles) -> Self {
        if angles == ViewAngles::ZERO {
            return *self;
        }
        let r = self.rotation * view_rotation(angles);
        Self {
            position: self.position,
            rotation: Rotation3::from_matrix(r.matrix()),
        }
    }
}

/// Camera-frame airway direction as rotations about the camera x and y axes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewAngles {
    pub alpha: f64,
    pub beta: f64,
}

impl ViewAngles {
    pub const ZERO: ViewAngles = ViewAngles { alpha: 0.0, beta: 0.0 };

    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    pub fn norm(&self) -> f64 {
        self.alpha.hypot(self.beta)
    }
}

/// `R_x(alpha) * R_y(beta)`.
pub fn view_rotation(a: ViewAngles) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a.alpha) * Rotation3::from_axis_angle(&Vector3::y_axis(), a.beta)
}

/// beta = asin(d_x), alpha = atan2(-d_y, d_z).
pub fn direction_to_alpha_beta(d: &Vector3<f64>) -> Result<ViewAngles> {
    let n = d.norm();
    if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::NonUnitVector(n));
    }
    if d.x.abs() >= 1.0 - 1e-12 {
        return Err(Error::GimbalDegenerate);
    }
    Ok(ViewAngles {
        alpha: (-d.y).atan2(d.z),
        beta: d.x.clamp(-1.0, 1.0).asin(),
    })
}

/// Normalizes first; for directions that are unit up to rounding.
pub fn direction_to_alpha_beta_lenient(d: &Vector3<f64>) -> Result<ViewAngles> {
    let n = d.norm();
    if !(n > 0.0) {
        return Err(Error::NonUnitVector(n));
    }
    direction_to_alpha_beta(&(d / n))
}

/// Inverse of [`direction_to_alpha_beta`]: `R_x(alpha) R_y(beta) z`.
pub fn alpha_beta_to_direction(a: ViewAngles) -> Vector3<f64> {
    let (sa, ca) = a.alpha.sin_cos();
    let (sb, cb) = a.beta.sin_cos();
    Vector3::new(sb, -cb * sa, cb * ca)
}

/// Angle between two vectors, accurate near 0 and pi.
pub fn angle_between(u: &Vector3<f64>, v: &Vector3<f64>) -> f64 {
    u.cross(v).norm().atan2(u.dot(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisibilityConfig {
    /// Full apex angle of the viewing cone (rad).
    pub fov_full_angle: f64,
    /// Maximum visibility distance (mm).
    pub max_dist: f64,
    /// Hide centerline points whose line of sight leaves the lumen.
    pub occlusion: bool,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self {
            fov_full_angle: 60f64.to_radians(),
            max_dist: 30.0,
            occlusion: false,
        }
    }
}

impl VisibilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_full_angle > 0.0 && self.fov_full_angle < std::f64::consts::PI) {
            return Err(Error::config("fov_full_angle", "must lie in (0, pi)"));
        }
        if !(self.max_dist > 0.0) {
            return Err(Error::config("max_dist", "must be positive"));
        }
        Ok(())
    }

    fn cos_half(&self) -> f64 {
        (self.fov_full_angle / 2.0).cos()
    }
}

/// Visibility test on a camera-frame point.
pub fn camera_point_visible(cfg: &VisibilityConfig, q_c: &Vector3<f64>) -> bool {
    let n = q_c.norm();
    q_c.z > 0.0 && n <= cfg.max_dist + 1e-9 && q_c.z >= n * cfg.cos_half() - 1e-12
}

pub fn point_visible(pose: &Pose, cfg: &VisibilityConfig, q: &Point3<f64>) -> bool {
    camera_point_visible(cfg, &pose.to_camera(q))
}

/// Ground truth for one airway at one pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirwayGroundTruth {
    pub airway_id: AirwayId,
    pub is_vis: bool,
    pub has_vis_child: bool,
    /// Camera-frame furthest visible centerline point (mm).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub y_p: Option<Vector3<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub y_d: Option<ViewAngles>,
}

impl AirwayGroundTruth {
    fn hidden(airway_id: AirwayId) -> Self {
        Self {
            airway_id,
            is_vis: false,
            has_vis_child: false,
            y_p: None,
            y_d: None,
        }
    }
}

/// Per-airway ground truth, indexed by airway ID.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rows: Vec<AirwayGroundTruth>,
}

impl GroundTruth {
    pub fn row(&self, id: AirwayId) -> &AirwayGroundTruth {
        &self.rows[id.index()]
    }

    pub fn visible_ids(&self) -> Vec<AirwayId> {
        self.rows.iter().filter(|r| r.is_vis).map(|r| r.airway_id).collect()
    }

    /// Nearest visible bifurcation: an airway whose bifurcation point and at
    /// least two children are visible, smallest `|y_p|` first.
    pub fn nearest_bifurcation(&self, tree: &AirwayTree) -> Option<AirwayId> {
        self.rows
            .iter()
            .filter(|r| r.has_vis_child)
            .filter(|r| {
                tree.airway(r.airway_id)
                    .children
                    .iter()
                    .filter(|c| self.row(**c).is_vis)
                    .count()
                    >= 2
            })
            .min_by(|a, b| {
                let da = a.y_p.map_or(f64::INFINITY, |p| p.norm());
                let db = b.y_p.map_or(f64::INFINITY, |p| p.norm());
                da.total_cmp(&db)
            })
            .map(|r| r.airway_id)
    }
}

/// True if the segment from the camera to `q` stays inside the lumen.
fn line_of_sight(tree: &AirwayTree, from: &Point3<f64>, q: &Point3<f64>) -> bool {
    let d = q - from;
    let steps = (d.norm() / 1.0).ceil() as usize;
    (1..steps).all(|k| tree.in_lumen(&(from + d * (k as f64 / steps as f64))))
}

fn observe_airway(pose: &Pose, cfg: &VisibilityConfig, tree: &AirwayTree, airway: &Airway) -> AirwayGroundTruth {
    let reach = cfg.max_dist + 1e-9;
    let mut best: Option<(f64, Vector3<f64>, Vector3<f64>)> = None;
    let visible = |q: &Point3<f64>| {
        point_visible(pose, cfg, q) && (!cfg.occlusion || line_of_sight(tree, &pose.position(), q))
    };

    let last = airway.centerline.len() - 2;
    for (k, w) in airway.centerline.windows(2).enumerate() {
        let seg = w[1] - w[0];
        let len = seg.norm();
        // Skip segments entirely out of range.
        let t = ((pose.position() - w[0]).dot(&seg) / (len * len)).clamp(0.0, 1.0);
        if (pose.position() - (w[0] + seg * t)).norm() > reach {
            continue;
        }
        let n = (len / SAMPLE_SPACING).ceil().max(1.0) as usize;
        let end = if k == last { n } else { n - 1 };
        for s in 0..=end {
            let q = w[0] + seg * (s as f64 / n as f64);
            if !visible(&q) {
                continue;
            }
            let q_c = pose.to_camera(&q);
            let dist = q_c.norm();
            // `>=` prefers the more distal sample on ties.
            if best.map_or(true, |(bd, _, _)| dist >= bd) {
                best = Some((dist, q_c, seg / len));
            }
        }
    }

    let Some((_, mut y_p, mut tangent)) = best else {
        return AirwayGroundTruth::hidden(airway.id);
    };
    let has_vis_child = !airway.children.is_empty() && visible(&airway.distal_point());
    if has_vis_child {
        // A visible bifurcation is the airway's reported point.
        y_p = pose.to_camera(&airway.distal_point());
        tangent = airway.distal_direction();
    }
    let y_d = direction_to_alpha_beta_lenient(&pose.dir_to_camera(&tangent)).ok();
    AirwayGroundTruth {
        airway_id: airway.id,
        is_vis: true,
        has_vis_child,
        y_p: Some(y_p),
        y_d,
    }
}

/// Ground-truth observation of every airway in the tree.
pub fn ground_truth_observation(pose: &Pose, cfg: &VisibilityConfig, tree: &AirwayTree) -> GroundTruth {
    GroundTruth {
        rows: tree.airways().iter().map(|a| observe_airway(pose, cfg, tree, a)).collect(),
    }
}

/// Position (mm), pointing-direction (deg) and roll (deg) errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub e_p: f64,
    pub e_d: f64,
    pub e_r: f64,
}

/// Roll is measured after rotating `b` by the minimal rotation that takes
/// its pointing vector onto `a`'s.
pub fn pose_errors(a: &Pose, b: &Pose) -> Result<PoseErrors> {
    let (az, bz) = (a.p_z(), b.p_z());
    let align = minimal_rotation(&bz, &az).ok_or(Error::AntiparallelPointing)?;
    Ok(PoseErrors {
        e_p: (a.position() - b.position()).norm(),
        e_d: angle_between(&az, &bz).to_degrees(),
        e_r: angle_between(&a.p_x(), &(align * b.p_x())).to_degrees(),
    })
}

/// Geodesic rotation taking unit `from` onto unit `to`; `None` when they
/// are antiparallel.
pub fn minimal_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> Option<Rotation3<f64>> {
    let axis = from.cross(to);
    let s = axis.norm();
    let c = from.dot(to);
    if s < 1e-15 {
        return if c > 0.0 { Some(Rotation3::identity()) } else { None };
    }
    Some(Rotation3::from_axis_angle(&Unit::new_unchecked(axis / s), s.atan2(c)))
}
