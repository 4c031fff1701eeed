#![allow(dead_code)]

use bronchonav::geometry::{alpha_beta_to_direction, ViewAngles};
use bronchonav::{AirwayId, AirwayTree, Pose};
use nalgebra::Point3;
use rand::Rng;

/// Random pose inside a bifurcating airway, 6-20 mm before its distal
/// point, looking roughly down the airway. Returns the pose, the airway
/// and the true insertion depth.
pub fn bifurcation_view(tree: &AirwayTree, rng: &mut impl Rng) -> (Pose, AirwayId, f64) {
    let bifs: Vec<AirwayId> = tree.bifurcations().collect();
    let id = bifs[rng.gen_range(0..bifs.len())];
    let a = tree.airway(id);
    let back = rng.gen_range(6.0..20.0f64).min(a.length() - 1.0);
    let dir = a.distal_direction();
    let pos: Point3<f64> = a.distal_point() - dir * back;
    let roll = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let tilt = ViewAngles::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let base = Pose::looking_along(pos, dir, roll);
    let pointing = base.rotation() * alpha_beta_to_direction(tilt);
    let u_ins = tree.insertion_length_to_bifurcation(id).unwrap() - back;
    (Pose::looking_along(pos, pointing, roll), id, u_ins)
}
