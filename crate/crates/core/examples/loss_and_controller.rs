//! The training loss on a noisy prediction, and one controller command
//! from the resulting view error.

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bronchonav::control::{achieved_heading, insertion_command, tendon_command, view_error, ControllerConfig};
use bronchonav::perception::{airwaynet_loss, oracle_airwaynet, CrossEntropy, LossWeights, NoiseConfig};
use bronchonav::skeleton::generate_tree;
use bronchonav::{Pose, TreeGenConfig, VisibilityConfig};

fn main() -> bronchonav::Result<()> {
    let tree = generate_tree(&TreeGenConfig::with_depth(3, 1))?;
    let pose = Pose::looking_along(Point3::new(1.0, -0.5, 40.0), Vector3::new(0.05, 0.0, 1.0).normalize(), 0.3);
    let vis = VisibilityConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let w = LossWeights::default();
    for sigma_dir in [0.0, 0.02, 0.1] {
        let noise = NoiseConfig { sigma_dir, sigma_pos: 10.0 * sigma_dir, ..NoiseConfig::zero() };
        let (pred, truth) = oracle_airwaynet(&pose, &tree, &vis, &noise, &mut rng);
        let two = airwaynet_loss(&pred, &truth, &w, CrossEntropy::TwoSided)?;
        let pos = airwaynet_loss(&pred, &truth, &w, CrossEntropy::PositiveOnly)?;
        println!("sigma_dir {sigma_dir:.2}: loss {two:.4} (positive-only {pos:.4})");
    }

    let cfg = ControllerConfig::default();
    let (obs, _) = oracle_airwaynet(&pose, &tree, &vis, &NoiseConfig::zero(), &mut rng);
    let child = tree.airway(tree.root_id()).children[0];
    let e = view_error(&obs, &tree, child, &cfg)?;
    let theta = 0.3;
    let du = tendon_command(e, theta, &cfg);
    println!("view error to {child}: alpha {:.4} beta {:.4} rad", e.alpha, e.beta);
    println!("tendons {du:.4?}, insertion {:.2} mm/s", insertion_command(e, &cfg));
    println!("achieved heading {:?}", achieved_heading(&du, theta, cfg.k));
    Ok(())
}
