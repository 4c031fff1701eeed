//! Closed-loop driving to two targets in sequence, with detection dropouts
//! that force the supervisor into recovery.

use bronchonav::control::Mode;
use bronchonav::perception::NoiseConfig;
use bronchonav::simulator::{run_driving_episode, DrivingConfig};
use bronchonav::skeleton::generate_tree;
use bronchonav::TreeGenConfig;

fn main() -> bronchonav::Result<()> {
    let tree = generate_tree(&TreeGenConfig::with_depth(5, 4))?;
    let leaves: Vec<_> = tree.leaves().collect();
    let targets = [leaves[0], *leaves.last().unwrap()];
    let mut cfg = DrivingConfig {
        noise: NoiseConfig {
            sigma_dir: 0.03,
            sigma_pos: 1.0,
            p_miss: 0.1,
            seed: 3,
            ..NoiseConfig::zero()
        },
        ..DrivingConfig::default()
    };
    cfg.sim.seed = 3;

    let log = run_driving_episode(&tree, &targets, &cfg)?;
    let mut mode = None;
    for f in &log.frames {
        if f.mode != mode {
            let p = f.state.pose.position();
            println!("t {:6.2} s  {:?}  at ({:.1}, {:.1}, {:.1})", f.t, f.mode.unwrap_or(Mode::Follow), p.x, p.y, p.z);
            mode = f.mode;
        }
    }
    println!("{:?}", log.outcome);
    Ok(())
}
