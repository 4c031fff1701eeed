//! Localization from unlabeled detections: the particle filter assigns each
//! frame's observation to a skeleton bifurcation.

use bronchonav::localization::{FilterConfig, FilterState};
use bronchonav::perception::{NoiseConfig, PerceptionOracle};
use bronchonav::simulator::centerline_script;
use bronchonav::skeleton::generate_tree;
use bronchonav::{TreeGenConfig, VisibilityConfig};

fn main() -> bronchonav::Result<()> {
    let tree = generate_tree(&TreeGenConfig::with_depth(4, 2))?;
    let target = tree.leaves().last().unwrap();
    let script = centerline_script(&tree, target, 300, 1.1)?;
    let noise = NoiseConfig {
        sigma_dir: 0.02,
        sigma_pos: 0.5,
        p_miss: 0.05,
        seed: 9,
        ..NoiseConfig::zero()
    };
    let mut oracle = PerceptionOracle::new(VisibilityConfig::default(), noise)?;
    let mut filter = FilterState::new(FilterConfig::default());

    let (mut frames, mut estimated, mut correct) = (0, 0, 0);
    let mut last = None;
    for s in &script {
        let (obs, truth) = oracle.bifurcationnet(&s.pose, &tree);
        let Some(truth) = truth.nearest_bifurcation(&tree) else { continue };
        frames += 1;
        if let Some(est) = filter.step(&obs, s.u_ins, &tree) {
            estimated += 1;
            correct += (est.parent == truth) as usize;
            if last != Some(est.parent) {
                println!("u_ins {:6.1} mm: bifurcation {} (posterior {:.2e})", s.u_ins, est.parent, est.posterior);
                last = Some(est.parent);
            }
        }
    }
    println!("{frames} bifurcation frames, {estimated} estimates, {correct} correct");
    Ok(())
}
