//! Scripted centerline tracking with the per-frame labeled localizer, under
//! direction and position noise.

use bronchonav::evaluation::tracking_report;
use bronchonav::perception::NoiseConfig;
use bronchonav::simulator::{centerline_script, run_tracking_episode, TrackingConfig};
use bronchonav::skeleton::generate_tree;
use bronchonav::TreeGenConfig;

fn main() -> bronchonav::Result<()> {
    let tree = generate_tree(&TreeGenConfig::with_depth(5, 21))?;
    let target = tree.leaves().next().unwrap();
    let script = centerline_script(&tree, target, 600, 0.4)?;

    for sigma_dir in [0.0, 0.01, 0.02, 0.05] {
        let cfg = TrackingConfig {
            noise: NoiseConfig {
                sigma_dir,
                sigma_pos: 10.0 * sigma_dir,
                seed: 5,
                ..NoiseConfig::zero()
            },
            ..TrackingConfig::default()
        };
        let log = run_tracking_episode(&tree, &script, &cfg)?;
        let report = tracking_report(&[log]);
        match report.summary {
            Some(s) => println!(
                "sigma_dir {sigma_dir:.2}: {}/{} frames, e_p {:.3} mm, e_d {:.3} deg, e_r {:.3} deg",
                report.frames.len(),
                report.bifurcation_frames,
                s.e_p.mean,
                s.e_d.mean,
                s.e_r.mean
            ),
            None => println!("sigma_dir {sigma_dir:.2}: nothing localized"),
        }
    }
    Ok(())
}
