//! Metrics over a batch of tracking and driving logs: per-airway F1, the
//! averaged precision-recall curve, pose errors and driving statistics.

use bronchonav::evaluation::{evaluate, pr_curve_csv};
use bronchonav::perception::NoiseConfig;
use bronchonav::simulator::{centerline_script, run_driving_episode, run_tracking_episode, DrivingConfig, TrackingConfig};
use bronchonav::skeleton::generate_tree;
use bronchonav::TreeGenConfig;

fn main() -> bronchonav::Result<()> {
    let tree = generate_tree(&TreeGenConfig::with_depth(4, 5))?;
    let noise = NoiseConfig {
        sigma_dir: 0.03,
        sigma_pos: 1.0,
        p_miss: 0.1,
        p_false: 0.1,
        seed: 1,
        ..NoiseConfig::zero()
    };
    let mut logs = Vec::new();
    for (i, leaf) in tree.leaves().enumerate() {
        let script = centerline_script(&tree, leaf, 300, i as f64)?;
        let cfg = TrackingConfig {
            noise: NoiseConfig { seed: i as u64, ..noise },
            ..TrackingConfig::default()
        };
        logs.push(run_tracking_episode(&tree, &script, &cfg)?);
    }
    for trial in 0..3 {
        let mut cfg = DrivingConfig { noise: NoiseConfig { seed: trial, ..noise }, ..DrivingConfig::default() };
        cfg.sim.seed = trial;
        logs.push(run_driving_episode(&tree, &[tree.leaves().last().unwrap()], &cfg)?);
    }

    let report = evaluate(&logs, 0.5)?;
    for s in report.f1.iter().take(5) {
        println!("airway {}: P {:.3} R {:.3} F1 {:.3}", s.airway_id, s.precision, s.recall, s.f1);
    }
    if let Some(pr) = &report.pr {
        println!("PR AUC {:.4}, micro {:.4}", pr.auc, pr.micro_auc);
        println!("{}", pr_curve_csv(pr).lines().take(4).collect::<Vec<_>>().join("\n"));
    }
    if let Some(s) = &report.tracking.summary {
        println!("e_d median {:.3} deg over {} frames", s.e_d.median, report.tracking.frames.len());
    }
    if let Some(d) = &report.driving {
        println!("driving {}/{}", d.successes, d.trials);
    }
    Ok(())
}
