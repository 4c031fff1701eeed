//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bronchonav::control::{achieved_heading, insertion_command, tendon_command, ControllerConfig, Mode};
use bronchonav::evaluation::{averaged_pr_curve, driving_summary, per_airway_f1};
use bronchonav::geometry::{pose_errors, AirwayGroundTruth, GroundTruth};
use bronchonav::localization::{p_gen, select_particle, FilterConfig, FilterState};
use bronchonav::perception::{airwaynet_loss, oracle_bifurcationnet, CrossEntropy, LossWeights, NoiseConfig, ObservationMatrix, ObservationRow};
use bronchonav::simulator::{
    benchmark, centerline_script, run_driving_episode, run_tracking_episode, DrivingConfig, EpisodeHeader, EpisodeKind,
    EpisodeLog, Frame, FrameTruth, Observation, Outcome, ScopeState, TrackingConfig,
};
use bronchonav::skeleton::{generate_tree, load_tree, save_tree};
use bronchonav::{AirwayId, Pose, TreeGenConfig, ViewAngles, VisibilityConfig};

/// Minimum top-3 vs exhaustive agreement, frozen from the measured rate.
const FILTER_AGREEMENT: f64 = 0.99;
const DRIVE_SUCCESSES: usize = 19;
const BENCH_RATE_HZ: f64 = 25.0;

type Verdict = (bool, String);

fn zero_noise_tracking() -> Verdict {
    let start = Instant::now();
    let tree = generate_tree(&TreeGenConfig::with_depth(5, 11)).unwrap();
    let leaves: Vec<AirwayId> = tree.leaves().collect();
    let mut logs = Vec::new();
    let (mut bif_frames, mut worst) = (0, 0.0f64);
    let mut missing = 0;
    for i in 0..10 {
        let script = centerline_script(&tree, leaves[i], 500, 0.6 * i as f64).unwrap();
        let log = run_tracking_episode(&tree, &script, &TrackingConfig::default()).unwrap();
        for f in log.frames.iter().filter(|f| f.truth.bifurcation.is_some()) {
            bif_frames += 1;
            match &f.estimate {
                Some(e) => {
                    let err = pose_errors(&f.state.pose, &e.pose).unwrap();
                    worst = worst.max(err.e_p).max(err.e_d).max(err.e_r);
                }
                None => missing += 1,
            }
        }
        logs.push(log);
    }
    let auc = averaged_pr_curve(&logs).unwrap().auc;
    let secs = start.elapsed().as_secs_f64();
    (
        bif_frames > 0 && missing == 0 && worst < 1e-6 && auc == 1.0 && secs < 30.0,
        format!("{bif_frames} bifurcation frames, {missing} unlocalized, worst error {worst:.2e}, AUC {auc}, {secs:.1} s"),
    )
}

fn single_airway_truth(y_p: Vector3<f64>) -> GroundTruth {
    GroundTruth {
        rows: vec![AirwayGroundTruth {
            airway_id: AirwayId(0),
            is_vis: true,
            has_vis_child: false,
            y_p: Some(y_p),
            y_d: Some(ViewAngles::ZERO),
        }],
    }
}

fn loss_with_offset(z: f64, dz: f64) -> f64 {
    let truth = single_airway_truth(Vector3::new(0.0, 0.0, z));
    let mut pred = ObservationMatrix::zeros(500);
    *pred.row_mut(AirwayId(0)) = ObservationRow {
        p_is_vis: 1.0,
        p_has_vis_child: 0.0,
        y_p: Vector3::new(0.0, 0.0, z + dz),
        y_d: ViewAngles::ZERO,
    };
    airwaynet_loss(&pred, &truth, &LossWeights::default(), CrossEntropy::TwoSided).unwrap()
}

fn loss_values() -> Verdict {
    let w = LossWeights::default();
    let weights_ok = (w.c1, w.c2, w.c3, w.c4, w.c5, w.c6, w.c7) == (2.0, 2.0, 1.0, 10.0, 0.1, 6.0, 0.2);
    let (perfect, offset, floor) = (loss_with_offset(10.0, 0.0), loss_with_offset(10.0, 1.0), loss_with_offset(30.0, 1.0));
    (
        weights_ok && perfect == 0.0 && (offset - 4.0).abs() < 1e-12 && (floor - 0.1).abs() < 1e-12,
        format!("losses {perfect}, {offset}, {floor}"),
    )
}

fn controller_identities() -> Verdict {
    let cfg = ControllerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let e = ViewAngles::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let back = achieved_heading(&tendon_command(e, theta, &cfg), theta, cfg.k);
        worst = worst.max((back.alpha - e.alpha).abs()).max((back.beta - e.beta).abs());
    }
    let full = insertion_command(ViewAngles::ZERO, &cfg);
    let stop = insertion_command(ViewAngles::new(90f64.to_radians(), 0.0), &cfg);
    (
        worst <= 1e-12 && full == 10.0 && stop == 0.0,
        format!("forward identity residual {worst:.1e}, ramp {full} -> {stop}"),
    )
}

fn filter_agreement() -> Verdict {
    let tree = generate_tree(&TreeGenConfig::with_depth(5, 5)).unwrap();
    let noise = NoiseConfig {
        sigma_dir: 0.02,
        sigma_pos: 0.5,
        ..NoiseConfig::zero()
    };
    let vis = VisibilityConfig::default();
    let state = FilterState::new(FilterConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut frames, mut agree, mut draws) = (0, 0, 0);
    while frames < 500 && draws < 100_000 {
        draws += 1;
        let (pose, _, u_ins) = common::bifurcation_view(&tree, &mut rng);
        let (obs, gt) = oracle_bifurcationnet(&pose, &tree, &vis, &noise, &mut rng);
        if gt.nearest_bifurcation(&tree).is_none() {
            continue;
        }
        let particles = state.score_all(&obs, u_ins, &tree);
        let Some(all) = select_particle(&particles, particles.len()) else { continue };
        frames += 1;
        let top = select_particle(&particles, 3).unwrap();
        agree += (particles[top].bifurcation == particles[all].bifurcation) as usize;
    }
    let rate = agree as f64 / frames as f64;
    let table = [p_gen(1), p_gen(2), p_gen(3), p_gen(4)] == [1.0, 0.1, 0.01, 0.0];
    (
        frames == 500 && rate >= FILTER_AGREEMENT && table,
        format!("{agree}/{frames} frames agree ({rate:.3}), p_gen table {}", if table { "exact" } else { "wrong" }),
    )
}

fn driving() -> Verdict {
    let start = Instant::now();
    let tree = generate_tree(&TreeGenConfig::with_depth(6, 7)).unwrap();
    let leaves: Vec<AirwayId> = tree.leaves().collect();
    let targets = [leaves[0], leaves[10], leaves[21], leaves[31]];
    let noise = NoiseConfig {
        sigma_dir: 0.03,
        sigma_pos: 1.0,
        p_miss: 0.02,
        ..NoiseConfig::zero()
    };
    let mut logs = Vec::new();
    for (t, &target) in targets.iter().enumerate() {
        for trial in 0..5u64 {
            let seed = 100 * t as u64 + trial;
            let mut cfg = DrivingConfig {
                noise: NoiseConfig { seed, ..noise },
                ..DrivingConfig::default()
            };
            cfg.sim.seed = seed;
            logs.push(run_driving_episode(&tree, &[target], &cfg).unwrap());
        }
    }
    let summary = driving_summary(&logs).unwrap();

    let mut recovered = None;
    for seed in 0..10u64 {
        let mut cfg = DrivingConfig {
            noise: NoiseConfig {
                p_miss: 0.15,
                seed,
                ..noise
            },
            ..DrivingConfig::default()
        };
        cfg.sim.seed = seed;
        let log = run_driving_episode(&tree, &[targets[3]], &cfg).unwrap();
        let recover_then_follow = log
            .frames
            .windows(2)
            .any(|w| w[0].mode == Some(Mode::Recover) && w[1].mode == Some(Mode::Follow));
        if log.outcome.success && recover_then_follow {
            recovered = Some(seed);
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        summary.successes >= DRIVE_SUCCESSES && recovered.is_some() && secs < 300.0,
        format!(
            "{}/{} successful, dropout recovery {}, {secs:.1} s",
            summary.successes,
            summary.trials,
            recovered.map_or("not observed".to_string(), |s| format!("with seed {s}"))
        ),
    )
}

fn throughput() -> Verdict {
    let cfg = TreeGenConfig {
        max_airways: Some(500),
        ..TreeGenConfig::with_depth(9, 3)
    };
    let tree = generate_tree(&cfg).unwrap();
    let noise = NoiseConfig {
        sigma_dir: 0.03,
        sigma_pos: 1.0,
        p_miss: 0.02,
        ..NoiseConfig::zero()
    };
    let report = benchmark(
        &tree,
        500,
        &DrivingConfig {
            noise,
            ..DrivingConfig::default()
        },
    )
    .unwrap();
    (
        report.rate_hz >= BENCH_RATE_HZ,
        format!("{:.1} it/s on {} airways", report.rate_hz, tree.len()),
    )
}

fn determinism() -> Verdict {
    let tree = generate_tree(&TreeGenConfig::with_depth(5, 9)).unwrap();
    let target = tree.leaves().nth(3).unwrap();
    let cfg = DrivingConfig {
        noise: NoiseConfig {
            sigma_dir: 0.03,
            sigma_pos: 1.0,
            p_miss: 0.05,
            p_false: 0.05,
            p_swap: 0.05,
            seed: 77,
        },
        ..DrivingConfig::default()
    };
    let a = run_driving_episode(&tree, &[target], &cfg).unwrap().to_jsonl();
    let b = run_driving_episode(&tree, &[target], &cfg).unwrap().to_jsonl();

    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut lossless = 0;
    for i in 0..100 {
        let tree = generate_tree(&TreeGenConfig::with_depth(rng.gen_range(1..8), rng.gen())).unwrap();
        let path = dir.path().join(format!("tree_{i}.json"));
        save_tree(&tree, &path).unwrap();
        let back = load_tree(&path).unwrap();
        lossless += (back == tree && back.content_hash() == tree.content_hash()) as usize;
    }
    (
        a == b && lossless == 100,
        format!("driving logs identical: {}, {lossless}/100 trees round-trip", a == b),
    )
}

fn hand_log(frames: Vec<Frame>, success: bool, time: Option<f64>) -> EpisodeLog {
    EpisodeLog {
        header: EpisodeHeader {
            episode: EpisodeKind::Driving,
            tree_hash: String::new(),
            vis: VisibilityConfig::default(),
            noise: NoiseConfig::zero(),
            localizer: Default::default(),
            sim: None,
            controller: None,
            targets: vec![],
        },
        frames,
        outcome: Outcome {
            success,
            completion_time: time,
            recoveries: 0,
            collisions: 0,
            targets_reached: success as usize,
        },
    }
}

fn hand_frame(t: f64, score: f64, visible: bool) -> Frame {
    let mut m = ObservationMatrix::zeros(4);
    m.row_mut(AirwayId(0)).p_is_vis = score;
    Frame {
        t,
        state: ScopeState::new(Pose::identity(), 0.0, 0.0),
        truth: FrameTruth {
            visible: if visible { vec![AirwayId(0)] } else { vec![] },
            bifurcation: None,
        },
        observation: Observation::Matrix(m),
        estimate: None,
        command: None,
        mode: None,
    }
}

fn metrics() -> Verdict {
    // TP, TP, FN, FP.
    let log = hand_log(
        vec![hand_frame(0.0, 0.9, true), hand_frame(0.02, 0.6, true), hand_frame(0.04, 0.1, true), hand_frame(0.06, 0.8, false)],
        true,
        None,
    );
    let s = &per_airway_f1(&[log], 0.5).unwrap()[0];
    let third = 2.0 / 3.0;
    let f1_ok = s.f1 == third && s.precision == third && s.recall == third;
    let logs: Vec<EpisodeLog> = [70.0, 80.0, 90.0].iter().map(|&t| hand_log(vec![], true, Some(t))).collect();
    let c = driving_summary(&logs).unwrap().completion.unwrap();
    (
        f1_ok && c.mean == 80.0 && c.sample_std == 10.0,
        format!(
            "F1 {:.4}, precision {:.4}, recall {:.4}; completion mean {} std {} (population {:.3})",
            s.f1, s.precision, s.recall, c.mean, c.sample_std, c.std
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("zero-noise tracking exactness", zero_noise_tracking),
        ("loss formula values", loss_values),
        ("controller identities", controller_identities),
        ("particle filter top-3 vs exhaustive", filter_agreement),
        ("driving success and recovery", driving),
        ("loop throughput", throughput),
        ("determinism and tree round trip", determinism),
        ("metric hand values", metrics),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| (false, "panicked".to_string()));
        failed += (!ok) as usize;
        println!("criterion {} {name}: {} ({detail})", i + 1, if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
