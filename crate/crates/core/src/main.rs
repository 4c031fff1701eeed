use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bronchonav::evaluation::{error_histogram_csv, evaluate, pr_curve_csv};
use bronchonav::localization::{FilterConfig, LocalizerKind};
use bronchonav::perception::NoiseConfig;
use bronchonav::simulator::{benchmark, centerline_script, run_driving_episode, run_tracking_episode, DrivingConfig, EpisodeLog, TrackingConfig};
use bronchonav::skeleton::{generate_tree, load_tree, save_tree};
use bronchonav::{load_config, AirwayId, Error, Result, TreeGenConfig};

/// Overrides every configured seed when set.
const SEED_ENV: &str = "BRONCHONAV_SEED";

#[derive(Parser)]
#[command(name = "bronchonav", version, about = "Airway-tree localization and driving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Localizer {
    Airwaynet,
    Filter,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic airway tree.
    GenTree {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scripted tracking episodes down the centerline to successive leaves.
    Track {
        #[arg(long)]
        tree: PathBuf,
        /// Noise configuration (JSON).
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = 500)]
        frames: usize,
        #[arg(long, value_enum, default_value_t = Localizer::Airwaynet)]
        localizer: Localizer,
        /// Particle filter configuration (JSON); implies `--localizer filter`.
        #[arg(long)]
        filter: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop driving trials, each visiting the targets in order.
    Drive {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Driving configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics over a directory of episode logs.
    Eval {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Pose-error histograms.
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Loop-rate benchmark of perception, localization, control and simulation.
    Bench {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig {
                field: SEED_ENV,
                reason: format!("not an unsigned integer: {s:?}"),
            }),
        Err(_) => Ok(None),
    }
}

fn load_or_default<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load_config)
}

fn write_log(dir: &Path, name: &str, log: &EpisodeLog) -> Result<()> {
    let path = dir.join(name);
    log.write(&path).map_err(|e| match e {
        Error::Io(source) => Error::at(&path)(source),
        e => e,
    })
}

fn run(cli: Cli) -> Result<()> {
    let seed = env_seed()?;
    match cli.command {
        Cmd::GenTree { config, out } => {
            let mut cfg: TreeGenConfig = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let tree = generate_tree(&cfg)?;
            save_tree(&tree, &out)?;
            println!("{} airways -> {} ({})", tree.len(), out.display(), tree.content_hash());
        }
        Cmd::Track {
            tree,
            noise,
            episodes,
            frames,
            localizer,
            filter,
            out,
        } => {
            let tree = load_tree(&tree)?;
            let mut noise: NoiseConfig = load_or_default(noise.as_deref())?;
            if let Some(s) = seed {
                noise.seed = s;
            }
            let localizer = match (localizer, filter) {
                (_, Some(p)) => LocalizerKind::ParticleFilter(load_config::<FilterConfig>(p)?),
                (Localizer::Filter, None) => LocalizerKind::ParticleFilter(FilterConfig::default()),
                (Localizer::Airwaynet, None) => LocalizerKind::AirwayNet,
            };
            std::fs::create_dir_all(&out).map_err(Error::at(&out))?;
            let leaves: Vec<AirwayId> = tree.leaves().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            for i in 0..episodes {
                let roll = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let script = centerline_script(&tree, leaves[i % leaves.len()], frames, roll)?;
                let cfg = TrackingConfig {
                    noise: NoiseConfig {
                        seed: noise.seed.wrapping_add(i as u64),
                        ..noise
                    },
                    localizer,
                    ..TrackingConfig::default()
                };
                let log = run_tracking_episode(&tree, &script, &cfg)?;
                let localized = log.frames.iter().filter(|f| f.estimate.is_some()).count();
                write_log(&out, &format!("track_{i:03}.jsonl"), &log)?;
                println!("episode {i}: {} frames, {localized} localized", log.frames.len());
            }
        }
        Cmd::Drive {
            tree,
            targets,
            trials,
            config,
            out,
        } => {
            let tree = load_tree(&tree)?;
            let mut cfg: DrivingConfig = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.noise.seed = s;
                cfg.sim.seed = s;
            }
            let targets: Vec<AirwayId> = targets.into_iter().map(AirwayId).collect();
            std::fs::create_dir_all(&out).map_err(Error::at(&out))?;
            let mut successes = 0;
            for i in 0..trials {
                let mut trial = cfg;
                trial.noise.seed = cfg.noise.seed.wrapping_add(i as u64);
                trial.sim.seed = cfg.sim.seed.wrapping_add(i as u64);
                let log = run_driving_episode(&tree, &targets, &trial)?;
                successes += log.outcome.success as usize;
                write_log(&out, &format!("drive_{i:03}.jsonl"), &log)?;
                let o = log.outcome;
                match o.completion_time {
                    Some(t) => println!("trial {i}: success in {t:.2} s, {} recoveries, {} collisions", o.recoveries, o.collisions),
                    None => println!("trial {i}: failed ({} of {} targets)", o.targets_reached, targets.len()),
                }
            }
            println!("{successes}/{trials} successful");
        }
        Cmd::Eval {
            logs,
            report,
            csv,
            hist,
            threshold,
        } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&logs)
                .map_err(Error::at(&logs))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            paths.sort();
            let logs = paths.iter().map(EpisodeLog::read).collect::<Result<Vec<_>>>()?;
            let r = evaluate(&logs, threshold)?;
            std::fs::write(&report, serde_json::to_string_pretty(&r)?).map_err(Error::at(&report))?;
            if let (Some(path), Some(pr)) = (&csv, &r.pr) {
                std::fs::write(path, pr_curve_csv(pr)).map_err(Error::at(path))?;
            }
            if let Some(path) = &hist {
                std::fs::write(path, error_histogram_csv(&r.tracking)).map_err(Error::at(path))?;
            }
            println!("{} episodes", r.episodes);
            if let Some(pr) = &r.pr {
                println!("PR AUC {:.4} (micro {:.4}) over {} airways", pr.auc, pr.micro_auc, pr.airways);
            }
            if let Some(s) = &r.tracking.summary {
                println!(
                    "tracking: {}/{} frames, e_p {:.3} mm, e_d {:.3} deg, e_r {:.3} deg (means)",
                    r.tracking.frames.len(),
                    r.tracking.bifurcation_frames,
                    s.e_p.mean,
                    s.e_d.mean,
                    s.e_r.mean
                );
            }
            if let Some(d) = &r.driving {
                println!("driving: {}/{} successful", d.successes, d.trials);
            }
        }
        Cmd::Bench { tree, iterations, config } => {
            let tree = load_tree(&tree)?;
            let mut cfg: DrivingConfig = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.noise.seed = s;
                cfg.sim.seed = s;
            }
            let r = benchmark(&tree, iterations, &cfg)?;
            println!("{} iterations in {:.3} s: {:.1} it/s ({} airways)", r.iterations, r.seconds, r.rate_hz, tree.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
