//! Metrics over episode logs: per-airway F1, averaged precision-recall
//! curves, tracking errors and driving outcomes.
//!
//! Every function here is a pure function of the logs it is given.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_errors, PoseErrors};
use crate::perception::{sweep_frames, Counts, ScoredFrame};
use crate::simulator::{EpisodeLog, Observation};
use crate::skeleton::AirwayId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirwayClassStats {
    pub airway_id: AirwayId,
    pub frames_visible: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Frames carrying an airway-indexed observation, as scores against truth.
pub fn scored_frames(logs: &[EpisodeLog]) -> Vec<ScoredFrame> {
    let mut out = Vec::new();
    for f in logs.iter().flat_map(|l| &l.frames) {
        if let Observation::Matrix(m) = &f.observation {
            let mut truth = vec![false; m.max_rows()];
            for id in &f.truth.visible {
                if let Some(t) = truth.get_mut(id.index()) {
                    *t = true;
                }
            }
            out.push(ScoredFrame {
                scores: m.rows().iter().map(|r| r.p_is_vis).collect(),
                truth,
            });
        }
    }
    out
}

/// Per-airway counts of `p_isVis >= threshold`. Airways never visible and
/// never predicted are left out.
pub fn per_airway_f1(logs: &[EpisodeLog], threshold: f64) -> Result<Vec<AirwayClassStats>> {
    let frames = scored_frames(logs);
    if frames.is_empty() {
        return Err(Error::Empty("no labeled observation frames"));
    }
    Ok(sweep_frames(&frames, &[threshold])?
        .into_iter()
        .filter_map(|s| {
            let c = s.counts[0];
            (s.support > 0 || c.fp > 0).then(|| AirwayClassStats {
                airway_id: s.airway,
                frames_visible: s.support,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
            })
        })
        .collect())
}

/// Precision-recall curve on a fixed threshold grid, highest threshold
/// first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    /// Mean over airways with support.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub auc: f64,
    /// Counts pooled over all airways.
    pub micro_precision: Vec<f64>,
    pub micro_recall: Vec<f64>,
    pub micro_auc: f64,
    pub airways: usize,
}

/// `0, 0.01, ..., 1` in descending order.
pub fn threshold_grid() -> Vec<f64> {
    (0..=100).rev().map(|i| i as f64 / 100.0).collect()
}

/// Trapezoid area under a curve traversed with non-decreasing recall. The
/// curve is extended flat to recall 0.
pub fn pr_auc(precision: &[f64], recall: &[f64]) -> f64 {
    let Some(&p0) = precision.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let (mut r_prev, mut p_prev) = (0.0, p0);
    for (&p, &r) in precision.iter().zip(recall) {
        area += (r - r_prev) * (p + p_prev) / 2.0;
        (r_prev, p_prev) = (r, p);
    }
    area.clamp(0.0, 1.0)
}

pub fn averaged_pr_curve(logs: &[EpisodeLog]) -> Result<PrCurve> {
    if logs.is_empty() {
        return Err(Error::Empty("no logs"));
    }
    let frames = scored_frames(logs);
    if frames.is_empty() {
        return Err(Error::Empty("no labeled observation frames"));
    }
    let thresholds = threshold_grid();
    let sweeps = sweep_frames(&frames, &thresholds)?;
    let supported: Vec<_> = sweeps.iter().filter(|s| s.support > 0).collect();
    if supported.is_empty() {
        return Err(Error::Empty("no airway was ever visible"));
    }
    let n = supported.len() as f64;
    let mut precision = Vec::with_capacity(thresholds.len());
    let mut recall = Vec::with_capacity(thresholds.len());
    let mut micro_precision = Vec::with_capacity(thresholds.len());
    let mut micro_recall = Vec::with_capacity(thresholds.len());
    for k in 0..thresholds.len() {
        precision.push(supported.iter().map(|s| s.counts[k].precision()).sum::<f64>() / n);
        recall.push(supported.iter().map(|s| s.counts[k].recall()).sum::<f64>() / n);
        let pooled = sweeps.iter().fold(Counts::default(), |acc, s| Counts {
            tp: acc.tp + s.counts[k].tp,
            fp: acc.fp + s.counts[k].fp,
            fn_: acc.fn_ + s.counts[k].fn_,
        });
        micro_precision.push(pooled.precision());
        micro_recall.push(pooled.recall());
    }
    Ok(PrCurve {
        auc: pr_auc(&precision, &recall),
        micro_auc: pr_auc(&micro_precision, &micro_recall),
        thresholds,
        precision,
        recall,
        micro_precision,
        micro_recall,
        airways: supported.len(),
    })
}

/// `threshold,precision,recall,micro_precision,micro_recall` rows.
pub fn pr_curve_csv(curve: &PrCurve) -> String {
    let mut out = String::from("threshold,precision,recall,micro_precision,micro_recall\n");
    for k in 0..curve.thresholds.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            curve.thresholds[k], curve.precision[k], curve.recall[k], curve.micro_precision[k], curve.micro_recall[k]
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingFrame {
    pub episode: usize,
    pub t: f64,
    pub parent: AirwayId,
    pub errors: PoseErrors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    /// With Bessel's correction; 0 for a single value.
    pub sample_std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let ss = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let m = s.len() / 2;
        let median = if s.len() % 2 == 1 { s[m] } else { (s[m - 1] + s[m]) / 2.0 };
        Some(Self {
            mean,
            median,
            std: (ss / n).sqrt(),
            sample_std: if xs.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub e_p: Summary,
    pub e_d: Summary,
    pub e_r: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    /// Frames with a visible bifurcation.
    pub bifurcation_frames: usize,
    /// Of those, frames localized with the right parent airway.
    pub frames: Vec<TrackingFrame>,
    pub summary: Option<ErrorSummary>,
}

impl TrackingReport {
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn e_p(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.errors.e_p).collect()
    }

    pub fn e_d(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.errors.e_d).collect()
    }

    pub fn e_r(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.errors.e_r).collect()
    }
}

/// Pose errors on frames whose estimate names the true nearest bifurcation
/// as its parent airway.
pub fn tracking_report(logs: &[EpisodeLog]) -> TrackingReport {
    let mut bifurcation_frames = 0;
    let mut frames = Vec::new();
    for (episode, log) in logs.iter().enumerate() {
        for f in &log.frames {
            let Some(truth) = f.truth.bifurcation else { continue };
            bifurcation_frames += 1;
            let Some(est) = f.estimate.as_ref().filter(|e| e.parent == truth) else { continue };
            if let Ok(errors) = pose_errors(&f.state.pose, &est.pose) {
                frames.push(TrackingFrame {
                    episode,
                    t: f.t,
                    parent: est.parent,
                    errors,
                });
            }
        }
    }
    let mut report = TrackingReport {
        bifurcation_frames,
        frames,
        summary: None,
    };
    if let (Some(e_p), Some(e_d), Some(e_r)) = (Summary::of(&report.e_p()), Summary::of(&report.e_d()), Summary::of(&report.e_r())) {
        report.summary = Some(ErrorSummary { e_p, e_d, e_r });
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: [usize; 20],
}

impl Histogram {
    /// 20 equal bins over `[0, max]`.
    pub fn of(xs: &[f64]) -> Self {
        let hi = xs.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut counts = [0; 20];
        for &x in xs {
            counts[((x / hi * 20.0) as usize).min(19)] += 1;
        }
        Self { lo: 0.0, hi, counts }
    }
}

/// `metric,bin_lo,bin_hi,count` rows for e_p, e_d and e_r.
pub fn error_histogram_csv(report: &TrackingReport) -> String {
    let mut out = String::from("metric,bin_lo,bin_hi,count\n");
    for (name, xs) in [("e_p", report.e_p()), ("e_d", report.e_d()), ("e_r", report.e_r())] {
        let h = Histogram::of(&xs);
        let w = (h.hi - h.lo) / 20.0;
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{name},{},{},{c}", h.lo + w * i as f64, h.lo + w * (i + 1) as f64);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingSummary {
    pub trials: usize,
    pub successes: usize,
    /// Over successful trials.
    pub completion: Option<Summary>,
    pub recoveries: usize,
    pub collisions: usize,
}

pub fn driving_summary(logs: &[EpisodeLog]) -> Result<DrivingSummary> {
    if logs.is_empty() {
        return Err(Error::Empty("no driving logs"));
    }
    let times: Vec<f64> = logs
        .iter()
        .filter(|l| l.outcome.success)
        .filter_map(|l| l.outcome.completion_time)
        .collect();
    Ok(DrivingSummary {
        trials: logs.len(),
        successes: logs.iter().filter(|l| l.outcome.success).count(),
        completion: Summary::of(&times),
        recoveries: logs.iter().map(|l| l.outcome.recoveries).sum(),
        collisions: logs.iter().map(|l| l.outcome.collisions).sum(),
    })
}

/// Everything `eval` reports for a directory of logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub f1: Vec<AirwayClassStats>,
    pub pr: Option<PrCurve>,
    pub tracking: TrackingReport,
    pub driving: Option<DrivingSummary>,
}

pub fn evaluate(logs: &[EpisodeLog], threshold: f64) -> Result<EvalReport> {
    if logs.is_empty() {
        return Err(Error::Empty("no logs"));
    }
    let driving: Vec<EpisodeLog> = logs
        .iter()
        .filter(|l| l.header.episode == crate::simulator::EpisodeKind::Driving)
        .cloned()
        .collect();
    Ok(EvalReport {
        episodes: logs.len(),
        f1: per_airway_f1(logs, threshold).unwrap_or_default(),
        pr: averaged_pr_curve(logs).ok(),
        tracking: tracking_report(logs),
        driving: driving_summary(&driving).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, VisibilityConfig};
    use crate::localization::{Estimate, LocalizerKind};
    use crate::perception::{NoiseConfig, ObservationMatrix, ObservationRow};
    use crate::simulator::{EpisodeHeader, EpisodeKind, Frame, FrameTruth, Outcome, ScopeState};

    fn header() -> EpisodeHeader {
        EpisodeHeader {
            episode: EpisodeKind::Tracking,
            tree_hash: String::new(),
            vis: VisibilityConfig::default(),
            noise: NoiseConfig::zero(),
            localizer: LocalizerKind::AirwayNet,
            sim: None,
            controller: None,
            targets: vec![],
        }
    }

    fn outcome(success: bool, time: Option<f64>) -> Outcome {
        Outcome {
            success,
            completion_time: time,
            recoveries: 0,
            collisions: 0,
            targets_reached: 0,
        }
    }

    fn frame(t: f64, scores: &[f64], visible: &[usize]) -> Frame {
        let rows = scores
            .iter()
            .map(|&p| ObservationRow {
                p_is_vis: p,
                ..Default::default()
            })
            .collect();
        Frame {
            t,
            state: ScopeState::new(Pose::identity(), 0.0, 0.0),
            truth: FrameTruth {
                visible: visible.iter().map(|&i| AirwayId(i)).collect(),
                bifurcation: None,
            },
            observation: Observation::Matrix(ObservationMatrix::from_rows(rows).unwrap()),
            estimate: None,
            command: None,
            mode: None,
        }
    }

    fn log(frames: Vec<Frame>) -> EpisodeLog {
        EpisodeLog {
            header: header(),
            frames,
            outcome: outcome(true, None),
        }
    }

    /// Airway 0 visible in frames 0-2; predicted in 0, 1 and 3.
    fn four_frames() -> EpisodeLog {
        log(vec![
            frame(0.0, &[0.9, 0.0], &[0]),
            frame(0.02, &[0.8, 0.0], &[0]),
            frame(0.04, &[0.2, 0.0], &[0]),
            frame(0.06, &[0.7, 0.0], &[]),
        ])
    }

    #[test]
    fn hand_counted_f1() {
        let stats = per_airway_f1(&[four_frames()], 0.5).unwrap();
        assert_eq!(stats.len(), 1, "airway 1 has no support and no predictions");
        let s = &stats[0];
        assert_eq!((s.tp, s.fp, s.fn_, s.frames_visible), (2, 1, 1, 3));
        assert_eq!(s.precision, 2.0 / 3.0);
        assert_eq!(s.recall, 2.0 / 3.0);
        assert_eq!(s.f1, 2.0 / 3.0);
    }

    #[test]
    fn empty_log_is_an_error() {
        assert!(per_airway_f1(&[log(vec![])], 0.5).is_err());
        assert!(averaged_pr_curve(&[]).is_err());
        assert!(driving_summary(&[]).is_err());
    }

    #[test]
    fn single_perfect_frame() {
        let c = averaged_pr_curve(&[log(vec![frame(0.0, &[1.0], &[0])])]).unwrap();
        assert!(c.precision.iter().all(|&p| p == 1.0));
        assert!(c.recall.iter().all(|&r| r == 1.0));
        assert_eq!(c.auc, 1.0);
    }

    #[test]
    fn recall_grows_as_threshold_drops() {
        let c = averaged_pr_curve(&[four_frames()]).unwrap();
        assert!(c.recall.windows(2).all(|w| w[1] >= w[0]));
        assert!(c.thresholds.windows(2).all(|w| w[1] < w[0]));
        assert!((0.0..=1.0).contains(&c.auc));
    }

    #[test]
    fn no_support_is_an_error() {
        assert!(averaged_pr_curve(&[log(vec![frame(0.0, &[0.7], &[])])]).is_err());
    }

    #[test]
    fn auc_hand_values() {
        assert_eq!(pr_auc(&[1.0, 1.0], &[0.5, 1.0]), 1.0);
        assert_eq!(pr_auc(&[1.0, 0.5], &[0.5, 1.0]), 0.5 + 0.5 * 0.75);
        assert_eq!(pr_auc(&[], &[]), 0.0);
    }

    #[test]
    fn completion_time_statistics() {
        let logs: Vec<EpisodeLog> = [70.0, 80.0, 90.0]
            .iter()
            .map(|&t| EpisodeLog {
                outcome: outcome(true, Some(t)),
                ..log(vec![])
            })
            .chain(std::iter::once(EpisodeLog {
                outcome: outcome(false, None),
                ..log(vec![])
            }))
            .collect();
        let s = driving_summary(&logs).unwrap();
        assert_eq!((s.successes, s.trials), (3, 4));
        let c = s.completion.unwrap();
        assert_eq!(c.mean, 80.0);
        assert_eq!(c.std, (200.0f64 / 3.0).sqrt());
        assert_eq!(c.sample_std, 10.0);
        let exact = driving_summary(&logs[..1]).unwrap().completion.unwrap();
        assert_eq!((exact.mean, exact.std, exact.sample_std), (70.0, 0.0, 0.0));
    }

    #[test]
    fn tracking_selects_correct_labels() {
        let mut frames = vec![frame(0.0, &[1.0], &[0]), frame(0.02, &[1.0], &[0]), frame(0.04, &[1.0], &[0])];
        for f in &mut frames {
            f.truth.bifurcation = Some(AirwayId(0));
        }
        let est = |parent| Estimate {
            pose: Pose::identity().with_position(nalgebra::Point3::new(0.0, 0.0, 2.0)),
            parent: AirwayId(parent),
            children: vec![],
        };
        frames[0].estimate = Some(est(0));
        frames[1].estimate = Some(est(3));
        let r = tracking_report(&[log(frames)]);
        assert_eq!(r.bifurcation_frames, 3);
        assert_eq!(r.frames.len(), 1);
        assert_eq!(r.summary.unwrap().e_p.mean, 2.0);
        assert!(tracking_report(&[four_frames()]).is_empty());
    }

    #[test]
    fn summary_median() {
        assert_eq!(Summary::of(&[3.0, 1.0, 2.0]).unwrap().median, 2.0);
        assert_eq!(Summary::of(&[4.0, 1.0, 2.0, 3.0]).unwrap().median, 2.5);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn csv_shapes() {
        let c = averaged_pr_curve(&[four_frames()]).unwrap();
        assert_eq!(pr_curve_csv(&c).lines().count(), 102);
        let r = tracking_report(&[four_frames()]);
        assert_eq!(error_histogram_csv(&r).lines().count(), 61);
    }
}
