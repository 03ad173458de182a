//! Trajectory evaluation: per-frame absolute position error, translation
//! error percentage over traveled distance and aggregate reports.
//!
//! Both trajectories are compared directly (no alignment step): estimate
//! and reference start at the identity by construction, and aligning would
//! mask early drift.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::odometry::{FrameDiagnostics, Trajectory};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory lengths differ: estimate {estimate}, reference {reference}")]
    LengthMismatch { estimate: usize, reference: usize },
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Estimated and reference trajectories associated frame-by-frame.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    estimate: Trajectory,
    reference: Trajectory,
}

impl AlignedPair {
    /// Associates by position; both trajectories must have equal length.
    pub fn new(estimate: Trajectory, reference: Trajectory) -> Result<Self, EvalError> {
        if estimate.len() != reference.len() {
            return Err(EvalError::LengthMismatch {
                estimate: estimate.len(),
                reference: reference.len(),
            });
        }
        Ok(Self { estimate, reference })
    }

    pub fn len(&self) -> usize {
        self.estimate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimate.is_empty()
    }

    pub fn estimate(&self) -> &Trajectory {
        &self.estimate
    }

    pub fn reference(&self) -> &Trajectory {
        &self.reference
    }
}

/// Euclidean distance between estimated and reference positions per frame.
pub fn absolute_position_error(pair: &AlignedPair) -> Vec<f64> {
    pair.estimate
        .poses()
        .zip(pair.reference.poses())
        .map(|(e, r)| (e.translation() - r.translation()).norm())
        .collect()
}

/// Position error as a percentage of the reference path length traveled so
/// far, reported once at least `min_length` meters have been covered.
/// Returns (frame position in the pair, percentage).
pub fn translation_error_percentage(pair: &AlignedPair, min_length: f64) -> Vec<(usize, f64)> {
    let ape = absolute_position_error(pair);
    let mut out = Vec::new();
    let mut traveled = 0.0;
    let mut previous: Option<&crate::lie::Pose> = None;
    for (k, pose) in pair.reference.poses().enumerate() {
        if let Some(prev) = previous {
            traveled += (pose.translation() - prev.translation()).norm();
        }
        previous = Some(pose);
        if traveled >= min_length {
            out.push((k, 100.0 * ape[k] / traveled));
        }
    }
    out
}

/// Aggregate runtime statistics extracted from odometry diagnostics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RuntimeStats {
    pub mean_seconds: f64,
    pub max_seconds: f64,
    pub frames: usize,
    pub fallback_frames: usize,
}

/// Machine-readable evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub frames: usize,
    pub max_ape: f64,
    pub mean_ape: f64,
    pub final_ape: f64,
    /// Distance between the first and last estimated positions.
    pub endpoint_gap: f64,
    pub reference_path_length: f64,
    /// Present when diagnostics were supplied.
    pub runtime: Option<RuntimeStats>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames:            {}", self.frames)?;
        writeln!(f, "max APE:           {:.4} m", self.max_ape)?;
        writeln!(f, "mean APE:          {:.4} m", self.mean_ape)?;
        writeln!(f, "final APE:         {:.4} m", self.final_ape)?;
        writeln!(f, "endpoint gap:      {:.4} m", self.endpoint_gap)?;
        writeln!(f, "reference length:  {:.2} m", self.reference_path_length)?;
        if let Some(rt) = &self.runtime {
            writeln!(
                f,
                "runtime/frame:     {:.4} s mean, {:.4} s max over {} frames",
                rt.mean_seconds, rt.max_seconds, rt.frames
            )?;
            writeln!(f, "fallback frames:   {}", rt.fallback_frames)?;
        }
        Ok(())
    }
}

/// Deterministic aggregation of the pair (and optional diagnostics) into a
/// report.
pub fn summarize(pair: &AlignedPair, diagnostics: Option<&[FrameDiagnostics]>) -> Report {
    let ape = absolute_position_error(pair);
    let frames = ape.len();
    let (max_ape, sum) = ape.iter().fold((0.0f64, 0.0f64), |(m, s), e| (m.max(*e), s + e));
    let runtime = diagnostics.map(|d| {
        let times: Vec<f64> = d.iter().map(|f| f.runtime_seconds).collect();
        RuntimeStats {
            mean_seconds: if times.is_empty() {
                0.0
            } else {
                times.iter().sum::<f64>() / times.len() as f64
            },
            max_seconds: times.iter().fold(0.0f64, |m, t| m.max(*t)),
            frames: d.len(),
            fallback_frames: d.iter().filter(|f| f.used_prior_fallback).count(),
        }
    });
    Report {
        frames,
        max_ape,
        mean_ape: if frames > 0 { sum / frames as f64 } else { 0.0 },
        final_ape: ape.last().copied().unwrap_or(0.0),
        endpoint_gap: pair.estimate.endpoint_gap(),
        reference_path_length: pair.reference.path_length(),
        runtime,
    }
}

/// Writes the report as JSON.
pub fn write_report_json(report: &Report, path: &Path) -> Result<(), EvalError> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, report)?;
    Ok(())
}

/// Writes the per-frame APE curve as `frame,ape_m` CSV.
pub fn write_ape_csv(pair: &AlignedPair, path: &Path) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "frame,ape_m")?;
    for (k, e) in absolute_position_error(pair).iter().enumerate() {
        writeln!(w, "{k},{e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the translation error percentage curve as
/// `frame,traveled_percent` CSV, starting at `min_length` meters.
pub fn write_tep_csv(pair: &AlignedPair, min_length: f64, path: &Path) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "frame,error_percent")?;
    for (k, pct) in translation_error_percentage(pair, min_length) {
        writeln!(w, "{k},{pct}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{compose, exp_map, planar_embed, PlanarPose, Pose, Twist};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize, step: f64) -> Trajectory {
        Trajectory::from_poses(
            (0..n).map(|k| planar_embed(&PlanarPose::new(step * k as f64, 0.0, 0.0))),
        )
    }

    fn offset_by(t: &Trajectory, dx: f64, dy: f64, dz: f64) -> Trajectory {
        Trajectory::from_poses(t.poses().map(|p| {
            Pose::new(*p.rotation(), p.translation() + Vector3::new(dx, dy, dz)).unwrap()
        }))
    }

    #[test]
    fn identical_trajectories_zero_everywhere() {
        let t = line(20, 1.0);
        let pair = AlignedPair::new(t.clone(), t).unwrap();
        assert!(absolute_position_error(&pair).iter().all(|e| *e == 0.0));
        assert!(translation_error_percentage(&pair, 5.0).iter().all(|(_, p)| *p == 0.0));
        let report = summarize(&pair, None);
        assert_eq!(report.max_ape, 0.0);
        assert_eq!(report.mean_ape, 0.0);
        assert_eq!(report.final_ape, 0.0);
    }

    #[test]
    fn constant_offset_three_four_five() {
        let reference = line(10, 1.0);
        let estimate = offset_by(&reference, 3.0, 4.0, 0.0);
        let pair = AlignedPair::new(estimate, reference).unwrap();
        for e in absolute_position_error(&pair) {
            assert_abs_diff_eq!(e, 5.0, epsilon = 1e-12);
        }
        let report = summarize(&pair, None);
        assert_abs_diff_eq!(report.max_ape, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_ape, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.final_ape, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn single_frame_perturbation_shows_at_that_frame() {
        let reference = line(10, 1.0);
        let mut poses: Vec<Pose> = reference.poses().copied().collect();
        poses[4] = Pose::new(
            *poses[4].rotation(),
            poses[4].translation() + Vector3::new(0.3, -0.4, 0.0),
        )
        .unwrap();
        let pair = AlignedPair::new(Trajectory::from_poses(poses), reference).unwrap();
        let ape = absolute_position_error(&pair);
        assert_abs_diff_eq!(ape[4], 0.5, epsilon = 1e-12);
        assert!(ape.iter().enumerate().all(|(k, e)| k == 4 || *e == 0.0));
    }

    #[test]
    fn one_meter_error_at_hundred_meters_is_one_percent() {
        let reference = line(101, 1.0); // 100 m traveled at the last frame
        let estimate = offset_by(&reference, 1.0, 0.0, 0.0);
        let pair = AlignedPair::new(estimate, reference).unwrap();
        let tep = translation_error_percentage(&pair, 50.0);
        let (frame, pct) = *tep.last().unwrap();
        assert_eq!(frame, 100);
        assert_abs_diff_eq!(pct, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn proportional_drift_gives_flat_percentage() {
        let rate = 0.005; // 0.5% of distance traveled
        let step = 1.0;
        let n = 200;
        let reference = line(n, step);
        let estimate = Trajectory::from_poses((0..n).map(|k| {
            let x = step * k as f64;
            planar_embed(&PlanarPose::new(x, rate * x, 0.0))
        }));
        let pair = AlignedPair::new(estimate, reference).unwrap();
        let tep = translation_error_percentage(&pair, 50.0);
        assert!(!tep.is_empty());
        for (_, pct) in tep {
            assert_abs_diff_eq!(pct, 100.0 * rate, epsilon = 1e-6);
        }
    }

    #[test]
    fn nothing_reported_before_min_length() {
        let reference = line(40, 1.0);
        let estimate = offset_by(&reference, 0.5, 0.0, 0.0);
        let pair = AlignedPair::new(estimate, reference).unwrap();
        let tep = translation_error_percentage(&pair, 50.0);
        assert!(tep.is_empty()); // only 39 m traveled
        let tep = translation_error_percentage(&pair, 20.0);
        assert_eq!(tep.first().unwrap().0, 20); // 20 m reached at frame 20
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = line(5, 1.0);
        let b = line(6, 1.0);
        assert!(matches!(
            AlignedPair::new(a, b),
            Err(EvalError::LengthMismatch { estimate: 5, reference: 6 })
        ));
    }

    #[test]
    fn metrics_invariant_under_common_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut est_poses = vec![Pose::identity()];
        let mut ref_poses = vec![Pose::identity()];
        let mut e = Pose::identity();
        let mut r = Pose::identity();
        for _ in 0..30 {
            let motion = exp_map(&Twist::new(
                Vector3::new(rng.random_range(0.2..0.8), rng.random_range(-0.2..0.2), 0.0),
                Vector3::new(0.0, 0.0, rng.random_range(-0.1..0.1)),
            ));
            let noise = exp_map(&Twist::new(
                Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.0),
                Vector3::new(0.0, 0.0, rng.random_range(-0.01..0.01)),
            ));
            r = compose(&r, &motion);
            e = compose(&e, &compose(&motion, &noise));
            ref_poses.push(r);
            est_poses.push(e);
        }
        let pair = AlignedPair::new(
            Trajectory::from_poses(est_poses.clone()),
            Trajectory::from_poses(ref_poses.clone()),
        )
        .unwrap();
        let base_ape = absolute_position_error(&pair);
        let base_tep = translation_error_percentage(&pair, 5.0);

        let g = exp_map(&Twist::new(Vector3::new(10.0, -4.0, 2.0), Vector3::new(0.0, 0.0, 1.0)));
        let moved = AlignedPair::new(
            Trajectory::from_poses(est_poses.iter().map(|p| compose(&g, p))),
            Trajectory::from_poses(ref_poses.iter().map(|p| compose(&g, p))),
        )
        .unwrap();
        let moved_ape = absolute_position_error(&moved);
        for (a, b) in base_ape.iter().zip(&moved_ape) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        let moved_tep = translation_error_percentage(&moved, 5.0);
        for ((ka, a), (kb, b)) in base_tep.iter().zip(&moved_tep) {
            assert_eq!(ka, kb);
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let reference = line(30, 1.0);
        let estimate = offset_by(&reference, 0.1, 0.0, 0.0);
        let pair = AlignedPair::new(estimate, reference).unwrap();
        let report = summarize(&pair, None);
        let path = dir.path().join("report.json");
        write_report_json(&report, &path).unwrap();
        let back: Report =
            serde_json::from_reader(File::open(&path).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_outputs_have_expected_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let reference = line(60, 1.0);
        let estimate = offset_by(&reference, 0.2, 0.0, 0.0);
        let pair = AlignedPair::new(estimate, reference).unwrap();
        let ape_path = dir.path().join("ape.csv");
        write_ape_csv(&pair, &ape_path).unwrap();
        let content = std::fs::read_to_string(&ape_path).unwrap();
        assert_eq!(content.lines().count(), 61); // header + 60 frames
        assert!(content.starts_with("frame,ape_m"));

        let tep_path = dir.path().join("tep.csv");
        write_tep_csv(&pair, 50.0, &tep_path).unwrap();
        let content = std::fs::read_to_string(&tep_path).unwrap();
        // traveled 50 m at frame 50 => frames 50..59 reported
        assert_eq!(content.lines().count(), 1 + 10);
    }

    #[test]
    fn endpoint_gap_reports_loop_closure_drift() {
        let poses = vec![
            planar_embed(&PlanarPose::new(0.0, 0.0, 0.0)),
            planar_embed(&PlanarPose::new(10.0, 0.0, 0.0)),
            planar_embed(&PlanarPose::new(0.3, -0.4, 0.0)),
        ];
        let t = Trajectory::from_poses(poses);
        let pair = AlignedPair::new(t.clone(), t).unwrap();
        let report = summarize(&pair, None);
        assert_abs_diff_eq!(report.endpoint_gap, 0.5, epsilon = 1e-12);
    }
}
