//! Frame-to-frame odometry: chains grid registrations into an absolute
//! trajectory, with per-frame diagnostics and KITTI/TUM trajectory files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::heightgrid::{build_height_grid, GridBuildOptions, GridConfig, HeightGrid};
use crate::lie::{compose, Pose};
use crate::pointcloud::Scan;
use crate::registration::{pitch_compensate, register, PitchCompensationConfig, SolverConfig};

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("odometry needs at least two scans, got {0}")]
    TooFewScans(usize),
    #[error("frame indices must be strictly increasing (frame {0} follows {1})")]
    UnorderedFrames(usize, usize),
}

#[derive(Debug, Error)]
pub enum TrajectoryIoError {
    #[error("trajectory io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: cannot parse trajectory row")]
    Parse { path: String, line: usize },
    #[error("{path}:{line}: rotation block is not orthonormal")]
    BadRotation { path: String, line: usize },
}

/// Time-ordered absolute poses; the first pose is the identity and frame
/// indices increase strictly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<(usize, Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn from_poses(poses: impl IntoIterator<Item = Pose>) -> Self {
        Self { entries: poses.into_iter().enumerate().collect() }
    }

    pub fn push(&mut self, frame_index: usize, pose: Pose) {
        if let Some((last, _)) = self.entries.last() {
            assert!(frame_index > *last, "frame indices must increase");
        }
        self.entries.push((frame_index, pose));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, Pose)] {
        &self.entries
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> {
        self.entries.iter().map(|(_, p)| p)
    }

    /// Translation distance between the first and last pose.
    pub fn endpoint_gap(&self) -> f64 {
        match (self.entries.first(), self.entries.last()) {
            (Some((_, a)), Some((_, b))) => (a.translation() - b.translation()).norm(),
            _ => 0.0,
        }
    }

    /// Cumulative path length over translations.
    pub fn path_length(&self) -> f64 {
        self.entries
            .windows(2)
            .map(|w| (w[1].1.translation() - w[0].1.translation()).norm())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionPrior {
    Identity,
    /// Initialize each registration with the previous relative pose.
    ConstantVelocity,
}

impl MotionPrior {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::Identity),
            "constant-velocity" => Some(Self::ConstantVelocity),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::ConstantVelocity => "constant-velocity",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OdometryConfig {
    pub solver: SolverConfig,
    pub grid: GridConfig,
    pub build: GridBuildOptions,
    pub motion_prior: MotionPrior,
    pub pitch_compensation: bool,
    pub pitch: PitchCompensationConfig,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            grid: GridConfig::default(),
            build: GridBuildOptions::default(),
            motion_prior: MotionPrior::ConstantVelocity,
            pitch_compensation: true,
            pitch: PitchCompensationConfig::default(),
        }
    }
}

/// Per-frame diagnostics of an odometry run.
#[derive(Debug, Clone, Copy)]
pub struct FrameDiagnostics {
    pub frame_index: usize,
    /// Grid build plus registration wall time, seconds.
    pub runtime_seconds: f64,
    pub residual_count: usize,
    pub iterations: usize,
    pub converged: bool,
    /// True when registration failed or did not converge and the motion
    /// prior was used for this step instead.
    pub used_prior_fallback: bool,
    /// Roll/pitch leveling applied to the scan, radians.
    pub pitch_correction: (f64, f64),
    pub ground_plane_found: bool,
    /// Registration failure description, if any.
    pub failure: Option<&'static str>,
}

#[derive(Debug, Clone)]
pub struct OdometryRun {
    pub trajectory: Trajectory,
    pub diagnostics: Vec<FrameDiagnostics>,
}

fn prepare_grid(scan: &Scan, cfg: &OdometryConfig) -> (HeightGrid, (f64, f64), bool) {
    if cfg.pitch_compensation {
        let leveled = pitch_compensate(scan, &cfg.pitch);
        let (grid, _) = build_height_grid(&leveled.scan, &cfg.grid, &cfg.build);
        (grid, (leveled.roll, leveled.pitch), leveled.ground_plane_found)
    } else {
        let (grid, _) = build_height_grid(scan, &cfg.grid, &cfg.build);
        (grid, (0.0, 0.0), true)
    }
}

/// Runs frame-to-frame odometry over an ordered scan sequence.
///
/// Each new frame is registered against the previous one; the estimated
/// relative pose (pose of the new frame expressed in the previous frame)
/// is chained onto the absolute pose. A frame whose registration fails or
/// does not converge falls back to the motion prior and is flagged in the
/// diagnostics rather than aborting the run.
pub fn run_odometry(
    scans: impl IntoIterator<Item = Scan>,
    cfg: &OdometryConfig,
) -> Result<OdometryRun, OdometryError> {
    let mut scans = scans.into_iter();
    let mut trajectory = Trajectory::new();
    let mut diagnostics = Vec::new();

    let Some(first) = scans.next() else {
        return Err(OdometryError::TooFewScans(0));
    };
    let start = Instant::now();
    let (mut prev_grid, pitch0, ground0) = prepare_grid(&first, cfg);
    trajectory.push(first.frame_index, Pose::identity());
    diagnostics.push(FrameDiagnostics {
        frame_index: first.frame_index,
        runtime_seconds: start.elapsed().as_secs_f64(),
        residual_count: 0,
        iterations: 0,
        converged: true,
        used_prior_fallback: false,
        pitch_correction: pitch0,
        ground_plane_found: ground0,
        failure: None,
    });

    let mut absolute = Pose::identity();
    let mut previous_relative = Pose::identity();
    let mut last_frame = first.frame_index;
    let mut count = 1usize;

    for scan in scans {
        if scan.frame_index <= last_frame {
            return Err(OdometryError::UnorderedFrames(scan.frame_index, last_frame));
        }
        let start = Instant::now();
        let (grid, pitch_correction, ground_plane_found) = prepare_grid(&scan, cfg);
        let init = match cfg.motion_prior {
            MotionPrior::Identity => Pose::identity(),
            MotionPrior::ConstantVelocity => previous_relative,
        };
        // Select on the current frame, sample into the previous one: the
        // result is the pose of the current frame in the previous frame.
        let outcome = register(&grid, &prev_grid, &init, &cfg.solver);
        let (relative, residual_count, iterations, converged, fallback, failure) = match outcome {
            Ok(r) if r.converged => {
                (r.relative_pose, r.residual_count, r.iterations, true, false, None)
            }
            Ok(r) => (init, r.residual_count, r.iterations, false, true, Some("not converged")),
            Err(e) => {
                let reason = match e {
                    crate::registration::RegistrationError::InsufficientResiduals { .. } => {
                        "insufficient residuals"
                    }
                    crate::registration::RegistrationError::SingularNormalMatrix { .. } => {
                        "singular normal matrix"
                    }
                    crate::registration::RegistrationError::GridMismatch => "grid mismatch",
                };
                (init, 0, 0, false, true, Some(reason))
            }
        };

        absolute = compose(&absolute, &relative);
        trajectory.push(scan.frame_index, absolute);
        diagnostics.push(FrameDiagnostics {
            frame_index: scan.frame_index,
            runtime_seconds: start.elapsed().as_secs_f64(),
            residual_count,
            iterations,
            converged,
            used_prior_fallback: fallback,
            pitch_correction,
            ground_plane_found,
            failure,
        });

        previous_relative = relative;
        prev_grid = grid;
        last_frame = scan.frame_index;
        count += 1;
    }

    if count < 2 {
        return Err(OdometryError::TooFewScans(count));
    }
    Ok(OdometryRun { trajectory, diagnostics })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    /// 12 space-separated values per line: row-major 3x4 [R|t].
    Kitti,
    /// "timestamp x y z qx qy qz qw" per line.
    Tum,
}

impl TrajectoryFormat {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "kitti" => Some(Self::Kitti),
            "tum" => Some(Self::Tum),
            _ => None,
        }
    }
}

/// Writes a trajectory. Values use the shortest round-trip decimal form,
/// so read-back is exact.
pub fn write_trajectory(
    trajectory: &Trajectory,
    path: &Path,
    format: TrajectoryFormat,
) -> Result<(), TrajectoryIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (frame, pose) in trajectory.entries() {
        let r = pose.rotation();
        let t = pose.translation();
        match format {
            TrajectoryFormat::Kitti => {
                writeln!(
                    w,
                    "{} {} {} {} {} {} {} {} {} {} {} {}",
                    r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
                    r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
                    r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
                )?;
            }
            TrajectoryFormat::Tum => {
                let q =
                    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
                writeln!(
                    w,
                    "{} {} {} {} {} {} {} {}",
                    *frame as f64, t.x, t.y, t.z, q.i, q.j, q.k, q.w,
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a trajectory written by [`write_trajectory`] (or a KITTI
/// ground-truth pose file). Frame indices are assigned by line order for
/// the KITTI format and from the timestamp for TUM.
pub fn read_trajectory(
    path: &Path,
    format: TrajectoryFormat,
) -> Result<Trajectory, TrajectoryIoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let parse_err = || TrajectoryIoError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
        };
        let bad_rotation = || TrajectoryIoError::BadRotation {
            path: path.display().to_string(),
            line: lineno + 1,
        };
        let values: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| parse_err())?;
        match format {
            TrajectoryFormat::Kitti => {
                if values.len() != 12 {
                    return Err(parse_err());
                }
                let rotation = Matrix3::new(
                    values[0], values[1], values[2],
                    values[4], values[5], values[6],
                    values[8], values[9], values[10],
                );
                let translation = Vector3::new(values[3], values[7], values[11]);
                let pose = Pose::new(rotation, translation).map_err(|_| bad_rotation())?;
                entries.push((entries.len(), pose));
            }
            TrajectoryFormat::Tum => {
                if values.len() != 8 {
                    return Err(parse_err());
                }
                let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    values[7], values[4], values[5], values[6],
                ));
                let pose = Pose::new(
                    *q.to_rotation_matrix().matrix(),
                    Vector3::new(values[1], values[2], values[3]),
                )
                .map_err(|_| bad_rotation())?;
                entries.push((values[0] as usize, pose));
            }
        }
    }
    Ok(Trajectory { entries })
}
