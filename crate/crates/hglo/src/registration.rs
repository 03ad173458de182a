//! Relative pose estimation between two height grids.
//!
//! Gradient-bearing cells of the source grid are back-projected to 3D
//! (cell-center x, y with the cell mean as z), transformed by the current
//! pose estimate, and compared against the bilinearly interpolated target
//! grid. Gauss-Newton on the stacked height residuals, with Huber
//! weighting and step halving, runs coarse-to-fine over a grid pyramid.
//!
//! The estimated pose maps source-frame coordinates into target-frame
//! coordinates, i.e. it is the pose of the source frame expressed in the
//! target frame.

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::heightgrid::{
    bilinear_gradient, bilinear_sample, select_semi_dense_cells, GridConfig, HeightGrid,
};
use crate::lie::{compose, exp_map, planar_embed, planar_project, Pose, Twist};
use crate::pointcloud::{Point3, Scan};

/// Normal-matrix condition estimates above this signal degenerate geometry.
const MAX_CONDITION: f64 = 1e12;

/// Halvings tried before a step is declared unproductive.
const MAX_STEP_HALVINGS: usize = 8;

/// Evaluate terms in parallel only past this count; the split is by fixed
/// index either way, so results do not depend on the worker count.
const PARALLEL_THRESHOLD: usize = 4096;

/// Coarse pyramid levels are skipped below this many residuals per degree
/// of freedom; the configured minimum applies at the finest level only.
const COARSE_TERMS_PER_DOF: usize = 3;

/// Pyramid levels stop once a grid side would shrink below this.
const MIN_PYRAMID_CELLS: usize = 16;

/// Absolute cap on halvings; reached only for astronomically long steps.
const HARD_STEP_HALVINGS: usize = 64;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("only {found} usable residuals at the finest level, {required} required")]
    InsufficientResiduals { found: usize, required: usize },
    #[error("normal matrix is singular or ill-conditioned (condition estimate {condition:.3e})")]
    SingularNormalMatrix { condition: f64 },
    #[error("source and target grids must share a grid configuration")]
    GridMismatch,
}

/// The transformed point left the target grid or its interpolation support
/// is invalid; the residual term is dropped for this iteration.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("no valid interpolation support in the target grid")]
pub struct NoSupport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    /// Estimate (x, y, yaw) only; the default for ground vehicles.
    Planar3Dof,
    /// Full rigid transform.
    Full6Dof,
}

impl SolverMode {
    pub fn dof(&self) -> usize {
        match self {
            Self::Planar3Dof => 3,
            Self::Full6Dof => 6,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "planar-3dof" | "planar" => Some(Self::Planar3Dof),
            "full-6dof" | "full" => Some(Self::Full6Dof),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Planar3Dof => "planar-3dof",
            Self::Full6Dof => "full-6dof",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Twist increment norm below which an iteration counts as converged.
    pub update_norm_tolerance: f64,
    /// Relative robust-cost decrease below which iteration stops.
    pub cost_decrease_tolerance: f64,
    /// Semi-dense selection threshold, meters of height change per cell.
    pub gradient_threshold: f64,
    /// Minimum usable residuals at the finest pyramid level.
    pub min_residuals: usize,
    pub mode: SolverMode,
    /// Huber kernel width in meters of height difference.
    pub huber_delta: f64,
    /// Coarse-to-fine levels, each doubling the cell size.
    pub pyramid_levels: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            update_norm_tolerance: 1e-6,
            cost_decrease_tolerance: 1e-9,
            gradient_threshold: 0.05,
            min_residuals: 100,
            mode: SolverMode::Planar3Dof,
            huber_delta: 0.1,
            pyramid_levels: 3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> bool {
        self.max_iterations > 0
            && self.update_norm_tolerance > 0.0
            && self.cost_decrease_tolerance > 0.0
            && self.gradient_threshold > 0.0
            && self.min_residuals > 0
            && self.huber_delta > 0.0
            && self.pyramid_levels >= 1
    }
}

/// One linearized height-difference term.
#[derive(Debug, Clone, Copy)]
pub struct ResidualTerm {
    /// Back-projected source cell: center x, y with the cell mean as z.
    pub source_point: Point3,
    /// Source height minus interpolated target height, meters.
    pub residual: f64,
    /// d(residual)/d(twist), columns (dx, dy, dz, wx, wy, wz).
    pub jacobian: Vector6<f64>,
    /// Huber weight in (0, 1].
    pub weight: f64,
}

impl ResidualTerm {
    /// Columns (dx, dy, dyaw) of the full Jacobian row.
    pub fn planar_jacobian(&self) -> Vector3<f64> {
        Vector3::new(self.jacobian[0], self.jacobian[1], self.jacobian[5])
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Pose of the source frame expressed in the target frame.
    pub relative_pose: Pose,
    /// Sum of squared residuals at the final estimate, meters^2.
    pub final_cost: f64,
    /// Gauss-Newton iterations spent at the finest pyramid level.
    pub iterations: usize,
    pub residual_count: usize,
    pub converged: bool,
    /// Condition estimate of the last solved normal matrix.
    pub condition_estimate: f64,
    /// Mean robust cost after each accepted iteration at the finest level.
    pub cost_trace: Vec<f64>,
}

/// Height difference between a known source height and the target grid
/// sampled at the transformed point.
pub fn height_residual(
    reference_height: f64,
    target: &HeightGrid,
    transformed_point: &Vector3<f64>,
) -> Result<f64, NoSupport> {
    let (u, v) = target.config().world_to_grid(transformed_point.x, transformed_point.y);
    let sampled = bilinear_sample(target, u, v).map_err(|_| NoSupport)?;
    Ok(reference_height - sampled)
}

/// Chain-rule Jacobian row of the residual with respect to a left-applied
/// twist: -(target gradient scaled to per-meter) * [I | -q^].
pub fn residual_jacobian(
    target_cfg: &GridConfig,
    target_gradient: &Vector2<f64>,
    transformed_point: &Vector3<f64>,
) -> Vector6<f64> {
    let per_meter = Vector3::new(
        target_gradient.x / target_cfg.f_x,
        target_gradient.y / target_cfg.f_y,
        0.0,
    );
    let translation = -per_meter;
    let rotation = per_meter.cross(transformed_point);
    Vector6::new(
        translation.x, translation.y, translation.z, rotation.x, rotation.y, rotation.z,
    )
}

fn huber_weight(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

fn huber_cost(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[derive(Debug, Clone, Copy)]
struct SourceTerm {
    point: Vector3<f64>,
    height: f64,
}

fn back_project(source: &HeightGrid, threshold: f64) -> Vec<SourceTerm> {
    let cfg = *source.config();
    select_semi_dense_cells(source, threshold)
        .cells
        .iter()
        .map(|cell| {
            let (x, y) = cfg.cell_center(cell.index);
            let height = source.mean(cell.index);
            SourceTerm { point: Vector3::new(x, y, height), height }
        })
        .collect()
}

fn evaluate_term(
    term: &SourceTerm,
    target: &HeightGrid,
    pose: &Pose,
    huber_delta: f64,
) -> Option<ResidualTerm> {
    let q = pose.transform_point(&term.point);
    let cfg = target.config();
    let (u, v) = cfg.world_to_grid(q.x, q.y);
    let sampled = bilinear_sample(target, u, v).ok()?;
    let gradient = bilinear_gradient(target, u, v).ok()?;
    let residual = term.height - sampled;
    Some(ResidualTerm {
        source_point: Point3::new(term.point.x, term.point.y, term.point.z),
        residual,
        jacobian: residual_jacobian(cfg, &gradient, &q),
        weight: huber_weight(residual, huber_delta),
    })
}

fn evaluate_terms(
    source_terms: &[SourceTerm],
    target: &HeightGrid,
    pose: &Pose,
    huber_delta: f64,
) -> Vec<ResidualTerm> {
    if source_terms.len() >= PARALLEL_THRESHOLD {
        source_terms
            .par_iter()
            .map(|t| evaluate_term(t, target, pose, huber_delta))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    } else {
        source_terms
            .iter()
            .filter_map(|t| evaluate_term(t, target, pose, huber_delta))
            .collect()
    }
}

/// Linearizes the objective at `pose`: selects source cells, back-projects
/// them and evaluates residual, Jacobian and robust weight per term. Terms
/// without target support are dropped.
pub fn linearize(
    source: &HeightGrid,
    target: &HeightGrid,
    pose: &Pose,
    cfg: &SolverConfig,
) -> Vec<ResidualTerm> {
    let source_terms = back_project(source, cfg.gradient_threshold);
    evaluate_terms(&source_terms, target, pose, cfg.huber_delta)
}

/// Residual statistics of the objective at a fixed pose.
#[derive(Debug, Clone, Copy)]
pub struct CostEvaluation {
    /// Mean Huber cost per usable residual; iteration control monitors this.
    pub mean_robust_cost: f64,
    /// Raw sum of squared residuals, meters^2.
    pub sum_squared: f64,
    pub residual_count: usize,
}

fn cost_of(
    source_terms: &[SourceTerm],
    target: &HeightGrid,
    pose: &Pose,
    huber_delta: f64,
) -> CostEvaluation {
    let mut robust = 0.0;
    let mut squared = 0.0;
    let mut count = 0usize;
    for term in source_terms {
        let q = pose.transform_point(&term.point);
        let (u, v) = target.config().world_to_grid(q.x, q.y);
        if let Ok(sampled) = bilinear_sample(target, u, v) {
            let e = term.height - sampled;
            robust += huber_cost(e, huber_delta);
            squared += e * e;
            count += 1;
        }
    }
    CostEvaluation {
        mean_robust_cost: if count > 0 { robust / count as f64 } else { f64::INFINITY },
        sum_squared: squared,
        residual_count: count,
    }
}

/// Evaluates the registration objective at `pose` without solving; used by
/// diagnostics and by exhaustive-search cross-checks.
pub fn evaluate_cost(
    source: &HeightGrid,
    target: &HeightGrid,
    pose: &Pose,
    cfg: &SolverConfig,
) -> CostEvaluation {
    let source_terms = back_project(source, cfg.gradient_threshold);
    cost_of(&source_terms, target, pose, cfg.huber_delta)
}

fn condition_from_eigenvalues(eigenvalues: impl IntoIterator<Item = f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for e in eigenvalues {
        let a = e.abs();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    if lo <= 0.0 || !hi.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves the weighted normal equations for the twist increment and returns
/// it with the normal-matrix condition estimate. The accumulation order is
/// fixed (term order), so results are reproducible.
pub fn gauss_newton_step(
    terms: &[ResidualTerm],
    mode: SolverMode,
) -> Result<(Twist, f64), RegistrationError> {
    match mode {
        SolverMode::Full6Dof => {
            let mut h = Matrix6::<f64>::zeros();
            let mut b = Vector6::<f64>::zeros();
            for t in terms {
                let j = t.jacobian;
                h += j * j.transpose() * t.weight;
                b -= j * (t.weight * t.residual);
            }
            let condition = condition_from_eigenvalues(h.symmetric_eigenvalues().iter().copied());
            let solved = (condition <= MAX_CONDITION)
                .then(|| h.cholesky().map(|c| c.solve(&b)))
                .flatten()
                .ok_or(RegistrationError::SingularNormalMatrix { condition })?;
            Ok((Twist::from_vector(&solved), condition))
        }
        SolverMode::Planar3Dof => {
            let mut h = Matrix3::<f64>::zeros();
            let mut b = Vector3::<f64>::zeros();
            for t in terms {
                let j = t.planar_jacobian();
                h += j * j.transpose() * t.weight;
                b -= j * (t.weight * t.residual);
            }
            let condition = condition_from_eigenvalues(h.symmetric_eigenvalues().iter().copied());
            let solved = (condition <= MAX_CONDITION)
                .then(|| h.cholesky().map(|c| c.solve(&b)))
                .flatten()
                .ok_or(RegistrationError::SingularNormalMatrix { condition })?;
            Ok((Twist::planar(solved[0], solved[1], solved[2]), condition))
        }
    }
}

struct LevelOutcome {
    iterations: usize,
    residual_count: usize,
    converged: bool,
    condition: f64,
    cost_trace: Vec<f64>,
}

fn solve_level(
    source: &HeightGrid,
    target: &HeightGrid,
    pose: &mut Pose,
    cfg: &SolverConfig,
    finest: bool,
) -> Result<Option<LevelOutcome>, RegistrationError> {
    let source_terms = back_project(source, cfg.gradient_threshold);
    let required = if finest {
        cfg.min_residuals
    } else {
        COARSE_TERMS_PER_DOF * cfg.mode.dof()
    };

    let mut iterations = 0usize;
    let mut converged = false;
    let mut condition = f64::NAN;
    let mut residual_count = 0usize;
    let mut cost_trace = Vec::new();

    while iterations < cfg.max_iterations {
        let terms = evaluate_terms(&source_terms, target, pose, cfg.huber_delta);
        residual_count = terms.len();
        if terms.len() < required {
            if finest {
                return Err(RegistrationError::InsufficientResiduals {
                    found: terms.len(),
                    required,
                });
            }
            return Ok(None); // too little structure at this level; skip it
        }
        let current_cost = terms
            .iter()
            .map(|t| huber_cost(t.residual, cfg.huber_delta))
            .sum::<f64>()
            / terms.len() as f64;

        let (delta, cond) = match gauss_newton_step(&terms, cfg.mode) {
            Ok(v) => v,
            Err(e) if finest => return Err(e),
            Err(_) => return Ok(None),
        };
        condition = cond;
        iterations += 1;

        // Step halving: keep the Gauss-Newton direction, shrink until the
        // robust cost stops increasing. Accepted steps never increase it.
        // Past the nominal halving budget, keep shrinking until the step
        // drops below the update tolerance: a rejection at that scale means
        // the pose already sits within tolerance of the minimum along this
        // direction (at bilinear kinks the one-sided slopes do not vanish).
        let mut scale = 1.0;
        let mut halvings = 0usize;
        let mut accepted = None;
        loop {
            let candidate = compose(&exp_map(&delta.scaled(scale)), pose);
            let cost = cost_of(&source_terms, target, &candidate, cfg.huber_delta);
            if cost.residual_count > 0 && cost.mean_robust_cost <= current_cost {
                accepted = Some((candidate, cost.mean_robust_cost, scale));
                break;
            }
            let step_norm = delta.scaled(scale).norm();
            if (halvings >= MAX_STEP_HALVINGS && step_norm <= cfg.update_norm_tolerance)
                || halvings >= HARD_STEP_HALVINGS
            {
                break;
            }
            scale *= 0.5;
            halvings += 1;
        }
        let Some((next_pose, next_cost, scale)) = accepted else {
            converged = delta.scaled(scale).norm() <= cfg.update_norm_tolerance;
            break;
        };
        *pose = next_pose;
        cost_trace.push(next_cost);

        let update_norm = delta.scaled(scale).norm();
        let relative_decrease = if current_cost > 0.0 {
            (current_cost - next_cost) / current_cost
        } else {
            0.0
        };
        if update_norm <= cfg.update_norm_tolerance
            || relative_decrease <= cfg.cost_decrease_tolerance
        {
            converged = true;
            break;
        }
    }

    Ok(Some(LevelOutcome { iterations, residual_count, converged, condition, cost_trace }))
}

/// Registers `source` against `target`, starting from `init`, coarse to
/// fine. Returns the pose of the source frame expressed in the target
/// frame. A result that failed to converge is still returned, flagged with
/// `converged = false`.
pub fn register(
    source: &HeightGrid,
    target: &HeightGrid,
    init: &Pose,
    cfg: &SolverConfig,
) -> Result<RegistrationResult, RegistrationError> {
    assert!(cfg.validate(), "invalid solver config");
    if source.config() != target.config() {
        return Err(RegistrationError::GridMismatch);
    }

    let mut pose = match cfg.mode {
        SolverMode::Planar3Dof => planar_embed(&planar_project(init)),
        SolverMode::Full6Dof => *init,
    };

    // Pyramid: level 0 is the input resolution.
    let mut levels = vec![(source.clone(), target.clone())];
    while levels.len() < cfg.pyramid_levels {
        let (s, _) = levels.last().unwrap();
        let next_rows = s.config().rows / 2;
        let next_cols = s.config().cols / 2;
        if next_rows.min(next_cols) < MIN_PYRAMID_CELLS {
            break;
        }
        let (s, t) = levels.last().unwrap();
        levels.push((s.downsample_2x(), t.downsample_2x()));
    }

    let mut finest_outcome = None;
    for (index, (s, t)) in levels.iter().enumerate().rev() {
        let finest = index == 0;
        if let Some(outcome) = solve_level(s, t, &mut pose, cfg, finest)? {
            if finest {
                finest_outcome = Some(outcome);
            }
        }
    }
    let outcome = finest_outcome.expect("finest level always produces an outcome");

    let final_terms = back_project(source, cfg.gradient_threshold);
    let final_cost = cost_of(&final_terms, target, &pose, cfg.huber_delta);

    Ok(RegistrationResult {
        relative_pose: pose,
        final_cost: final_cost.sum_squared,
        iterations: outcome.iterations,
        residual_count: outcome.residual_count,
        converged: outcome.converged,
        condition_estimate: outcome.condition,
        cost_trace: outcome.cost_trace,
    })
}

/// Ground-plane leveling configuration for [`pitch_compensate`].
#[derive(Debug, Clone, Copy)]
pub struct PitchCompensationConfig {
    /// Only points below this height (sensor frame) enter the plane fit.
    pub candidate_max_z: f64,
    pub ransac_iterations: usize,
    /// Point-to-plane inlier distance, meters.
    pub inlier_tolerance: f64,
    /// Below this inlier share the scan passes through unchanged.
    pub min_inlier_fraction: f64,
    /// Plane hypotheses must be within ~45 degrees of horizontal.
    pub min_normal_z: f64,
    pub seed: u64,
}

impl Default for PitchCompensationConfig {
    fn default() -> Self {
        Self {
            candidate_max_z: -0.5,
            ransac_iterations: 200,
            inlier_tolerance: 0.05,
            min_inlier_fraction: 0.2,
            min_normal_z: 0.7,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PitchCompensation {
    pub scan: Scan,
    /// Applied correction, radians.
    pub roll: f64,
    pub pitch: f64,
    /// False when no dominant ground plane was found; the scan is then the
    /// unmodified input.
    pub ground_plane_found: bool,
}

/// Levels the scan so the dominant ground plane normal aligns with +z.
/// RANSAC over the low-height band, refined by a least-squares plane fit
/// on the inliers. Deterministic for a fixed config.
pub fn pitch_compensate(scan: &Scan, cfg: &PitchCompensationConfig) -> PitchCompensation {
    let unchanged = |found: bool| PitchCompensation {
        scan: scan.clone(),
        roll: 0.0,
        pitch: 0.0,
        ground_plane_found: found,
    };

    let candidates: Vec<Vector3<f64>> = scan
        .points
        .iter()
        .filter(|p| p.z < cfg.candidate_max_z)
        .map(|p| Vector3::new(p.x, p.y, p.z))
        .collect();
    if candidates.len() < 3 {
        return unchanged(false);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_inliers = 0usize;
    let mut best_plane: Option<(Vector3<f64>, f64)> = None;
    for _ in 0..cfg.ransac_iterations {
        let idx = sample_indices(&mut rng, candidates.len(), 3);
        let (a, b, c) = (
            candidates[idx.index(0)],
            candidates[idx.index(1)],
            candidates[idx.index(2)],
        );
        let normal = (b - a).cross(&(c - a));
        let norm = normal.norm();
        if norm < 1e-9 {
            continue;
        }
        let mut normal = normal / norm;
        if normal.z < 0.0 {
            normal = -normal;
        }
        if normal.z < cfg.min_normal_z {
            continue;
        }
        let offset = normal.dot(&a);
        let inliers = candidates
            .iter()
            .filter(|p| (normal.dot(p) - offset).abs() < cfg.inlier_tolerance)
            .count();
        if inliers > best_inliers {
            best_inliers = inliers;
            best_plane = Some((normal, offset));
        }
    }

    let Some((normal, offset)) = best_plane else {
        return unchanged(false);
    };
    if (best_inliers as f64) < cfg.min_inlier_fraction * candidates.len() as f64 {
        return unchanged(false);
    }

    // Least-squares refinement on the inlier set.
    let inliers: Vec<&Vector3<f64>> = candidates
        .iter()
        .filter(|p| (normal.dot(p) - offset).abs() < cfg.inlier_tolerance)
        .collect();
    let centroid =
        inliers.iter().fold(Vector3::zeros(), |acc, p| acc + **p) / inliers.len() as f64;
    let mut covariance = Matrix3::zeros();
    for p in &inliers {
        let d = **p - centroid;
        covariance += d * d.transpose();
    }
    let eigen = covariance.symmetric_eigen();
    let smallest = eigen.eigenvalues.imin();
    let mut refined = eigen.eigenvectors.column(smallest).into_owned();
    if refined.z < 0.0 {
        refined = -refined;
    }

    // Minimal rotation taking the plane normal to +z (no yaw component).
    let axis = refined.cross(&Vector3::z());
    let cos = refined.z.clamp(-1.0, 1.0);
    let rotation = if axis.norm() < 1e-12 {
        Matrix3::identity()
    } else {
        let k = crate::lie::skew(&axis);
        Matrix3::identity() + k + k * k / (1.0 + cos)
    };

    let points = scan
        .points
        .iter()
        .map(|p| {
            let q = rotation * Vector3::new(p.x, p.y, p.z);
            Point3::new(q.x, q.y, q.z)
        })
        .collect();
    let mut leveled = Scan::new(points, scan.frame_index);
    leveled.timestamp = scan.timestamp;

    PitchCompensation {
        scan: leveled,
        roll: rotation[(2, 1)].atan2(rotation[(2, 2)]),
        pitch: (-rotation[(2, 0)]).clamp(-1.0, 1.0).asin(),
        ground_plane_found: true,
    }
}
