//! Scene and grid generators shared by the integration test suites.

use hglo::heightgrid::{build_height_grid, GridConfig, HeightGrid, MIN_POINTS_PER_CELL};
use hglo::lie::{planar_embed, PlanarPose, Pose};
use hglo::pointcloud::Scan;
use hglo::synth::{Primitive, SceneSpec, SensorModel};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SENSOR_HEIGHT: f64 = 1.7;

/// Sensor pose: planar vehicle pose lifted to the sensor height.
pub fn sensor_pose(p: &PlanarPose) -> Pose {
    let planar = planar_embed(p);
    Pose::new(
        *planar.rotation(),
        planar.translation() + Vector3::new(0.0, 0.0, SENSOR_HEIGHT),
    )
    .unwrap()
}

/// HDL-64-like beam geometry with a configurable azimuth step (degrees);
/// coarser steps keep tests fast without changing the vertical geometry.
pub fn test_sensor(horizontal_deg: f64) -> SensorModel {
    SensorModel::default().with_horizontal_resolution(horizontal_deg.to_radians())
}

/// Random obstacles in a ring around the origin: enough vertical structure
/// for registration, none of it on top of the sensor.
pub fn random_scene(seed: u64, obstacles: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = Vec::with_capacity(obstacles);
    while primitives.len() < obstacles {
        let radius = rng.random_range(2.5..12.0);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
        if rng.random_range(0.0..1.0) < 0.7 {
            primitives.push(Primitive::Box {
                cx,
                cy,
                yaw: rng.random_range(0.0..std::f64::consts::FRAC_PI_2),
                sx: rng.random_range(1.0..3.5),
                sy: rng.random_range(1.0..3.5),
                sz: rng.random_range(0.6..2.5),
            });
        } else {
            primitives.push(Primitive::Cylinder {
                cx,
                cy,
                radius: rng.random_range(0.3..1.0),
                height: rng.random_range(0.8..3.0),
            });
        }
    }
    SceneSpec {
        ground_extent: 80.0,
        roughness_sigma: 0.01,
        primitives,
        seed,
    }
}

pub fn grid_of(scan: &Scan) -> HeightGrid {
    build_height_grid(scan, &GridConfig::default(), &Default::default()).0
}

/// Smooth random height field with every cell valid: a sum of Gaussian
/// bumps over a gentle slope.
pub fn bumpy_grid(rows: usize, cols: usize, seed: u64) -> HeightGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|_| {
            (
                rng.random_range(4.0..cols as f64 - 4.0),
                rng.random_range(4.0..rows as f64 - 4.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..6.0),
            )
        })
        .collect();
    let (ax, ay) = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
    let mut mean = vec![0.0; rows * cols];
    for v in 0..rows {
        for u in 0..cols {
            let height: f64 = bumps
                .iter()
                .map(|(cu, cv, amp, sigma)| {
                    let d2 = (u as f64 - cu).powi(2) + (v as f64 - cv).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum::<f64>()
                + ax * u as f64
                + ay * v as f64;
            mean[v * cols + u] = height;
        }
    }
    let cfg = GridConfig {
        rows,
        cols,
        f_x: 0.1,
        f_y: 0.1,
        c_x: cols as f64 / 2.0,
        c_y: rows as f64 / 2.0,
    };
    HeightGrid::from_raw(cfg, mean, vec![MIN_POINTS_PER_CELL; rows * cols])
}
