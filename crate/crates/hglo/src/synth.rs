//! Synthetic scenes and LiDAR scan rendering with exact ground truth.
//!
//! Scenes are a finite rough ground square plus boxes and cylinders
//! standing on it (ground level z = 0). Scans are ray-cast against the
//! scene from a sensor pose; rays walk a fixed beam order and noise comes
//! from a seeded ChaCha8 stream, so rendering is bit-reproducible across
//! runs and platforms. The returned ground-truth trajectory is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::lie::{planar_embed, PlanarPose, Pose};
use crate::odometry::Trajectory;
use crate::pointcloud::{Point3, Scan};

/// Rays never report hits closer than this (sensor housing).
const MIN_HIT_RANGE: f64 = 0.3;

/// Spacing of the ground roughness lattice, meters.
const ROUGHNESS_LATTICE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("spec io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Axis box standing on the ground, rotated by yaw about its center.
    Box { cx: f64, cy: f64, yaw: f64, sx: f64, sy: f64, sz: f64 },
    /// Vertical cylinder standing on the ground.
    Cylinder { cx: f64, cy: f64, radius: f64, height: f64 },
}

/// Deterministic scene description.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Side length of the square ground patch centered at the origin.
    pub ground_extent: f64,
    /// Amplitude of the world-anchored ground roughness field, meters.
    pub roughness_sigma: f64,
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { ground_extent: 80.0, roughness_sigma: 0.0, primitives: Vec::new(), seed: 0 }
    }
}

/// Rotating multi-beam sensor model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    pub beams: usize,
    /// Highest beam elevation, radians.
    pub fov_up: f64,
    /// Lowest beam elevation, radians.
    pub fov_down: f64,
    /// Horizontal angle between consecutive firings, radians.
    pub horizontal_resolution: f64,
    pub max_range: f64,
    /// Additive range noise sigma, meters.
    pub range_sigma: f64,
}

impl Default for SensorModel {
    /// Approximates an HDL-64: 64 beams, +2 to -24.8 degrees, 0.17 degree
    /// horizontal steps, 120 m range, 2 cm range noise.
    fn default() -> Self {
        Self {
            beams: 64,
            fov_up: 2.0f64.to_radians(),
            fov_down: -24.8f64.to_radians(),
            horizontal_resolution: 0.17f64.to_radians(),
            max_range: 120.0,
            range_sigma: 0.02,
        }
    }
}

impl SensorModel {
    /// Coarser azimuth stepping for faster tests; same beam geometry.
    pub fn with_horizontal_resolution(mut self, radians: f64) -> Self {
        self.horizontal_resolution = radians;
        self
    }

    pub fn validate(&self) -> bool {
        self.beams > 0
            && self.fov_up > self.fov_down
            && self.horizontal_resolution > 0.0
            && self.max_range > 0.0
            && self.range_sigma >= 0.0
    }

    fn azimuth_steps(&self) -> usize {
        (std::f64::consts::TAU / self.horizontal_resolution).floor() as usize
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Lattice value in [-1, 1], fixed by (seed, lattice point).
fn lattice_value(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(seed ^ (ix as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (iy as u64).wrapping_mul(0xc2b2ae3d27d4eb4f));
    (h >> 11) as f64 / ((1u64 << 53) as f64) * 2.0 - 1.0
}

/// World-anchored ground height: bilinear value noise on a 1 m lattice.
/// The same (x, y) gives the same height in every frame, so the rough
/// ground is consistent structure, not per-scan noise.
pub fn ground_height(scene: &SceneSpec, x: f64, y: f64) -> f64 {
    if scene.roughness_sigma == 0.0 {
        return 0.0;
    }
    let gx = x / ROUGHNESS_LATTICE;
    let gy = y / ROUGHNESS_LATTICE;
    let ix = gx.floor();
    let iy = gy.floor();
    let (fx, fy) = (gx - ix, gy - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = lattice_value(scene.seed, ix, iy);
    let v10 = lattice_value(scene.seed, ix + 1, iy);
    let v01 = lattice_value(scene.seed, ix, iy + 1);
    let v11 = lattice_value(scene.seed, ix + 1, iy + 1);
    scene.roughness_sigma
        * (v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy)
}

/// Nearest ground intersection distance along the ray, if any.
fn intersect_ground(scene: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    if dir.z.abs() < 1e-12 {
        return None;
    }
    // Flat-plane seed, then a few fixed-point refinements against the
    // roughness field (its slopes are far below 1, so this converges).
    let mut t = -origin.z / dir.z;
    for _ in 0..3 {
        if t <= 0.0 {
            return None;
        }
        let p = origin + dir * t;
        let h = ground_height(scene, p.x, p.y);
        t = (h - origin.z) / dir.z;
    }
    if t <= 0.0 {
        return None;
    }
    let p = origin + dir * t;
    let half = scene.ground_extent / 2.0;
    (p.x.abs() <= half && p.y.abs() <= half).then_some(t)
}

fn intersect_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    cx: f64,
    cy: f64,
    yaw: f64,
    sx: f64,
    sy: f64,
    sz: f64,
) -> Option<f64> {
    // into the box frame: translate to center, rotate by -yaw
    let (s, c) = yaw.sin_cos();
    let rot = |v: &Vector3<f64>| Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z);
    let o = rot(&Vector3::new(origin.x - cx, origin.y - cy, origin.z));
    let d = rot(dir);
    let bounds = [(-sx / 2.0, sx / 2.0), (-sy / 2.0, sy / 2.0), (0.0, sz)];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for (axis, (lo, hi)) in bounds.iter().enumerate() {
        let (o_a, d_a) = (o[axis], d[axis]);
        if d_a.abs() < 1e-12 {
            if o_a < *lo || o_a > *hi {
                return None;
            }
            continue;
        }
        let t1 = (lo - o_a) / d_a;
        let t2 = (hi - o_a) / d_a;
        t_enter = t_enter.max(t1.min(t2));
        t_exit = t_exit.min(t1.max(t2));
    }
    (t_enter <= t_exit && t_enter > 0.0).then_some(t_enter)
}

fn intersect_cylinder(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    cx: f64,
    cy: f64,
    radius: f64,
    height: f64,
) -> Option<f64> {
    let ox = origin.x - cx;
    let oy = origin.y - cy;
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 0.0 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    // lateral surface
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > 1e-12 {
        let b = 2.0 * (ox * dir.x + oy * dir.y);
        let c = ox * ox + oy * oy - radius * radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sqrt = disc.sqrt();
            for t in [(-b - sqrt) / (2.0 * a), (-b + sqrt) / (2.0 * a)] {
                let z = origin.z + t * dir.z;
                if (0.0..=height).contains(&z) {
                    consider(t);
                }
            }
        }
    }
    // top cap
    if dir.z.abs() > 1e-12 {
        let t = (height - origin.z) / dir.z;
        let (x, y) = (ox + t * dir.x, oy + t * dir.y);
        if x * x + y * y <= radius * radius {
            consider(t);
        }
    }
    best
}

fn intersect_primitive(p: &Primitive, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    match *p {
        Primitive::Box { cx, cy, yaw, sx, sy, sz } => {
            intersect_box(origin, dir, cx, cy, yaw, sx, sy, sz)
        }
        Primitive::Cylinder { cx, cy, radius, height } => {
            intersect_cylinder(origin, dir, cx, cy, radius, height)
        }
    }
}

fn render_scan_stream(
    scene: &SceneSpec,
    sensor: &SensorModel,
    sensor_pose: &Pose,
    frame_index: usize,
    noise_stream: u64,
) -> Scan {
    assert!(sensor.validate(), "invalid sensor model");
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(scene.seed ^ noise_stream.wrapping_mul(0x2545f4914f6cdd1d)));
    let origin = *sensor_pose.translation();
    let rotation = *sensor_pose.rotation();
    let inverse = sensor_pose.inverse();

    let steps = sensor.azimuth_steps();
    let elevation_step = if sensor.beams > 1 {
        (sensor.fov_up - sensor.fov_down) / (sensor.beams - 1) as f64
    } else {
        0.0
    };

    let mut points = Vec::with_capacity(steps * sensor.beams / 2);
    for az_index in 0..steps {
        let azimuth = az_index as f64 * sensor.horizontal_resolution;
        let (sin_az, cos_az) = azimuth.sin_cos();
        for beam in 0..sensor.beams {
            let elevation = sensor.fov_up - beam as f64 * elevation_step;
            let (sin_el, cos_el) = elevation.sin_cos();
            let dir_sensor = Vector3::new(cos_el * cos_az, cos_el * sin_az, sin_el);
            let dir = rotation * dir_sensor;

            let mut range = intersect_ground(scene, &origin, &dir);
            for prim in &scene.primitives {
                if let Some(t) = intersect_primitive(prim, &origin, &dir) {
                    if range.is_none_or(|r| t < r) {
                        range = Some(t);
                    }
                }
            }
            let Some(mut t) = range else { continue };
            if t < MIN_HIT_RANGE || t > sensor.max_range {
                continue;
            }
            if sensor.range_sigma > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                t += n * sensor.range_sigma;
            }
            let world = origin + dir * t;
            let local = inverse.transform_point(&world);
            points.push(Point3::new(local.x, local.y, local.z));
        }
    }
    Scan::new(points, frame_index)
}

/// Ray-casts one scan from the given sensor pose. Points are in the sensor
/// frame; beams that hit nothing produce no point. Deterministic per scene
/// seed.
pub fn render_scan(scene: &SceneSpec, sensor: &SensorModel, sensor_pose: &Pose) -> Scan {
    render_scan_stream(scene, sensor, sensor_pose, 0, 0)
}

/// Renders one scan per pose (fresh noise stream per frame) and returns the
/// scans with the exact ground-truth trajectory.
pub fn render_sequence(
    scene: &SceneSpec,
    sensor: &SensorModel,
    poses: &[Pose],
) -> (Vec<Scan>, Trajectory) {
    let mut scans = Vec::with_capacity(poses.len());
    let mut truth = Trajectory::new();
    for (k, pose) in poses.iter().enumerate() {
        scans.push(render_scan_stream(scene, sensor, pose, k, k as u64));
        truth.push(k, *pose);
    }
    (scans, truth)
}

/// Straight line along +x: `frames` poses advancing `length` in total.
pub fn line_trajectory(length: f64, frames: usize) -> Vec<Pose> {
    assert!(frames >= 2);
    let step = length / (frames - 1) as f64;
    (0..frames)
        .map(|k| planar_embed(&PlanarPose::new(step * k as f64, 0.0, 0.0)))
        .collect()
}

/// Square loop: four straight legs of `side` meters joined by in-place
/// turns, ending back at the start pose. Path length is exactly 4 * side.
pub fn square_loop_trajectory(side: f64, frames_per_leg: usize, turn_frames: usize) -> Vec<Pose> {
    assert!(frames_per_leg >= 1 && turn_frames >= 1);
    let mut poses = vec![PlanarPose::new(0.0, 0.0, 0.0)];
    let mut heading = 0.0f64;
    let mut position = (0.0f64, 0.0f64);
    for _leg in 0..4 {
        let step = side / frames_per_leg as f64;
        for _ in 0..frames_per_leg {
            position.0 += step * heading.cos();
            position.1 += step * heading.sin();
            poses.push(PlanarPose::new(position.0, position.1, heading));
        }
        let turn_step = std::f64::consts::FRAC_PI_2 / turn_frames as f64;
        for _ in 0..turn_frames {
            heading += turn_step;
            poses.push(PlanarPose::new(position.0, position.1, heading));
        }
    }
    poses.iter().map(planar_embed).collect()
}

/// Scatters boxes and cylinders around a set of waypoints, keeping a clear
/// corridor of `clearance` meters around the path. Deterministic per seed.
pub fn scatter_obstacles(
    waypoints: &[(f64, f64)],
    count: usize,
    spread: f64,
    clearance: f64,
    seed: u64,
) -> Vec<Primitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clear = |x: f64, y: f64, margin: f64| {
        waypoints.windows(2).all(|w| {
            let (ax, ay) = w[0];
            let (bx, by) = w[1];
            let (vx, vy) = (bx - ax, by - ay);
            let len2 = vx * vx + vy * vy;
            let s = if len2 > 0.0 {
                ((x - ax) * vx + (y - ay) * vy) / len2
            } else {
                0.0
            }
            .clamp(0.0, 1.0);
            let (px, py) = (ax + s * vx, ay + s * vy);
            (x - px).hypot(y - py) >= clearance + margin
        })
    };
    let (min_x, max_x) = waypoints
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| (lo.min(*x), hi.max(*x)));
    let (min_y, max_y) = waypoints
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, y)| (lo.min(*y), hi.max(*y)));

    let mut primitives = Vec::with_capacity(count);
    let mut attempts = 0;
    while primitives.len() < count && attempts < count * 100 {
        attempts += 1;
        let x = rng.random_range(min_x - spread..max_x + spread);
        let y = rng.random_range(min_y - spread..max_y + spread);
        if rng.random_range(0.0..1.0) < 0.7 {
            let sx: f64 = rng.random_range(0.6..3.0);
            let sy: f64 = rng.random_range(0.6..3.0);
            if !clear(x, y, sx.max(sy)) {
                continue;
            }
            primitives.push(Primitive::Box {
                cx: x,
                cy: y,
                yaw: rng.random_range(0.0..std::f64::consts::FRAC_PI_2),
                sx,
                sy,
                sz: rng.random_range(0.5..2.5),
            });
        } else {
            let radius = rng.random_range(0.2..1.0);
            if !clear(x, y, radius) {
                continue;
            }
            primitives.push(Primitive::Cylinder {
                cx: x,
                cy: y,
                radius,
                height: rng.random_range(0.5..3.0),
            });
        }
    }
    primitives
}

/// Writes a scene as the plain-text key-value format read back by
/// [`read_scene_spec`]. Angles are radians, lengths meters.
pub fn write_scene_spec(scene: &SceneSpec, path: &Path) -> Result<(), SpecError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "extent = {}", scene.ground_extent)?;
    writeln!(w, "roughness = {}", scene.roughness_sigma)?;
    writeln!(w, "seed = {}", scene.seed)?;
    for p in &scene.primitives {
        match *p {
            Primitive::Box { cx, cy, yaw, sx, sy, sz } => {
                writeln!(w, "box = {cx} {cy} {yaw} {sx} {sy} {sz}")?;
            }
            Primitive::Cylinder { cx, cy, radius, height } => {
                writeln!(w, "cylinder = {cx} {cy} {radius} {height}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn spec_lines(path: &Path) -> Result<Vec<(usize, String, String)>, SpecError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(SpecError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "expected 'key = value'".into(),
            });
        };
        out.push((lineno + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_numbers(path: &Path, line: usize, value: &str, n: usize) -> Result<Vec<f64>, SpecError> {
    let values: Vec<f64> = value
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| SpecError::Parse {
            path: path.display().to_string(),
            line,
            message: format!("expected {n} numbers"),
        })?;
    if values.len() != n {
        return Err(SpecError::Parse {
            path: path.display().to_string(),
            line,
            message: format!("expected {n} numbers, got {}", values.len()),
        });
    }
    Ok(values)
}

/// Reads a scene spec file: `extent`, `roughness`, `seed` scalars plus any
/// number of `box = cx cy yaw sx sy sz` and `cylinder = cx cy radius
/// height` lines. `#` starts a comment.
pub fn read_scene_spec(path: &Path) -> Result<SceneSpec, SpecError> {
    let mut scene = SceneSpec::default();
    for (line, key, value) in spec_lines(path)? {
        let parse_error = |message: String| SpecError::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        match key.as_str() {
            "extent" => {
                scene.ground_extent =
                    value.parse().map_err(|_| parse_error("bad extent".into()))?;
            }
            "roughness" => {
                scene.roughness_sigma =
                    value.parse().map_err(|_| parse_error("bad roughness".into()))?;
            }
            "seed" => {
                scene.seed = value.parse().map_err(|_| parse_error("bad seed".into()))?;
            }
            "box" => {
                let v = parse_numbers(path, line, &value, 6)?;
                scene.primitives.push(Primitive::Box {
                    cx: v[0], cy: v[1], yaw: v[2], sx: v[3], sy: v[4], sz: v[5],
                });
            }
            "cylinder" => {
                let v = parse_numbers(path, line, &value, 4)?;
                scene.primitives.push(Primitive::Cylinder {
                    cx: v[0], cy: v[1], radius: v[2], height: v[3],
                });
            }
            other => return Err(parse_error(format!("unknown key '{other}'"))),
        }
    }
    Ok(scene)
}

/// Reads a trajectory spec: either generator parameters
/// (`kind = line` with `length`, `frames`; `kind = square` with `side`,
/// `frames_per_leg`, `turn_frames`) or explicit `pose = x y yaw` lines
/// (`kind = poses`).
pub fn read_trajectory_spec(path: &Path) -> Result<Vec<Pose>, SpecError> {
    let lines = spec_lines(path)?;
    let mut kind = String::from("poses");
    let mut params: Vec<(usize, String, String)> = Vec::new();
    for (line, key, value) in lines {
        if key == "kind" {
            kind = value;
        } else {
            params.push((line, key, value));
        }
    }
    let parse_error = |line: usize, message: String| SpecError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let scalar = |params: &[(usize, String, String)], name: &str, default: f64| -> Result<f64, SpecError> {
        for (line, key, value) in params {
            if key == name {
                return value.parse().map_err(|_| parse_error(*line, format!("bad {name}")));
            }
        }
        Ok(default)
    };
    match kind.as_str() {
        "line" => {
            let length = scalar(&params, "length", 30.0)?;
            let frames = scalar(&params, "frames", 31.0)? as usize;
            if frames < 2 {
                return Err(parse_error(0, "line needs frames >= 2".into()));
            }
            Ok(line_trajectory(length, frames))
        }
        "square" => {
            let side = scalar(&params, "side", 25.0)?;
            let frames_per_leg = scalar(&params, "frames_per_leg", 25.0)? as usize;
            let turn_frames = scalar(&params, "turn_frames", 18.0)? as usize;
            if frames_per_leg < 1 || turn_frames < 1 {
                return Err(parse_error(0, "square needs at least one frame per segment".into()));
            }
            Ok(square_loop_trajectory(side, frames_per_leg, turn_frames))
        }
        "poses" => {
            let mut poses = Vec::new();
            for (line, key, value) in &params {
                if key != "pose" {
                    return Err(parse_error(*line, format!("unknown key '{key}'")));
                }
                let v = parse_numbers(path, *line, value, 3)?;
                poses.push(planar_embed(&PlanarPose::new(v[0], v[1], v[2])));
            }
            if poses.len() < 2 {
                return Err(parse_error(0, "need at least two poses".into()));
            }
            Ok(poses)
        }
        other => Err(parse_error(0, format!("unknown trajectory kind '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sensor_above_ground() -> Pose {
        Pose::new(
            *Pose::identity().rotation(),
            Vector3::new(0.0, 0.0, 1.7),
        )
        .unwrap()
    }

    #[test]
    fn flat_ground_points_sit_at_sensor_height() {
        let scene = SceneSpec { ground_extent: 200.0, ..Default::default() };
        let sensor = SensorModel { range_sigma: 0.02, ..Default::default() }
            .with_horizontal_resolution(2.0f64.to_radians());
        let scan = render_scan(&scene, &sensor, &sensor_above_ground());
        assert!(scan.len() > 5000, "got {} points", scan.len());
        for p in &scan.points {
            // range noise maps to height noise scaled by sin(elevation) < 1
            assert!(
                (p.z + 1.7).abs() < 3.0 * sensor.range_sigma,
                "z = {} not near -1.7",
                p.z
            );
        }
    }

    #[test]
    fn box_hits_lie_on_analytic_faces() {
        let scene = SceneSpec {
            ground_extent: 200.0,
            primitives: vec![Primitive::Box {
                cx: 8.0, cy: 0.0, yaw: 0.0, sx: 2.0, sy: 2.0, sz: 3.0,
            }],
            ..Default::default()
        };
        let sensor = SensorModel { range_sigma: 0.0, ..Default::default() }
            .with_horizontal_resolution(1.0f64.to_radians());
        let pose = sensor_above_ground();
        let scan = render_scan(&scene, &sensor, &pose);
        let mut face_hits = 0;
        for p in &scan.points {
            let world = pose.transform_point(&p.clone().into());
            let inside_x = (world.x - 8.0).abs() <= 1.0 + 1e-9;
            let inside_y = world.y.abs() <= 1.0 + 1e-9;
            let inside_z = world.z >= -1e-9 && world.z <= 3.0 + 1e-9;
            if inside_x && inside_y && inside_z {
                // every box hit lies on one of the analytic faces
                let on_face = ((world.x - 8.0).abs() - 1.0).abs() < 1e-9
                    || (world.y.abs() - 1.0).abs() < 1e-9
                    || (world.z - 3.0).abs() < 1e-9;
                assert!(on_face, "point {world} inside the box volume");
                face_hits += 1;
            }
        }
        assert!(face_hits > 50, "box barely sampled: {face_hits}");
        // the box occludes ground behind it: depth clamps at the front face
        let min_depth = scan
            .points
            .iter()
            .filter(|p| p.y.abs() < 0.5 && p.z > -1.0)
            .map(|p| p.x)
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(min_depth, 7.0, epsilon = 0.05);
    }

    #[test]
    fn cylinder_hits_lie_on_surface() {
        let scene = SceneSpec {
            ground_extent: 200.0,
            primitives: vec![Primitive::Cylinder { cx: 6.0, cy: 1.0, radius: 0.5, height: 2.5 }],
            ..Default::default()
        };
        let sensor = SensorModel { range_sigma: 0.0, ..Default::default() }
            .with_horizontal_resolution(0.5f64.to_radians());
        let pose = sensor_above_ground();
        let scan = render_scan(&scene, &sensor, &pose);
        let mut lateral = 0;
        for p in &scan.points {
            let world = pose.transform_point(&p.clone().into());
            let r = (world.x - 6.0).hypot(world.y - 1.0);
            if r <= 0.5 + 1e-9 && world.z > 1e-9 {
                let on_lateral = (r - 0.5).abs() < 1e-9;
                let on_cap = (world.z - 2.5).abs() < 1e-9;
                assert!(on_lateral || on_cap, "cylinder point off surface: {world}");
                if on_lateral {
                    lateral += 1;
                }
            }
        }
        assert!(lateral > 10);
    }

    #[test]
    fn rendering_is_bit_deterministic() {
        let scene = SceneSpec {
            ground_extent: 100.0,
            roughness_sigma: 0.03,
            primitives: vec![Primitive::Box {
                cx: 5.0, cy: -3.0, yaw: 0.4, sx: 1.5, sy: 2.0, sz: 1.0,
            }],
            seed: 1234,
        };
        let sensor = SensorModel::default().with_horizontal_resolution(1.0f64.to_radians());
        let pose = sensor_above_ground();
        let a = render_scan(&scene, &sensor, &pose);
        let b = render_scan(&scene, &sensor, &pose);
        assert_eq!(a, b);
    }

    #[test]
    fn ground_roughness_is_world_anchored() {
        let scene = SceneSpec { roughness_sigma: 0.05, seed: 7, ..Default::default() };
        let h1 = ground_height(&scene, 3.21, -4.56);
        let h2 = ground_height(&scene, 3.21, -4.56);
        assert_eq!(h1, h2);
        assert!(h1.abs() <= 0.05 + 1e-12);
        // different seed, different field
        let other = SceneSpec { seed: 8, ..scene };
        assert_ne!(ground_height(&other, 3.21, -4.56), h1);
    }

    #[test]
    fn sequence_returns_exact_truth_and_distinct_noise() {
        let scene = SceneSpec {
            ground_extent: 120.0,
            primitives: vec![Primitive::Box {
                cx: 6.0, cy: 2.0, yaw: 0.0, sx: 2.0, sy: 2.0, sz: 2.0,
            }],
            seed: 9,
            ..Default::default()
        };
        let sensor = SensorModel::default().with_horizontal_resolution(2.0f64.to_radians());
        let poses = vec![sensor_above_ground(), sensor_above_ground()];
        let (scans, truth) = render_sequence(&scene, &sensor, &poses);
        assert_eq!(truth.len(), 2);
        assert_eq!(scans.len(), 2);
        assert_eq!(scans[0].frame_index, 0);
        assert_eq!(scans[1].frame_index, 1);
        // identical poses but per-frame noise streams differ
        assert_ne!(scans[0].points, scans[1].points);
        // exact ground truth
        for ((_, a), b) in truth.entries().iter().zip(&poses) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn line_and_square_trajectories() {
        let line = line_trajectory(30.0, 61);
        assert_eq!(line.len(), 61);
        assert_abs_diff_eq!(line[60].translation().x, 30.0, epsilon = 1e-12);

        let square = square_loop_trajectory(25.0, 25, 9);
        assert_eq!(square.len(), 1 + 4 * (25 + 9));
        let last = square.last().unwrap();
        assert!(last.translation().norm() < 1e-9, "loop must close");
        // heading back to start orientation (2 pi wraps to identity)
        assert!((last.rotation() - Pose::identity().rotation()).norm() < 1e-9);
        // path length of the ground truth equals 4 * side
        let t = Trajectory::from_poses(square);
        assert_abs_diff_eq!(t.path_length(), 100.0, epsilon = 1e-9);
    }

    #[test]
    fn scatter_keeps_the_corridor_clear() {
        let waypoints = [(0.0, 0.0), (25.0, 0.0), (25.0, 25.0), (0.0, 25.0), (0.0, 0.0)];
        let prims = scatter_obstacles(&waypoints, 30, 12.0, 2.5, 42);
        assert!(prims.len() >= 20);
        // deterministic per seed
        assert_eq!(prims, scatter_obstacles(&waypoints, 30, 12.0, 2.5, 42));
    }

    #[test]
    fn scene_spec_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.txt");
        let scene = SceneSpec {
            ground_extent: 64.0,
            roughness_sigma: 0.02,
            seed: 77,
            primitives: vec![
                Primitive::Box { cx: 1.0, cy: 2.0, yaw: 0.3, sx: 1.0, sy: 2.0, sz: 0.5 },
                Primitive::Cylinder { cx: -3.0, cy: 4.0, radius: 0.4, height: 2.0 },
            ],
        };
        write_scene_spec(&scene, &path).unwrap();
        assert_eq!(read_scene_spec(&path).unwrap(), scene);

        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "box = 1 2 3\n").unwrap();
        assert!(matches!(read_scene_spec(&bad), Err(SpecError::Parse { .. })));
        std::fs::write(&bad, "nonsense\n").unwrap();
        assert!(matches!(read_scene_spec(&bad), Err(SpecError::Parse { .. })));
    }

    #[test]
    fn trajectory_spec_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        std::fs::write(&path, "kind = line\nlength = 10\nframes = 11\n").unwrap();
        let poses = read_trajectory_spec(&path).unwrap();
        assert_eq!(poses.len(), 11);
        assert_abs_diff_eq!(poses[10].translation().x, 10.0, epsilon = 1e-12);

        std::fs::write(&path, "pose = 0 0 0\npose = 1 0 0.1\n").unwrap();
        let poses = read_trajectory_spec(&path).unwrap();
        assert_eq!(poses.len(), 2);

        std::fs::write(&path, "kind = spiral\n").unwrap();
        assert!(read_trajectory_spec(&path).is_err());
    }
}
