//! LiDAR scan representation, spherical/Cartesian conversion and scan file
//! ingestion.
//!
//! Supported on-disk formats:
//! - `kitti-bin`: packed little-endian float32 quadruples (x, y, z,
//!   intensity) with no header; intensity is read and discarded.
//! - `xyz-text`: one `x y z` triple per line, `#` comments allowed.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const KITTI_RECORD_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum PointError {
    /// Range/angle values outside the spherical domain.
    #[error("invalid spherical coordinates (range {range}, azimuth {azimuth}, elevation {elevation})")]
    InvalidSpherical { range: f64, azimuth: f64, elevation: f64 },
    /// The inverse conversion is undefined on the z-axis.
    #[error("azimuth is undefined for points on the z-axis")]
    DegenerateInput,
}

#[derive(Debug, Error)]
pub enum ScanIoError {
    #[error("io error reading scan: {0}")]
    Io(#[from] std::io::Error),
    /// kitti-bin file whose size is not a multiple of the 16-byte record.
    #[error("{path}: size {size} is not a multiple of {KITTI_RECORD_BYTES}-byte kitti-bin records")]
    Format { path: String, size: u64 },
    #[error("{path}:{line}: cannot parse '{text}' as x y z")]
    Parse { path: String, line: usize, text: String },
}

/// A LiDAR return in spherical sensor coordinates: range (meters, >= 0),
/// azimuth in [-pi, pi), elevation in (-pi/2, pi/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalPoint {
    range: f64,
    azimuth: f64,
    elevation: f64,
}

impl SphericalPoint {
    pub fn new(range: f64, azimuth: f64, elevation: f64) -> Result<Self, PointError> {
        let bad = !range.is_finite()
            || range < 0.0
            || !azimuth.is_finite()
            || !(-std::f64::consts::PI..std::f64::consts::PI).contains(&azimuth)
            || !elevation.is_finite()
            || elevation.abs() >= std::f64::consts::FRAC_PI_2;
        if bad {
            return Err(PointError::InvalidSpherical { range, azimuth, elevation });
        }
        Ok(Self { range, azimuth, elevation })
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }
}

/// A LiDAR return in sensor-frame Cartesian meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

impl fmt::Display for Point3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl From<Point3> for nalgebra::Vector3<f64> {
    fn from(p: Point3) -> Self {
        nalgebra::Vector3::new(p.x, p.y, p.z)
    }
}

impl From<nalgebra::Vector3<f64>> for Point3 {
    fn from(v: nalgebra::Vector3<f64>) -> Self {
        Point3::new(v.x, v.y, v.z)
    }
}

/// One LiDAR sweep. Immutable after construction; all points are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub points: Vec<Point3>,
    pub frame_index: usize,
    pub timestamp: Option<f64>,
}

impl Scan {
    pub fn new(points: Vec<Point3>, frame_index: usize) -> Self {
        Self { points, frame_index, timestamp: None }
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanFormat {
    KittiBin,
    XyzText,
}

impl ScanFormat {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "kitti-bin" => Some(Self::KittiBin),
            "xyz-text" => Some(Self::XyzText),
            _ => None,
        }
    }
}

impl fmt::Display for ScanFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::KittiBin => write!(f, "kitti-bin"),
            Self::XyzText => write!(f, "xyz-text"),
        }
    }
}

/// Scan plus ingestion diagnostics.
#[derive(Debug, Clone)]
pub struct LoadedScan {
    pub scan: Scan,
    /// Points dropped because a component was NaN or infinite.
    pub dropped_non_finite: usize,
}

/// Eqs for the forward conversion: x = r cos(el) cos(az),
/// y = r cos(el) sin(az), z = r sin(el).
pub fn spherical_to_cartesian(p: &SphericalPoint) -> Point3 {
    let cos_el = p.elevation.cos();
    Point3::new(
        p.range * cos_el * p.azimuth.cos(),
        p.range * cos_el * p.azimuth.sin(),
        p.range * p.elevation.sin(),
    )
}

/// Inverse conversion. Points on the z-axis (azimuth undefined) are
/// rejected rather than clamped.
pub fn cartesian_to_spherical(p: &Point3) -> Result<SphericalPoint, PointError> {
    if !p.is_finite() {
        return Err(PointError::DegenerateInput);
    }
    let horizontal = p.x.hypot(p.y);
    if horizontal == 0.0 {
        return Err(PointError::DegenerateInput);
    }
    let range = horizontal.hypot(p.z);
    let mut azimuth = p.y.atan2(p.x);
    if azimuth >= std::f64::consts::PI {
        azimuth = -std::f64::consts::PI;
    }
    let elevation = (p.z / range).asin();
    SphericalPoint::new(range, azimuth, elevation)
}

/// Reads a scan file, dropping non-finite points and counting them.
pub fn read_scan_file(
    path: &Path,
    format: ScanFormat,
    frame_index: usize,
) -> Result<LoadedScan, ScanIoError> {
    match format {
        ScanFormat::KittiBin => read_kitti_bin(path, frame_index),
        ScanFormat::XyzText => read_xyz_text(path, frame_index),
    }
}

fn read_kitti_bin(path: &Path, frame_index: usize) -> Result<LoadedScan, ScanIoError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % KITTI_RECORD_BYTES != 0 {
        return Err(ScanIoError::Format {
            path: path.display().to_string(),
            size: bytes.len() as u64,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / KITTI_RECORD_BYTES);
    let mut dropped = 0usize;
    for record in bytes.chunks_exact(KITTI_RECORD_BYTES) {
        let field = |i: usize| {
            f32::from_le_bytes([record[4 * i], record[4 * i + 1], record[4 * i + 2], record[4 * i + 3]])
        };
        // field(3) is intensity, discarded
        let p = Point3::new(field(0) as f64, field(1) as f64, field(2) as f64);
        if p.is_finite() {
            points.push(p);
        } else {
            dropped += 1;
        }
    }
    Ok(LoadedScan {
        scan: Scan::new(points, frame_index),
        dropped_non_finite: dropped,
    })
}

fn read_xyz_text(path: &Path, frame_index: usize) -> Result<LoadedScan, ScanIoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut it = body.split_whitespace();
        let mut component = || -> Result<f64, ScanIoError> {
            it.next()
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| ScanIoError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    text: body.to_string(),
                })
        };
        let p = Point3::new(component()?, component()?, component()?);
        if p.is_finite() {
            points.push(p);
        } else {
            dropped += 1;
        }
    }
    Ok(LoadedScan {
        scan: Scan::new(points, frame_index),
        dropped_non_finite: dropped,
    })
}

/// Writes a scan in the given format (kitti-bin stores intensity 0).
pub fn write_scan_file(scan: &Scan, path: &Path, format: ScanFormat) -> Result<(), ScanIoError> {
    let mut writer = BufWriter::new(File::create(path)?);
    match format {
        ScanFormat::KittiBin => {
            for p in &scan.points {
                for value in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
                    writer.write_all(&value.to_le_bytes())?;
                }
            }
        }
        ScanFormat::XyzText => {
            for p in &scan.points {
                writeln!(writer, "{} {} {}", p.x, p.y, p.z)?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}
