//! 2.5D height-expectation grids: scans are projected onto a 2D grid over
//! the ground plane and each cell keeps the mean height of the points that
//! landed in it. A cell is valid once at least three points contribute.
//!
//! Grid coordinates: `u` indexes columns (the x axis), `v` indexes rows
//! (the y axis); storage is row-major. Continuous (u, v) coordinates place
//! the value of cell (u, v) at the integer coordinate itself, so bilinear
//! sampling at integers reproduces cell means exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector2;
use thiserror::Error;

use crate::pointcloud::{Point3, Scan};

/// A cell needs this many points before its mean counts as observed.
pub const MIN_POINTS_PER_CELL: u32 = 3;

#[derive(Debug, Error)]
pub enum GridError {
    /// Point projects outside the grid window.
    #[error("point projects outside the {cols}x{rows} grid (u {u}, v {v})")]
    OutOfBounds { u: i64, v: i64, cols: usize, rows: usize },
    /// A lookup touched an invalid or out-of-range cell.
    #[error("interpolation support at ({u}, {v}) includes invalid or out-of-range cells")]
    InvalidNeighborhood { u: f64, v: f64 },
}

#[derive(Debug, Error)]
pub enum GridIoError {
    #[error("grid io: {0}")]
    Io(#[from] std::io::Error),
    #[error("grid image: {0}")]
    Image(#[from] image::ImageError),
    #[error("truncated or malformed grid file {path}")]
    Malformed { path: String },
}

/// Grid geometry: cell sizes `f_x`, `f_y` in meters per cell and center
/// offsets `c_x`, `c_y` in cells. World x maps to column u = floor(x/f_x + c_x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub f_x: f64,
    pub f_y: f64,
    pub c_x: f64,
    pub c_y: f64,
}

impl Default for GridConfig {
    /// 400x400 cells of 10 cm: a 40 m x 40 m window centered on the sensor.
    fn default() -> Self {
        Self { rows: 400, cols: 400, f_x: 0.1, f_y: 0.1, c_x: 200.0, c_y: 200.0 }
    }
}

impl GridConfig {
    /// Square grid centered on the sensor with the given cell size, covering
    /// roughly `extent` meters across.
    pub fn centered(extent: f64, cell_size: f64) -> Self {
        let cells = (extent / cell_size).round().max(2.0) as usize;
        Self {
            rows: cells,
            cols: cells,
            f_x: cell_size,
            f_y: cell_size,
            c_x: cells as f64 / 2.0,
            c_y: cells as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> bool {
        self.rows > 0 && self.cols > 0 && self.f_x > 0.0 && self.f_y > 0.0
    }

    /// World coordinates of the center of cell (u, v).
    pub fn cell_center(&self, c: CellIndex) -> (f64, f64) {
        (
            (c.u as f64 + 0.5 - self.c_x) * self.f_x,
            (c.v as f64 + 0.5 - self.c_y) * self.f_y,
        )
    }

    /// Continuous grid coordinates of a world point, in the node convention
    /// used by [`bilinear_sample`] (cell value sits at its integer index).
    pub fn world_to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.f_x + self.c_x - 0.5, y / self.f_y + self.c_y - 0.5)
    }
}

/// In-bounds cell address (u: column, v: row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub u: usize,
    pub v: usize,
}

impl CellIndex {
    pub fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }
}

/// Eqs of the grid projection: (floor(x/f_x + c_x), floor(y/f_y + c_y)),
/// rejecting indices outside the window.
pub fn project_point(p: &Point3, cfg: &GridConfig) -> Result<CellIndex, GridError> {
    let u = (p.x / cfg.f_x + cfg.c_x).floor();
    let v = (p.y / cfg.f_y + cfg.c_y).floor();
    if u >= 0.0 && v >= 0.0 && (u as usize) < cfg.cols && (v as usize) < cfg.rows {
        Ok(CellIndex::new(u as usize, v as usize))
    } else {
        Err(GridError::OutOfBounds {
            u: u as i64,
            v: v as i64,
            cols: cfg.cols,
            rows: cfg.rows,
        })
    }
}

/// Options applied while rasterizing a scan.
#[derive(Debug, Clone, Copy)]
pub struct GridBuildOptions {
    /// Points above this height (meters, sensor frame) are discarded so
    /// overhanging structure does not corrupt the single-surface model.
    /// `None` keeps everything.
    pub z_ceiling: Option<f64>,
}

impl Default for GridBuildOptions {
    fn default() -> Self {
        Self { z_ceiling: Some(3.0) }
    }
}

/// Rasterization diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GridBuildStats {
    pub out_of_bounds: usize,
    pub above_ceiling: usize,
}

/// Per-cell mean height with an observation-count validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightGrid {
    config: GridConfig,
    mean: Vec<f64>,
    count: Vec<u32>,
}

impl HeightGrid {
    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    #[inline]
    fn linear(&self, u: usize, v: usize) -> usize {
        v * self.config.cols + u
    }

    #[inline]
    pub fn mean(&self, c: CellIndex) -> f64 {
        self.mean[self.linear(c.u, c.v)]
    }

    #[inline]
    pub fn count(&self, c: CellIndex) -> u32 {
        self.count[self.linear(c.u, c.v)]
    }

    #[inline]
    pub fn is_valid(&self, c: CellIndex) -> bool {
        self.count[self.linear(c.u, c.v)] >= MIN_POINTS_PER_CELL
    }

    fn valid_at(&self, u: usize, v: usize) -> bool {
        self.count[self.linear(u, v)] >= MIN_POINTS_PER_CELL
    }

    pub fn valid_cell_count(&self) -> usize {
        self.count.iter().filter(|&&c| c >= MIN_POINTS_PER_CELL).count()
    }

    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        let cols = self.config.cols;
        (0..self.config.rows).flat_map(move |v| (0..cols).map(move |u| CellIndex::new(u, v)))
    }

    /// Builds a grid directly from per-cell means and counts (test scenes,
    /// deserialization). Array lengths must match rows * cols.
    pub fn from_raw(config: GridConfig, mean: Vec<f64>, count: Vec<u32>) -> Self {
        assert_eq!(mean.len(), config.rows * config.cols);
        assert_eq!(count.len(), config.rows * config.cols);
        Self { config, mean, count }
    }

    /// Halves the resolution by merging 2x2 blocks of cells. Means are
    /// combined weighted by their point counts, which reproduces what
    /// re-rasterizing the original points at the coarser cell size yields.
    pub fn downsample_2x(&self) -> HeightGrid {
        let rows = self.config.rows / 2;
        let cols = self.config.cols / 2;
        let config = GridConfig {
            rows,
            cols,
            f_x: self.config.f_x * 2.0,
            f_y: self.config.f_y * 2.0,
            c_x: self.config.c_x / 2.0,
            c_y: self.config.c_y / 2.0,
        };
        let mut mean = vec![0.0; rows * cols];
        let mut count = vec![0u32; rows * cols];
        for v in 0..rows {
            for u in 0..cols {
                let mut sum = 0.0;
                let mut n = 0u32;
                for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let idx = self.linear(2 * u + du, 2 * v + dv);
                    sum += self.mean[idx] * self.count[idx] as f64;
                    n += self.count[idx];
                }
                let idx = v * cols + u;
                count[idx] = n;
                mean[idx] = if n > 0 { sum / n as f64 } else { 0.0 };
            }
        }
        HeightGrid { config, mean, count }
    }
}

/// Rasterizes a scan into a height grid.
///
/// Accumulation is order-canonical: contributions are sorted by (cell,
/// height) before summing, so any permutation of the input points yields a
/// bit-identical grid.
pub fn build_height_grid(
    scan: &Scan,
    cfg: &GridConfig,
    opts: &GridBuildOptions,
) -> (HeightGrid, GridBuildStats) {
    assert!(cfg.validate(), "invalid grid config");
    let mut stats = GridBuildStats::default();
    let mut contributions: Vec<(u32, f64)> = Vec::with_capacity(scan.points.len());
    for p in &scan.points {
        if let Some(ceiling) = opts.z_ceiling {
            if p.z > ceiling {
                stats.above_ceiling += 1;
                continue;
            }
        }
        match project_point(p, cfg) {
            Ok(c) => contributions.push(((c.v * cfg.cols + c.u) as u32, p.z)),
            Err(_) => stats.out_of_bounds += 1,
        }
    }
    contributions.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut mean = vec![0.0; cfg.rows * cfg.cols];
    let mut count = vec![0u32; cfg.rows * cfg.cols];
    let mut i = 0;
    while i < contributions.len() {
        let cell = contributions[i].0 as usize;
        let mut sum = 0.0;
        let mut n = 0u32;
        while i < contributions.len() && contributions[i].0 as usize == cell {
            sum += contributions[i].1;
            n += 1;
            i += 1;
        }
        mean[cell] = sum / n as f64;
        count[cell] = n;
    }
    (HeightGrid { config: *cfg, mean, count }, stats)
}

/// Forward-difference height gradient at a cell, in meters per cell:
/// (mean(u+1, v) - mean(u, v), mean(u, v+1) - mean(u, v)). Defined only
/// when the cell and both forward neighbors are valid.
pub fn grid_gradient(grid: &HeightGrid, c: CellIndex) -> Result<Vector2<f64>, GridError> {
    let cfg = grid.config();
    if c.u + 1 >= cfg.cols
        || c.v + 1 >= cfg.rows
        || !grid.valid_at(c.u, c.v)
        || !grid.valid_at(c.u + 1, c.v)
        || !grid.valid_at(c.u, c.v + 1)
    {
        return Err(GridError::InvalidNeighborhood { u: c.u as f64, v: c.v as f64 });
    }
    let here = grid.mean(c);
    Ok(Vector2::new(
        grid.mean(CellIndex::new(c.u + 1, c.v)) - here,
        grid.mean(CellIndex::new(c.u, c.v + 1)) - here,
    ))
}

/// A gradient-bearing cell retained by semi-dense selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedCell {
    pub index: CellIndex,
    /// Forward-difference gradient, meters per cell.
    pub gradient: Vector2<f64>,
}

/// Cells whose height gradient magnitude exceeds the selection threshold,
/// in deterministic row-major order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectedCells {
    pub cells: Vec<SelectedCell>,
}

impl SelectedCells {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Keeps exactly the valid cells whose forward-difference gradient
/// magnitude exceeds `threshold`. An empty result is legal.
pub fn select_semi_dense_cells(grid: &HeightGrid, threshold: f64) -> SelectedCells {
    assert!(threshold > 0.0, "selection threshold must be positive");
    let cfg = grid.config();
    let mut cells = Vec::new();
    for v in 0..cfg.rows {
        for u in 0..cfg.cols {
            let index = CellIndex::new(u, v);
            if let Ok(gradient) = grid_gradient(grid, index) {
                if gradient.norm() > threshold {
                    cells.push(SelectedCell { index, gradient });
                }
            }
        }
    }
    SelectedCells { cells }
}

#[inline]
fn bilinear_support(
    grid: &HeightGrid,
    u: f64,
    v: f64,
) -> Result<(usize, usize, f64, f64), GridError> {
    let cfg = grid.config();
    let fu = u.floor();
    let fv = v.floor();
    let err = || GridError::InvalidNeighborhood { u, v };
    if !(fu >= 0.0 && fv >= 0.0 && fu.is_finite() && fv.is_finite()) {
        return Err(err());
    }
    let u0 = fu as usize;
    let v0 = fv as usize;
    if u0 + 1 >= cfg.cols || v0 + 1 >= cfg.rows {
        return Err(err());
    }
    if !(grid.valid_at(u0, v0)
        && grid.valid_at(u0 + 1, v0)
        && grid.valid_at(u0, v0 + 1)
        && grid.valid_at(u0 + 1, v0 + 1))
    {
        return Err(err());
    }
    Ok((u0, v0, u - fu, v - fv))
}

/// Bilinear blend of the four surrounding cell means at continuous grid
/// coordinates. Errors if any support cell is invalid or out of range.
pub fn bilinear_sample(grid: &HeightGrid, u: f64, v: f64) -> Result<f64, GridError> {
    let (u0, v0, a, b) = bilinear_support(grid, u, v)?;
    let m = |du: usize, dv: usize| grid.mean(CellIndex::new(u0 + du, v0 + dv));
    Ok(m(0, 0) * (1.0 - a) * (1.0 - b)
        + m(1, 0) * a * (1.0 - b)
        + m(0, 1) * (1.0 - a) * b
        + m(1, 1) * a * b)
}

/// Gradient of the bilinearly interpolated height surface, meters per cell.
/// Exact for affine height fields and consistent with finite differences of
/// [`bilinear_sample`] within a cell.
pub fn bilinear_gradient(grid: &HeightGrid, u: f64, v: f64) -> Result<Vector2<f64>, GridError> {
    let (u0, v0, a, b) = bilinear_support(grid, u, v)?;
    let m = |du: usize, dv: usize| grid.mean(CellIndex::new(u0 + du, v0 + dv));
    Ok(Vector2::new(
        (m(1, 0) - m(0, 0)) * (1.0 - b) + (m(1, 1) - m(0, 1)) * b,
        (m(0, 1) - m(0, 0)) * (1.0 - a) + (m(1, 1) - m(1, 0)) * a,
    ))
}

/// Renders the grid as an 8-bit PNG: heights min-max normalized over valid
/// cells, invalid cells black, selected cells overlaid in green when given.
/// A grid with zero height range renders its valid cells white.
pub fn render_grid_image(
    grid: &HeightGrid,
    selection: Option<&SelectedCells>,
    path: &Path,
) -> Result<(), GridIoError> {
    let cfg = grid.config();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in grid.cells() {
        if grid.is_valid(c) {
            let m = grid.mean(c);
            lo = lo.min(m);
            hi = hi.max(m);
        }
    }
    let range = hi - lo;
    let shade = |c: CellIndex| -> u8 {
        if !grid.is_valid(c) {
            0
        } else if range <= 0.0 {
            255
        } else {
            (255.0 * (grid.mean(c) - lo) / range).round().clamp(0.0, 255.0) as u8
        }
    };
    let mut img = image::RgbImage::new(cfg.cols as u32, cfg.rows as u32);
    for v in 0..cfg.rows {
        for u in 0..cfg.cols {
            let g = shade(CellIndex::new(u, v));
            img.put_pixel(u as u32, v as u32, image::Rgb([g, g, g]));
        }
    }
    if let Some(sel) = selection {
        for cell in &sel.cells {
            img.put_pixel(cell.index.u as u32, cell.index.v as u32, image::Rgb([0, 255, 0]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Serializes the grid: header (rows u32, cols u32, f_x, f_y, c_x, c_y as
/// f64, all little-endian), then row-major f64 means and u32 counts.
pub fn write_grid(grid: &HeightGrid, path: &Path) -> Result<(), GridIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    let cfg = grid.config();
    w.write_all(&(cfg.rows as u32).to_le_bytes())?;
    w.write_all(&(cfg.cols as u32).to_le_bytes())?;
    for value in [cfg.f_x, cfg.f_y, cfg.c_x, cfg.c_y] {
        w.write_all(&value.to_le_bytes())?;
    }
    for m in &grid.mean {
        w.write_all(&m.to_le_bytes())?;
    }
    for c in &grid.count {
        w.write_all(&c.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<HeightGrid, GridIoError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let malformed = || GridIoError::Malformed { path: path.display().to_string() };
    let header = 4 + 4 + 4 * 8;
    if bytes.len() < header {
        return Err(malformed());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let rows = u32_at(0) as usize;
    let cols = u32_at(4) as usize;
    let config = GridConfig {
        rows,
        cols,
        f_x: f64_at(8),
        f_y: f64_at(16),
        c_x: f64_at(24),
        c_y: f64_at(32),
    };
    let n = rows.checked_mul(cols).ok_or_else(malformed)?;
    if !config.validate() || bytes.len() != header + n * 8 + n * 4 {
        return Err(malformed());
    }
    let mean = (0..n).map(|i| f64_at(header + i * 8)).collect();
    let count = (0..n).map(|i| u32_at(header + n * 8 + i * 4)).collect();
    Ok(HeightGrid::from_raw(config, mean, count))
}
