//! LiDAR odometry by direct registration of 2.5D height-expectation grids.
//!
//! Each scan is rasterized into a grid over the ground plane whose cells
//! store mean point height. Consecutive grids are aligned by Gauss-Newton
//! minimization of per-cell height differences over an SE(3) twist
//! (restricted to x, y, yaw by default), and the chained relative poses
//! form a trajectory.
//!
//! - [`pointcloud`]: scan types, spherical/Cartesian conversion, scan files
//! - [`heightgrid`]: grid construction, gradients, selection, interpolation
//! - [`lie`]: twists, exp/log maps, planar pose restriction
//! - [`registration`]: the height-difference Gauss-Newton solver
//! - [`odometry`]: frame chaining and trajectory output
//! - [`eval`]: trajectory error metrics and reports
//! - [`synth`]: synthetic scenes and scan rendering with exact ground truth

pub mod eval;
pub mod heightgrid;
pub mod lie;
pub mod odometry;
pub mod pointcloud;
pub mod registration;
pub mod synth;

pub use heightgrid::{GridConfig, HeightGrid};
pub use lie::{PlanarPose, Pose, Twist};
pub use pointcloud::{Point3, Scan};

