//! occkit: semantic voxel-occupancy toolkit.
//!
//! Everything downstream of a perception backbone that turns per-voxel
//! class scores into an evaluated occupancy volume:
//!
//! - [`grid`]: volume geometry, label/probability grids, masks, class table
//! - [`metrics`]: masked per-class IoU and mIoU
//! - [`ensemble`]: weighted-average, max-probability and voting fusion
//! - [`det2occ`]: detection boxes to occupancy (threshold, lattice, voxelize)
//! - [`head`]: a small MLP + 3D UNet occupancy head with CE/dice loss and
//!   hand-written backward pass
//! - [`augment`]: deterministic cutout for multi-camera image sets
//! - [`io`]: the OCCK binary container, detection JSONL, run configuration
//! - [`cli`] and [`selfcheck`]: the command-line front end

pub mod augment;
pub mod cli;
pub mod det2occ;
pub mod ensemble;
mod error;
pub mod grid;
pub mod head;
pub mod io;
pub mod metrics;
pub mod selfcheck;

pub use error::{OccError, Result};
pub use grid::{ClassTable, GridSpec, LabelGrid, ProbGrid, VoxelCoord, VoxelMask};
