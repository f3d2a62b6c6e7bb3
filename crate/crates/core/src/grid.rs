use serde::{Deserialize, Serialize};

use crate::error::{Result, StmError};

/// Cartesian voxel grid. 2-D data is stored with `nz = 1`; the spatial
/// dimension `d` is 3 exactly when `nz > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    dims: [usize; 3],
    d: usize,
}

impl Grid {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(StmError::invariant(format!(
                "grid dimensions must be positive, got {dims:?}"
            )));
        }
        let d = if dims[2] > 1 { 3 } else { 2 };
        Ok(Grid { dims, d })
    }

    pub fn new_2d(nx: usize, ny: usize) -> Result<Self> {
        Grid::new([nx, ny, 1])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn nx(&self) -> usize {
        self.dims[0]
    }
    pub fn ny(&self) -> usize {
        self.dims[1]
    }
    pub fn nz(&self) -> usize {
        self.dims[2]
    }

    /// Spatial dimension, 2 or 3.
    pub fn spatial_dim(&self) -> usize {
        self.d
    }

    /// Total voxel count.
    pub fn n(&self) -> usize {
        self.dims.iter().product()
    }

    /// Linear voxel index, row-major over (x, y, z).
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    /// Inverse of [`voxel_index`](Self::voxel_index).
    pub fn voxel_coords(&self, index: usize) -> [usize; 3] {
        let z = index % self.dims[2];
        let rest = index / self.dims[2];
        let y = rest % self.dims[1];
        let x = rest / self.dims[1];
        [x, y, z]
    }
}

/// Half-open index range along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisRange {
    pub start: usize,
    pub end: usize,
}

impl AxisRange {
    pub fn new(start: usize, end: usize) -> Self {
        AxisRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end
    }

    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Centered range of length `len` inside an axis of extent `n`.
    pub fn centered(n: usize, len: usize) -> Self {
        let start = (n - len) / 2;
        AxisRange::new(start, start + len)
    }
}
