//! Horizontal world grid shared by the surface columns and the vertical codec.

use crate::error::{Error, Result};

/// Integer (ix, iy) index of a world cell. Ordered by ix, then iy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct CellIndex {
    pub ix: i32,
    pub iy: i32,
}

impl CellIndex {
    pub const fn new(ix: i32, iy: i32) -> Self {
        CellIndex { ix, iy }
    }

    /// The eight surrounding cells.
    pub fn neighbors8(self) -> impl Iterator<Item = CellIndex> {
        const OFFS: [(i32, i32); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
        OFFS.iter()
            .map(move |(dx, dy)| CellIndex::new(self.ix + dx, self.iy + dy))
    }
}

/// Regular square grid anchored at `origin` (the corner of cell (0, 0)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldGrid {
    pub resolution: f64,
    pub origin: [f64; 2],
}

impl WorldGrid {
    pub fn new(resolution: f64, origin: [f64; 2]) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::Config(format!("resolution must be positive, got {resolution}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("grid origin".into()));
        }
        Ok(WorldGrid { resolution, origin })
    }

    pub fn cell_of(&self, x: f64, y: f64) -> CellIndex {
        CellIndex::new(
            ((x - self.origin[0]) / self.resolution).floor() as i32,
            ((y - self.origin[1]) / self.resolution).floor() as i32,
        )
    }

    pub fn cell_center(&self, c: CellIndex) -> [f64; 2] {
        [
            self.origin[0] + (c.ix as f64 + 0.5) * self.resolution,
            self.origin[1] + (c.iy as f64 + 0.5) * self.resolution,
        ]
    }
}
