use serde::{Deserialize, Serialize};

use crate::dynamics::{Interval, Point3};
use crate::error::{Error, Result};

/// One axis of a uniform grid: `count` cells covering `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        Interval::new(lo, hi)?;
        if count == 0 {
            return Err(Error::invalid("axis needs at least one cell"));
        }
        Ok(Axis { lo, hi, count })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.spacing()
    }

    /// Cell containing `x`; the upper edge belongs to the last cell.
    pub fn locate(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let i = ((x - self.lo) / self.spacing()).floor() as usize;
        Some(i.min(self.count - 1))
    }
}

/// Axis-aligned box split into uniform cells, linearised x-fastest:
/// `index = i + n_x·j + n_x·n_y·k`.
///
/// Axes with a single cell are allowed; they carry no flux, which is how one-
/// and two-dimensional problems are represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    axes: [Axis; 3],
}

impl Grid3 {
    pub fn new(axes: [Axis; 3]) -> Result<Self> {
        for a in &axes {
            Axis::new(a.lo, a.hi, a.count)?;
        }
        let g = Grid3 { axes };
        if g.len() < 2 {
            return Err(Error::invalid("grid needs at least two cells"));
        }
        Ok(g)
    }

    pub fn uniform(bounds: &[Interval; 3], counts: [usize; 3]) -> Result<Self> {
        Self::new([
            Axis::new(bounds[0].lo, bounds[0].hi, counts[0])?,
            Axis::new(bounds[1].lo, bounds[1].hi, counts[1])?,
            Axis::new(bounds[2].lo, bounds[2].hi, counts[2])?,
        ])
    }

    /// Cells of edge `dx` starting at each lower bound; upper bounds are moved
    /// out to the next multiple of `dx` so the spacing is exactly `dx`.
    pub fn with_spacing(bounds: &[Interval; 3], dx: f64) -> Result<Self> {
        if !(dx.is_finite() && dx > 0.0) {
            return Err(Error::invalid(format!("cell size {dx} must be positive")));
        }
        let axis = |b: &Interval| {
            let count = ((b.width() / dx) - 1e-9).ceil().max(1.0) as usize;
            Axis::new(b.lo, b.lo + count as f64 * dx, count)
        };
        Self::new([axis(&bounds[0])?, axis(&bounds[1])?, axis(&bounds[2])?])
    }

    /// One-dimensional grid along x.
    pub fn line(lo: f64, hi: f64, count: usize) -> Result<Self> {
        Self::new([
            Axis::new(lo, hi, count)?,
            Axis::new(-0.5, 0.5, 1)?,
            Axis::new(-0.5, 0.5, 1)?,
        ])
    }

    pub fn axes(&self) -> &[Axis; 3] {
        &self.axes
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.axes[0].count, self.axes[1].count, self.axes[2].count]
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> [f64; 3] {
        [self.axes[0].spacing(), self.axes[1].spacing(), self.axes[2].spacing()]
    }

    /// Linear-index offsets of a unit step along each axis.
    pub fn strides(&self) -> [usize; 3] {
        let [nx, ny, _] = self.counts();
        [1, nx, nx * ny]
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        let s = self.strides();
        ijk[0] + s[1] * ijk[1] + s[2] * ijk[2]
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.counts();
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn cell_center(&self, index: usize) -> Point3 {
        let c = self.coords(index);
        [
            self.axes[0].center(c[0]),
            self.axes[1].center(c[1]),
            self.axes[2].center(c[2]),
        ]
    }

    pub fn locate(&self, p: Point3) -> Option<usize> {
        let i = self.axes[0].locate(p[0])?;
        let j = self.axes[1].locate(p[1])?;
        let k = self.axes[2].locate(p[2])?;
        Some(self.index([i, j, k]))
    }

    /// Largest distance between two cell centres.
    pub fn diameter(&self) -> f64 {
        self.axes
            .iter()
            .map(|a| {
                let w = a.center(a.count - 1) - a.center(0);
                w * w
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn bounds(&self) -> [Interval; 3] {
        self.axes.map(|a| Interval { lo: a.lo, hi: a.hi })
    }
}
