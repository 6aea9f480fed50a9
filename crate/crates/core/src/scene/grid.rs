use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pixel on the BEV grid. `i` indexes along x, `j` along y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub i: usize,
    pub j: usize,
}

impl Pixel {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }
}

/// Regular BEV raster. Rows (`height`) run along x, columns (`width`) along y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            cell: 0.5,
            height: 128,
            width: 128,
        }
    }
}

impl BevGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0 && self.cell.is_finite()) {
            return Err(Error::config("grid.cell", "must be positive"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("grid", "height and width must be at least 8"));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::config("grid.origin", "must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_max(&self) -> f64 {
        self.origin_x + self.cell * self.height as f64
    }

    pub fn y_max(&self) -> f64 {
        self.origin_y + self.cell * self.width as f64
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.origin_x && x < self.x_max() && y >= self.origin_y && y < self.y_max()
    }

    /// The pixel containing a world point, using floor on both axes.
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<Pixel> {
        let fi = ((x - self.origin_x) / self.cell).floor();
        let fj = ((y - self.origin_y) / self.cell).floor();
        if fi < 0.0 || fj < 0.0 || fi >= self.height as f64 || fj >= self.width as f64 {
            return None;
        }
        Some(Pixel::new(fi as usize, fj as usize))
    }

    pub fn pixel_center(&self, p: Pixel) -> (f64, f64) {
        (
            self.origin_x + (p.i as f64 + 0.5) * self.cell,
            self.origin_y + (p.j as f64 + 0.5) * self.cell,
        )
    }

    pub fn flat(&self, p: Pixel) -> usize {
        p.i * self.width + p.j
    }

    pub fn unflat(&self, idx: usize) -> Pixel {
        Pixel::new(idx / self.width, idx % self.width)
    }

    pub fn in_bounds(&self, i: isize, j: isize) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.height && (j as usize) < self.width
    }

    /// The 8-neighbourhood of `p` clipped to the grid, in lexicographic order.
    pub fn neighbors8(&self, p: Pixel) -> impl Iterator<Item = Pixel> + '_ {
        (-1isize..=1)
            .flat_map(|di| (-1isize..=1).map(move |dj| (di, dj)))
            .filter(|&(di, dj)| di != 0 || dj != 0)
            .filter_map(move |(di, dj)| {
                let i = p.i as isize + di;
                let j = p.j as isize + dj;
                self.in_bounds(i, j).then(|| Pixel::new(i as usize, j as usize))
            })
    }
}
