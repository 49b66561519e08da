use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::FastState;

/// Cubic lattice `{-N h, ..., N h}^3` with `N = round(R / h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    radius: f64,
    h: f64,
    n: usize,
}

impl Grid3 {
    pub const DEFAULT_MAX_NODES: usize = 1 << 24;

    pub fn new(radius: f64, h: f64) -> Result<Self> {
        Self::with_cap(radius, h, Self::DEFAULT_MAX_NODES)
    }

    pub fn with_cap(radius: f64, h: f64, max_nodes: usize) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) || !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid: R = {radius}, h = {h}"
            )));
        }
        let half = (radius / h).round() as usize;
        if half < 2 {
            return Err(Error::InvalidArgument("grid: need R >= 2h".into()));
        }
        let n = 2 * half + 1;
        if n.checked_pow(3).is_none_or(|total| total > max_nodes) {
            return Err(Error::InvalidArgument(format!(
                "grid: {n}^3 nodes exceed the cap of {max_nodes}"
            )));
        }
        Ok(Grid3 { radius, h, n })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.n
    }

    pub fn n_nodes(&self) -> usize {
        self.n * self.n * self.n
    }

    /// Half-width of the lattice actually used, `round(R / h) h`.
    pub fn effective_radius(&self) -> f64 {
        self.center() as f64 * self.h
    }

    /// Index of the origin along each axis.
    pub fn center(&self) -> usize {
        (self.n - 1) / 2
    }

    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - self.center() as f64) * self.h
    }

    pub fn point(&self, i1: usize, i2: usize, i3: usize) -> FastState {
        FastState::new(self.coord(i1), self.coord(i2), self.coord(i3))
    }

    /// Flat index, first coordinate fastest.
    #[inline]
    pub fn index(&self, i1: usize, i2: usize, i3: usize) -> usize {
        i1 + self.n * (i2 + self.n * i3)
    }

    pub fn origin_index(&self) -> usize {
        let c = self.center();
        self.index(c, c, c)
    }

    /// Index range along one axis of nodes with `|y_k| <= half_width`.
    pub fn inner_range(&self, half_width: f64) -> std::ops::RangeInclusive<usize> {
        let c = self.center();
        let k = ((half_width / self.h) + 1e-9).floor() as usize;
        let k = k.min(c);
        (c - k)..=(c + k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: Grid3,
    pub values: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"HEISGF01";

impl GridFunction {
    pub fn zeros(grid: Grid3) -> Self {
        GridFunction {
            grid,
            values: vec![0.0; grid.n_nodes()],
        }
    }

    pub fn from_fn(grid: Grid3, mut f: impl FnMut(&FastState) -> f64) -> Self {
        let n = grid.nodes_per_axis();
        let mut values = Vec::with_capacity(grid.n_nodes());
        for i3 in 0..n {
            for i2 in 0..n {
                for i1 in 0..n {
                    values.push(f(&grid.point(i1, i2, i3)));
                }
            }
        }
        GridFunction { grid, values }
    }

    pub fn at(&self, i1: usize, i2: usize, i3: usize) -> f64 {
        self.values[self.grid.index(i1, i2, i3)]
    }

    pub fn at_origin(&self) -> f64 {
        self.values[self.grid.origin_index()]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        GridFunction {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Visits nodes with `|y|_inf <= half_width` as `(i1, i2, i3, point, value)`.
    pub fn for_each_inner(
        &self,
        half_width: f64,
        mut f: impl FnMut(usize, usize, usize, &FastState, f64),
    ) {
        let r = self.grid.inner_range(half_width);
        for i3 in r.clone() {
            for i2 in r.clone() {
                for i1 in r.clone() {
                    f(
                        i1,
                        i2,
                        i3,
                        &self.grid.point(i1, i2, i3),
                        self.at(i1, i2, i3),
                    );
                }
            }
        }
    }

    /// Max-norm difference to `other` on `|y|_inf <= half_width`, matching
    /// nodes by coordinates. Both grids must share the spacing.
    pub fn max_diff_on_box(&self, other: &GridFunction, half_width: f64) -> Result<f64> {
        if (self.grid.h() - other.grid.h()).abs() > 1e-12 * self.grid.h() {
            return Err(Error::InvalidArgument("grids differ in spacing".into()));
        }
        let (ca, cb) = (self.grid.center() as isize, other.grid.center() as isize);
        let mut worst: f64 = 0.0;
        self.for_each_inner(half_width, |i1, i2, i3, _, v| {
            let map = |i: usize| (i as isize - ca + cb) as usize;
            let w = other.at(map(i1), map(i2), map(i3));
            worst = worst.max((v - w).abs());
        });
        Ok(worst)
    }

    /// Header `HEISGF01`, `R` and `h` as little-endian f64, `nodes_per_axis`
    /// as little-endian u64, then the values as little-endian f64 with the
    /// first coordinate fastest.
    pub fn write_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.grid.radius().to_le_bytes())?;
        w.write_all(&self.grid.h().to_le_bytes())?;
        w.write_all(&(self.grid.nodes_per_axis() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(format!("grid function: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format("grid function: bad magic".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(io)?;
        let radius = f64::from_le_bytes(word);
        r.read_exact(&mut word).map_err(io)?;
        let h = f64::from_le_bytes(word);
        r.read_exact(&mut word).map_err(io)?;
        let n = u64::from_le_bytes(word) as usize;
        let grid = Grid3::with_cap(radius, h, usize::MAX)?;
        if grid.nodes_per_axis() != n {
            return Err(Error::Format(format!(
                "grid function: header says {n} nodes per axis, R/h gives {}",
                grid.nodes_per_axis()
            )));
        }
        let mut bytes = vec![0u8; grid.n_nodes() * 8];
        r.read_exact(&mut bytes).map_err(io)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(GridFunction { grid, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_count_and_origin() {
        let g = Grid3::new(8.0, 0.125).unwrap();
        assert_eq!(g.nodes_per_axis(), 129);
        assert_eq!(g.coord(g.center()), 0.0);
        assert_eq!(g.point(0, 128, 64), FastState::new(-8.0, 8.0, 0.0));
        assert!(Grid3::with_cap(8.0, 0.125, 1000).is_err());
        assert!(Grid3::new(-1.0, 0.1).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let g = Grid3::new(1.0, 0.25).unwrap();
        let f = GridFunction::from_fn(g, |y| y.y1 - 2.0 * y.y2 + 0.1 * y.y3);
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 8 * 729);
        assert_eq!(&buf[..8], b"HEISGF01");
        // x-fastest: second stored value is the node (1, 0, 0).
        let second = f64::from_le_bytes(buf[40..48].try_into().unwrap());
        assert_eq!(second, f.at(1, 0, 0));
        assert_eq!(GridFunction::read_binary(&buf[..]).unwrap(), f);
        buf[0] = b'X';
        assert!(GridFunction::read_binary(&buf[..]).is_err());
    }

    #[test]
    fn inner_box_comparison_aligns_coordinates() {
        let a = GridFunction::from_fn(Grid3::new(2.0, 0.5).unwrap(), |y| y.y1 * y.y3);
        let b = GridFunction::from_fn(Grid3::new(3.0, 0.5).unwrap(), |y| y.y1 * y.y3);
        assert_eq!(a.max_diff_on_box(&b, 1.0).unwrap(), 0.0);
    }
}
