//! Matrix-free discretization of the fast generator on a [`Grid3`].
//!
//! The second-order part is written in vector-field form
//! `X1^2 u + X2^2 u` with `X1 = (1, 0, 2 y2)` and `X2 = (0, 1, -2 y1)`, and
//! each `X_i^2 u` is a centred second difference along the field:
//! `[u(y + t X_i) - 2 u(y) + u(y - t X_i)] / t^2`. With `t` a whole number of
//! cells the shifted points stay on the lattice in `y1` and `y2`, so only the
//! `y3` coordinate needs interpolation.
//!
//! Unknowns live on interior nodes. Any read outside the interior is
//! clamped back into it, which realises the zero-normal-derivative closure
//! (face values copied from the inward neighbour).

use serde::{Deserialize, Serialize};

use super::grid::{Grid3, GridFunction};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Step `h`, cubic interpolation in `y3`, central drift wherever the
    /// cell Peclet number is at most one (upwind beyond). Second order near
    /// the origin, not monotone.
    Centered,
    /// Step `m h` with `m = round(h^(-1/2))`, linear interpolation in `y3`,
    /// upwind drift. First order and monotone.
    Monotone,
    /// Step `h`, linear interpolation, upwind drift. Monotone but not
    /// consistent in the second-order part; only used to precondition.
    Preconditioner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Interp {
    Linear,
    Cubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DriftDiff {
    Central,
    Upwind,
}

impl Scheme {
    pub fn step_cells(self, h: f64) -> usize {
        match self {
            Scheme::Monotone => ((1.0 / h.sqrt()).round() as usize).max(1),
            Scheme::Centered | Scheme::Preconditioner => 1,
        }
    }

    fn interp(self) -> Interp {
        match self {
            Scheme::Centered => Interp::Cubic,
            Scheme::Monotone | Scheme::Preconditioner => Interp::Linear,
        }
    }

    fn drift(self) -> DriftDiff {
        match self {
            Scheme::Centered => DriftDiff::Central,
            Scheme::Monotone | Scheme::Preconditioner => DriftDiff::Upwind,
        }
    }

    pub fn is_monotone(self) -> bool {
        !matches!(self, Scheme::Centered)
    }
}

/// One shifted point `y +- t X_i`: a target column and interpolation data
/// along `y3`.
#[derive(Debug, Clone, Copy, Default)]
struct ShiftedPoint {
    column: usize,
    /// Offset in `y3` cells of the first interpolation node.
    base: i64,
    weights: [f64; 4],
    len: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Column {
    points: [ShiftedPoint; 4],
    b1: f64,
    b2: f64,
    /// Diffusion coefficient along `y3` used in the Peclet test,
    /// `max(1, 4 (y1^2 + y2^2))`. The floor keeps the degenerate axis
    /// `y1 = y2 = 0` central.
    d3: f64,
    /// Columns at `j1 - 1`, `j1 + 1`, `j2 - 1`, `j2 + 1` (clamped).
    neighbors: [usize; 4],
}

fn interpolation(offset: f64, interp: Interp) -> (i64, [f64; 4], usize) {
    let floor = offset.floor();
    let theta = offset - floor;
    let base = floor as i64;
    if theta.abs() < 1e-12 {
        return (base, [1.0, 0.0, 0.0, 0.0], 1);
    }
    match interp {
        Interp::Linear => (base, [1.0 - theta, theta, 0.0, 0.0], 2),
        Interp::Cubic => {
            let t = theta;
            (
                base - 1,
                [
                    -t * (t - 1.0) * (t - 2.0) / 6.0,
                    (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
                    -(t + 1.0) * t * (t - 2.0) / 2.0,
                    (t + 1.0) * t * (t - 1.0) / 6.0,
                ],
                4,
            )
        }
    }
}

/// `L_h` on the interior unknowns of a grid.
#[derive(Debug, Clone)]
pub struct DiscreteGenerator {
    grid: Grid3,
    scheme: Scheme,
    /// Interior nodes per axis.
    ni: usize,
    inv_t2: f64,
    inv_h: f64,
    columns: Vec<Column>,
    b3: Vec<f64>,
    params: ModelParams,
}

impl DiscreteGenerator {
    pub fn new(grid: Grid3, p: &ModelParams, scheme: Scheme) -> Self {
        let n = grid.nodes_per_axis();
        let ni = n - 2;
        let h = grid.h();
        let m = scheme.step_cells(h);
        let t = m as f64 * h;
        let clamp = |i: i64| -> usize { (i.clamp(1, n as i64 - 2) - 1) as usize };
        let mut columns = Vec::with_capacity(ni * ni);
        for j2 in 0..ni {
            for j1 in 0..ni {
                let (i1, i2) = (j1 as i64 + 1, j2 as i64 + 1);
                let (y1, y2) = (grid.coord(i1 as usize), grid.coord(i2 as usize));
                let col = |a: i64, b: i64| clamp(a) + ni * clamp(b);
                // Shift of y3 in cells for a step t along X1 and X2.
                let dz1 = 2.0 * t * y2 / h;
                let dz2 = -2.0 * t * y1 / h;
                let mk = |column: usize, dz: f64| {
                    let (base, weights, len) = interpolation(dz, scheme.interp());
                    ShiftedPoint {
                        column,
                        base,
                        weights,
                        len,
                    }
                };
                let mi = m as i64;
                columns.push(Column {
                    points: [
                        mk(col(i1 + mi, i2), dz1),
                        mk(col(i1 - mi, i2), -dz1),
                        mk(col(i1, i2 + mi), dz2),
                        mk(col(i1, i2 - mi), -dz2),
                    ],
                    b1: -p.k1 * y1,
                    b2: -p.k2 * y2,
                    d3: (4.0 * (y1 * y1 + y2 * y2)).max(1.0),
                    neighbors: [
                        col(i1 - 1, i2),
                        col(i1 + 1, i2),
                        col(i1, i2 - 1),
                        col(i1, i2 + 1),
                    ],
                });
            }
        }
        let b3 = (0..ni).map(|j3| -p.k3 * grid.coord(j3 + 1)).collect();
        DiscreteGenerator {
            grid,
            scheme,
            ni,
            inv_t2: 1.0 / (t * t),
            inv_h: 1.0 / h,
            columns,
            b3,
            params: p.clone(),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn interior_per_axis(&self) -> usize {
        self.ni
    }

    pub fn n_unknowns(&self) -> usize {
        self.ni * self.ni * self.ni
    }

    /// Weighted sum of neighbour values `S`, the part of it sitting on the
    /// node itself, and the centre coefficient `c0`, so that
    /// `(L_h u)_j = S - c0 u_j`.
    #[inline(always)]
    fn node_terms(&self, u: &[f64], c: usize, j3: usize) -> (f64, f64, f64) {
        let ni = self.ni;
        let plane = ni * ni;
        let last = ni as i64 - 1;
        let col = &self.columns[c];
        let mut sum = 0.0;
        let mut own = 0.0;
        for pt in &col.points {
            let k0 = j3 as i64 + pt.base;
            let mut acc = 0.0;
            for q in 0..pt.len {
                let k = (k0 + q as i64).clamp(0, last) as usize;
                acc += pt.weights[q] * u[pt.column + plane * k];
                if pt.column == c && k == j3 {
                    own += self.inv_t2 * pt.weights[q];
                }
            }
            sum += self.inv_t2 * acc;
        }
        let mut c0 = 4.0 * self.inv_t2;
        let j3m = j3.saturating_sub(1);
        let j3p = (j3 + 1).min(ni - 1);
        let here = c + plane * j3;
        // (drift, diffusion, backward and forward neighbour) per axis
        let axes = [
            (
                col.b1,
                1.0,
                col.neighbors[0] + plane * j3,
                col.neighbors[1] + plane * j3,
            ),
            (
                col.b2,
                1.0,
                col.neighbors[2] + plane * j3,
                col.neighbors[3] + plane * j3,
            ),
            (self.b3[j3], col.d3, c + plane * j3m, c + plane * j3p),
        ];
        for (b, d, back, fwd) in axes {
            if self.central(b, d) {
                let w = 0.5 * b * self.inv_h;
                sum += w * (u[fwd] - u[back]);
                if fwd == here {
                    own += w;
                }
                if back == here {
                    own -= w;
                }
            } else {
                let w = b.abs() * self.inv_h;
                let up = if b > 0.0 { fwd } else { back };
                sum += w * u[up];
                c0 += w;
                if up == here {
                    own += w;
                }
            }
        }
        (sum, own, c0)
    }

    #[inline(always)]
    fn central(&self, b: f64, diffusion: f64) -> bool {
        self.scheme.drift() == DriftDiff::Central && b.abs() * self.grid.h() <= 2.0 * diffusion
    }

    /// `out = (delta - L_h) u` on interior unknowns.
    pub fn apply_shifted(&self, delta: f64, u: &[f64], out: &mut [f64]) {
        let plane = self.ni * self.ni;
        for j3 in 0..self.ni {
            for c in 0..plane {
                let j = c + plane * j3;
                let (s, _, c0) = self.node_terms(u, c, j3);
                out[j] = (delta + c0) * u[j] - s;
            }
        }
    }

    /// One Gauss-Seidel sweep for `(delta - L_h) u = f`, forward or backward
    /// in lexicographic order, with relaxation `omega`.
    pub fn gauss_seidel_sweep(
        &self,
        delta: f64,
        f: &[f64],
        u: &mut [f64],
        forward: bool,
        omega: f64,
    ) {
        let plane = self.ni * self.ni;
        let total = plane * self.ni;
        for step in 0..total {
            let j = if forward { step } else { total - 1 - step };
            let (c, j3) = (j % plane, j / plane);
            let (s, own, c0) = self.node_terms(u, c, j3);
            let uj = u[j];
            let gs = (f[j] + s - own * uj) / (delta + c0 - own);
            u[j] = uj + omega * (gs - uj);
        }
    }

    /// Interior values of a full-grid function.
    pub fn restrict(&self, g: &GridFunction) -> Vec<f64> {
        let ni = self.ni;
        let mut out = Vec::with_capacity(self.n_unknowns());
        for j3 in 0..ni {
            for j2 in 0..ni {
                for j1 in 0..ni {
                    out.push(g.at(j1 + 1, j2 + 1, j3 + 1));
                }
            }
        }
        out
    }

    /// Full-grid function from interior values, faces copied from the
    /// inward neighbour.
    pub fn extend(&self, interior: &[f64]) -> GridFunction {
        let n = self.grid.nodes_per_axis();
        let ni = self.ni;
        let clamp = |i: usize| i.clamp(1, n - 2) - 1;
        let mut values = Vec::with_capacity(self.grid.n_nodes());
        for i3 in 0..n {
            for i2 in 0..n {
                for i1 in 0..n {
                    values.push(interior[clamp(i1) + ni * (clamp(i2) + ni * clamp(i3))]);
                }
            }
        }
        GridFunction {
            grid: self.grid,
            values,
        }
    }

    /// `L_h u` at interior nodes (zero on faces). The face values of `u` are
    /// ignored: the closure is applied.
    pub fn apply(&self, u: &GridFunction) -> GridFunction {
        let interior = self.restrict(u);
        let mut out = vec![0.0; interior.len()];
        self.apply_shifted(0.0, &interior, &mut out);
        let n = self.grid.nodes_per_axis();
        let ni = self.ni;
        let mut full = GridFunction::zeros(self.grid);
        for j3 in 0..ni {
            for j2 in 0..ni {
                for j1 in 0..ni {
                    full.values[self.grid.index(j1 + 1, j2 + 1, j3 + 1)] =
                        -out[j1 + ni * (j2 + ni * j3)];
                }
            }
        }
        debug_assert_eq!(full.values.len(), n * n * n);
        full
    }

    /// Smallest off-diagonal coefficient of `-(L_h)` negated, i.e. the most
    /// negative weight any node puts on a neighbour. Non-negative exactly
    /// when the stencil is monotone.
    pub fn min_neighbor_weight(&self) -> f64 {
        // Probe coefficients by applying the operator to unit vectors would
        // cost O(N^2); read them from the stencil data instead.
        let mut worst = f64::INFINITY;
        for col in &self.columns {
            for pt in &col.points {
                for q in 0..pt.len {
                    worst = worst.min(pt.weights[q] * self.inv_t2);
                }
            }
            for b in [col.b1, col.b2] {
                if self.central(b, 1.0) {
                    worst = worst.min(-b.abs() * 0.5 * self.inv_h);
                }
            }
            for &b in &self.b3 {
                if self.central(b, col.d3) {
                    worst = worst.min(-b.abs() * 0.5 * self.inv_h);
                }
            }
        }
        worst
    }
}
