//! Linear solves for `(delta - L_h) u = F` on interior unknowns.

use serde::{Deserialize, Serialize};

use super::stencil::{DiscreteGenerator, Scheme};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSolver {
    /// Restarted GMRES, right-preconditioned by a Gauss-Seidel V-cycle.
    Gmres,
    /// Damped Gauss-Seidel sweeps.
    GaussSeidel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub solver: LinearSolver,
    /// Relative tolerance: the max-norm residual target is `tol (1 + |F|_inf)`.
    pub tol: f64,
    /// Krylov dimension between restarts.
    pub restart: usize,
    /// Cap on preconditioned GMRES iterations.
    pub max_iterations: usize,
    /// Cap on Gauss-Seidel sweeps.
    pub max_sweeps: usize,
    /// Symmetric sweeps per preconditioner application.
    pub preconditioner_sweeps: usize,
    /// Operator the preconditioning sweeps are run on.
    pub preconditioner: Scheme,
    /// Coarse grids below the solve grid in the preconditioning V-cycle.
    pub coarse_levels: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            solver: LinearSolver::Gmres,
            tol: 1e-8,
            restart: 30,
            max_iterations: 20_000,
            max_sweeps: 1_000_000,
            preconditioner_sweeps: 1,
            preconditioner: Scheme::Centered,
            coarse_levels: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub target: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn residual(op: &DiscreteGenerator, delta: f64, f: &[f64], u: &[f64], r: &mut [f64]) -> f64 {
    op.apply_shifted(delta, u, r);
    for (ri, fi) in r.iter_mut().zip(f) {
        *ri = fi - *ri;
    }
    max_abs(r)
}

/// Solves `(delta - L_h) u = f` in place starting from the given `u`.
pub fn solve_interior(
    op: &DiscreteGenerator,
    delta: f64,
    f: &[f64],
    u: &mut [f64],
    cfg: &SolverConfig,
) -> Result<SolveStats> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta = {delta} outside (0, 1]"
        )));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tol = {} must be positive",
            cfg.tol
        )));
    }
    let target = cfg.tol * (1.0 + max_abs(f));
    match cfg.solver {
        LinearSolver::Gmres => gmres(op, delta, f, u, target, cfg),
        LinearSolver::GaussSeidel => {
            let start = u.to_vec();
            match gauss_seidel(op, delta, f, u, target, cfg.max_sweeps, 1.0) {
                Err(Error::NoConvergence {
                    iterations,
                    residual,
                }) if !residual.is_finite() || iterations < cfg.max_sweeps => {
                    u.copy_from_slice(&start);
                    gauss_seidel(op, delta, f, u, target, cfg.max_sweeps, 0.5)
                }
                other => other,
            }
        }
    }
}

const CHECK_EVERY: usize = 10;

/// Returns early (as `NoConvergence` with fewer than `max_sweeps` sweeps)
/// when the residual grows by a factor 1e3 over its best value, which
/// signals that the damping must be lowered.
fn gauss_seidel(
    op: &DiscreteGenerator,
    delta: f64,
    f: &[f64],
    u: &mut [f64],
    target: f64,
    max_sweeps: usize,
    omega: f64,
) -> Result<SolveStats> {
    let mut r = vec![0.0; f.len()];
    let mut best = residual(op, delta, f, u, &mut r);
    if best <= target {
        return Ok(SolveStats {
            iterations: 0,
            residual: best,
            target,
        });
    }
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        let batch = CHECK_EVERY.min(max_sweeps - sweeps);
        for _ in 0..batch {
            op.gauss_seidel_sweep(delta, f, u, true, omega);
        }
        sweeps += batch;
        let res = residual(op, delta, f, u, &mut r);
        if res <= target {
            return Ok(SolveStats {
                iterations: sweeps,
                residual: res,
                target,
            });
        }
        if !res.is_finite() || res > 1e3 * best {
            return Err(Error::NoConvergence {
                iterations: sweeps,
                residual: res,
            });
        }
        best = best.min(res);
    }
    let res = residual(op, delta, f, u, &mut r);
    Err(Error::NoConvergence {
        iterations: sweeps,
        residual: res,
    })
}

/// Geometric V-cycle on grids of spacing `h, 2h, 4h, ...` over the same
/// box, each rediscretized with the preconditioner scheme. With a fixed
/// number of sweeps and a zero start it is a fixed linear map, as GMRES
/// requires.
struct Preconditioner {
    levels: Vec<DiscreteGenerator>,
    sweeps: usize,
}

const COARSEST_SWEEPS: usize = 20;

impl Preconditioner {
    fn new(op: &DiscreteGenerator, cfg: &SolverConfig) -> Self {
        let mut levels = vec![DiscreteGenerator::new(
            *op.grid(),
            op.params(),
            cfg.preconditioner,
        )];
        while levels.len() <= cfg.coarse_levels {
            let g = *levels.last().expect("nonempty").grid();
            let half = g.center();
            if half % 2 != 0 || half / 2 < 2 {
                break;
            }
            let Ok(coarse) = super::grid::Grid3::with_cap(g.radius(), 2.0 * g.h(), usize::MAX)
            else {
                break;
            };
            levels.push(DiscreteGenerator::new(
                coarse,
                op.params(),
                cfg.preconditioner,
            ));
        }
        Preconditioner {
            levels,
            sweeps: cfg.preconditioner_sweeps.max(1),
        }
    }

    fn apply(&self, delta: f64, v: &[f64], z: &mut [f64]) {
        self.cycle(0, delta, v, z);
    }

    fn smooth(&self, level: usize, delta: f64, f: &[f64], z: &mut [f64], sweeps: usize) {
        for _ in 0..sweeps {
            self.levels[level].gauss_seidel_sweep(delta, f, z, true, 1.0);
            self.levels[level].gauss_seidel_sweep(delta, f, z, false, 1.0);
        }
    }

    fn cycle(&self, level: usize, delta: f64, f: &[f64], z: &mut [f64]) {
        z.fill(0.0);
        if level + 1 == self.levels.len() {
            let sweeps = if level == 0 {
                self.sweeps
            } else {
                COARSEST_SWEEPS
            };
            self.smooth(level, delta, f, z, sweeps);
            return;
        }
        let op = &self.levels[level];
        self.smooth(level, delta, f, z, self.sweeps);
        let mut r = vec![0.0; f.len()];
        op.apply_shifted(delta, z, &mut r);
        for (ri, fi) in r.iter_mut().zip(f) {
            *ri = fi - *ri;
        }
        let nc = self.levels[level + 1].interior_per_axis();
        let rc = restrict_full_weighting(&r, op.interior_per_axis(), nc);
        let mut ec = vec![0.0; rc.len()];
        self.cycle(level + 1, delta, &rc, &mut ec);
        prolong_add(&ec, nc, z, op.interior_per_axis());
        // Post-smoothing in reverse order keeps the cycle symmetric.
        for _ in 0..self.sweeps {
            op.gauss_seidel_sweep(delta, f, z, false, 1.0);
            op.gauss_seidel_sweep(delta, f, z, true, 1.0);
        }
    }
}

/// Fine interior index `j` sits at node `j + 1`; coarse interior `J` at
/// coarse node `J + 1`, which is fine node `2 J + 2`.
fn restrict_full_weighting(r: &[f64], nf: usize, nc: usize) -> Vec<f64> {
    const W: [f64; 3] = [0.25, 0.5, 0.25];
    let at = |a: usize, b: usize, c: usize| r[a + nf * (b + nf * c)];
    let mut out = vec![0.0; nc * nc * nc];
    for k3 in 0..nc {
        for k2 in 0..nc {
            for k1 in 0..nc {
                let mut acc = 0.0;
                for (d3, w3) in W.iter().enumerate() {
                    let j3 = (2 * k3 + d3).min(nf - 1);
                    for (d2, w2) in W.iter().enumerate() {
                        let j2 = (2 * k2 + d2).min(nf - 1);
                        for (d1, w1) in W.iter().enumerate() {
                            let j1 = (2 * k1 + d1).min(nf - 1);
                            acc += w1 * w2 * w3 * at(j1, j2, j3);
                        }
                    }
                }
                out[k1 + nc * (k2 + nc * k3)] = acc;
            }
        }
    }
    out
}

/// Adds the trilinear interpolation of the coarse correction to `z`.
fn prolong_add(ec: &[f64], nc: usize, z: &mut [f64], nf: usize) {
    // Fine interior j maps to coarse coordinate (j + 1) / 2 - 1 in coarse
    // interior units; clamping realises the closure.
    let taps = |j: usize| -> [(usize, f64); 2] {
        let i = j + 1;
        let clamp = |c: isize| (c.clamp(1, nc as isize) - 1) as usize;
        if i.is_multiple_of(2) {
            [(clamp((i / 2) as isize), 1.0), (0, 0.0)]
        } else {
            [
                (clamp((i / 2) as isize), 0.5),
                (clamp((i / 2 + 1) as isize), 0.5),
            ]
        }
    };
    let t: Vec<[(usize, f64); 2]> = (0..nf).map(taps).collect();
    for j3 in 0..nf {
        for j2 in 0..nf {
            for j1 in 0..nf {
                let mut acc = 0.0;
                for &(c3, w3) in &t[j3] {
                    for &(c2, w2) in &t[j2] {
                        for &(c1, w1) in &t[j1] {
                            let w = w1 * w2 * w3;
                            if w != 0.0 {
                                acc += w * ec[c1 + nc * (c2 + nc * c3)];
                            }
                        }
                    }
                }
                z[j1 + nf * (j2 + nf * j3)] += acc;
            }
        }
    }
}

fn gmres(
    op: &DiscreteGenerator,
    delta: f64,
    f: &[f64],
    u: &mut [f64],
    target: f64,
    cfg: &SolverConfig,
) -> Result<SolveStats> {
    let n = f.len();
    let m = cfg.restart.max(1);
    let pre = Preconditioner::new(op, cfg);
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut iterations = 0;
    let mut res = residual(op, delta, f, u, &mut r);
    let mut stalled = 0;
    loop {
        if res <= target {
            return Ok(SolveStats {
                iterations,
                residual: res,
                target,
            });
        }
        if !res.is_finite() || iterations >= cfg.max_iterations || stalled >= 3 {
            return Err(Error::NoConvergence {
                iterations,
                residual: res,
            });
        }
        let beta = dot(&r, &r).sqrt();
        // Inner loop works in the 2-norm; translate the max-norm target with
        // the shape of the current residual.
        let inner_target = 0.5 * target * beta / res;
        basis.clear();
        basis.push(r.iter().map(|x| x / beta).collect());
        let mut hess = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k = 0;
        while k < m && iterations < cfg.max_iterations {
            pre.apply(delta, &basis[k], &mut z);
            let mut w = vec![0.0; n];
            op.apply_shifted(delta, &z, &mut w);
            for (i, v) in basis.iter().enumerate() {
                let hik = dot(&w, v);
                hess[i][k] = hik;
                for (wj, vj) in w.iter_mut().zip(v) {
                    *wj -= hik * vj;
                }
            }
            let norm = dot(&w, &w).sqrt();
            hess[k + 1][k] = norm;
            for i in 0..k {
                let (a, b) = (hess[i][k], hess[i + 1][k]);
                hess[i][k] = cs[i] * a + sn[i] * b;
                hess[i + 1][k] = -sn[i] * a + cs[i] * b;
            }
            let (a, b) = (hess[k][k], hess[k + 1][k]);
            let rho = a.hypot(b);
            cs[k] = a / rho;
            sn[k] = b / rho;
            hess[k][k] = rho;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            iterations += 1;
            k += 1;
            if g[k].abs() <= inner_target || norm == 0.0 {
                break;
            }
            for wj in w.iter_mut() {
                *wj /= norm;
            }
            basis.push(w);
        }
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| hess[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / hess[i][i];
        }
        let mut combo = vec![0.0; n];
        for (yi, v) in y.iter().zip(&basis) {
            for (cj, vj) in combo.iter_mut().zip(v) {
                *cj += yi * vj;
            }
        }
        pre.apply(delta, &combo, &mut z);
        for (ui, zi) in u.iter_mut().zip(&z) {
            *ui += zi;
        }
        let prev = res;
        res = residual(op, delta, f, u, &mut r);
        stalled = if res > 0.999 * prev { stalled + 1 } else { 0 };
    }
}
