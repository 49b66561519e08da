//! Finite-difference cell problem `delta u - L u = F` on a truncated box,
//! the ergodic-constant ladder, the corrector and the growth diagnostics.

pub mod grid;
pub mod solve;
pub mod stencil;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use grid::{Grid3, GridFunction};
pub use solve::{solve_interior, LinearSolver, SolveStats, SolverConfig};
pub use stencil::{DiscreteGenerator, Scheme};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::operator::{apply_generator, linear_growth_supersolution, FastState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    #[serde(rename = "R")]
    pub radius: f64,
    pub h: f64,
    pub scheme: Scheme,
    pub solver: SolverConfig,
    pub max_nodes: usize,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig {
            radius: 8.0,
            h: 0.125,
            scheme: Scheme::Centered,
            solver: SolverConfig::default(),
            max_nodes: Grid3::DEFAULT_MAX_NODES,
        }
    }
}

impl CellConfig {
    pub fn grid(&self) -> Result<Grid3> {
        Grid3::with_cap(self.radius, self.h, self.max_nodes)
    }
}

pub fn discretize_generator(grid: Grid3, p: &ModelParams, scheme: Scheme) -> DiscreteGenerator {
    DiscreteGenerator::new(grid, p, scheme)
}

/// A discrete operator bound to a right-hand side, reused across `delta`.
pub struct CellProblem {
    op: DiscreteGenerator,
    f: Vec<f64>,
    solver: SolverConfig,
}

#[derive(Debug, Clone)]
pub struct CellSolution {
    pub delta: f64,
    pub u: GridFunction,
    pub stats: SolveStats,
}

impl CellProblem {
    pub fn new(f: &GridFunction, p: &ModelParams, scheme: Scheme, solver: SolverConfig) -> Self {
        let op = DiscreteGenerator::new(f.grid, p, scheme);
        let f = op.restrict(f);
        CellProblem { op, f, solver }
    }

    pub fn operator(&self) -> &DiscreteGenerator {
        &self.op
    }

    /// Solves from the initial guess `F / delta`, or from `warm` rescaled to
    /// the new `delta` (its level moved to `u(0) delta_old / delta`).
    pub fn solve(&self, delta: f64, warm: Option<&CellSolution>) -> Result<CellSolution> {
        let mut u: Vec<f64> = match warm {
            Some(prev) => {
                let old = self.op.restrict(&prev.u);
                let origin = prev.u.at_origin();
                let shift = origin * prev.delta / delta - origin;
                old.iter().map(|v| v + shift).collect()
            }
            None => self.f.iter().map(|v| v / delta).collect(),
        };
        let stats = solve_interior(&self.op, delta, &self.f, &mut u, &self.solver)?;
        Ok(CellSolution {
            delta,
            u: self.op.extend(&u),
            stats,
        })
    }

    /// Max-norm of `-L_h w + lambda - F` over interior nodes, where
    /// `w = u - u(0)` and `lambda = delta u(0)`.
    pub fn corrector_defect(&self, sol: &CellSolution) -> f64 {
        let lambda = sol.delta * sol.u.at_origin();
        let w = self.op.restrict(&sol.u.map(|v| v - sol.u.at_origin()));
        let mut out = vec![0.0; w.len()];
        self.op.apply_shifted(0.0, &w, &mut out);
        out.iter()
            .zip(&self.f)
            .fold(0.0, |m, (a, f)| m.max((a + lambda - f).abs()))
    }
}

pub fn solve_cell(
    delta: f64,
    f: &GridFunction,
    p: &ModelParams,
    cfg: &CellConfig,
) -> Result<GridFunction> {
    Ok(CellProblem::new(f, p, cfg.scheme, cfg.solver)
        .solve(delta, None)?
        .u)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderEntry {
    pub delta: f64,
    /// `delta u_delta(0)`.
    pub lambda: f64,
    /// `max |delta u_delta(y) - delta u_delta(0)|` on `|y|_inf <= R/2`.
    pub spread: f64,
    pub lipschitz: f64,
    pub growth_constant: f64,
    pub sup_norm: f64,
    pub iterations: usize,
    pub residual: f64,
}

pub struct LadderRun {
    pub entries: Vec<LadderEntry>,
    pub solutions: Vec<CellSolution>,
}

fn check_ladder(deltas: &[f64]) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("delta ladder is empty".into()));
    }
    if deltas.iter().any(|&d| !(d > 0.0 && d <= 1.0)) || deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(
            "delta ladder must be strictly decreasing in (0, 1]".into(),
        ));
    }
    Ok(())
}

pub fn ergodic_constant_ladder(problem: &CellProblem, deltas: &[f64]) -> Result<LadderRun> {
    check_ladder(deltas)?;
    let half = problem.op.grid().radius() / 2.0;
    let mut entries = Vec::with_capacity(deltas.len());
    let mut solutions: Vec<CellSolution> = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let sol = problem.solve(delta, solutions.last())?;
        let origin = sol.u.at_origin();
        let mut spread: f64 = 0.0;
        sol.u.for_each_inner(half, |_, _, _, _, v| {
            spread = spread.max((delta * (v - origin)).abs())
        });
        entries.push(LadderEntry {
            delta,
            lambda: delta * origin,
            spread,
            lipschitz: lipschitz_diagnostic(&sol.u),
            growth_constant: growth_diagnostic(&sol.u),
            sup_norm: sol.u.max_abs(),
            iterations: sol.stats.iterations,
            residual: sol.stats.residual,
        });
        solutions.push(sol);
    }
    Ok(LadderRun { entries, solutions })
}

/// `w = u_delta - u_delta(0)` at the last ladder entry, with its defect as a
/// solution of the cell equation.
pub fn corrector(
    problem: &CellProblem,
    deltas: &[f64],
    delta_min: f64,
) -> Result<(GridFunction, f64)> {
    if !(delta_min > 0.0 && delta_min <= 0.1) {
        return Err(Error::InvalidArgument(format!(
            "delta_min = {delta_min} outside (0, 0.1]"
        )));
    }
    let mut ladder: Vec<f64> = deltas.iter().copied().filter(|&d| d > delta_min).collect();
    ladder.push(delta_min);
    let run = ergodic_constant_ladder(problem, &ladder)?;
    let sol = run.solutions.last().expect("nonempty ladder");
    let origin = sol.u.at_origin();
    Ok((sol.u.map(|v| v - origin), problem.corrector_defect(sol)))
}

const NEIGHBOR_OFFSETS: [[i64; 3]; 13] = [
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 1, 0],
    [1, -1, 0],
    [1, 0, 1],
    [1, 0, -1],
    [0, 1, 1],
    [0, 1, -1],
    [1, 1, 1],
    [1, 1, -1],
    [1, -1, 1],
    [1, -1, -1],
];

/// Largest difference quotient over axis and diagonal neighbour pairs with
/// both ends in `|y|_inf <= R/2`.
pub fn lipschitz_diagnostic(u: &GridFunction) -> f64 {
    let grid = u.grid;
    let range = grid.inner_range(grid.radius() / 2.0);
    let (lo, hi) = (*range.start() as i64, *range.end() as i64);
    let h = grid.h();
    let mut worst: f64 = 0.0;
    u.for_each_inner(grid.radius() / 2.0, |i1, i2, i3, _, v| {
        for d in NEIGHBOR_OFFSETS {
            let j = [i1 as i64 + d[0], i2 as i64 + d[1], i3 as i64 + d[2]];
            if j.iter().any(|&k| k < lo || k > hi) {
                continue;
            }
            let w = u.at(j[0] as usize, j[1] as usize, j[2] as usize);
            let dist = h * ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt();
            worst = worst.max((w - v).abs() / dist);
        }
    });
    worst
}

pub fn log_envelope(y: &FastState) -> f64 {
    1.0 + (y.gauge4() + 1.0).ln()
}

/// Smallest `C` with `|u(y) - u(0)| <= C [1 + log(rho(y) + 1)]` on
/// `|y|_inf <= R/2`.
pub fn growth_diagnostic(u: &GridFunction) -> f64 {
    let origin = u.at_origin();
    let mut c: f64 = 0.0;
    u.for_each_inner(u.grid.radius() / 2.0, |_, _, _, y, v| {
        c = c.max((v - origin).abs() / log_envelope(y));
    });
    c
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarrierCheck {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
}

/// Checks `|u| <= |F|_inf / delta + tol` and the linear-growth barrier
/// `u <= C_l (U0 + 2 M0 / delta) + tol`, where `M0` is one plus the largest
/// positive part of `F + L U0 - delta U0` over the nodes in `B_r0`.
pub fn barrier_checks(
    u: &GridFunction,
    f: &GridFunction,
    delta: f64,
    f_bounds: (f64, f64),
    p: &ModelParams,
    tol: f64,
) -> Result<Vec<BarrierCheck>> {
    let sup_f = f.max_abs();
    let sup_u = u.max_abs();
    let mut checks = vec![BarrierCheck {
        name: "sup_norm".into(),
        pass: sup_u <= sup_f / delta + tol,
        measured: sup_u,
        bound: sup_f / delta + tol,
    }];
    let barrier = linear_growth_supersolution(delta, f_bounds, p)?;
    let profile = barrier.profile();
    let mut m0: f64 = 0.0;
    for (idx, &fv) in f.values.iter().enumerate() {
        let n = u.grid.nodes_per_axis();
        let y = u.grid.point(idx % n, (idx / n) % n, idx / (n * n));
        if y.norm() <= barrier.r0 {
            let lu = apply_generator(&profile.eval(&y), &y, p);
            m0 = m0.max(fv + lu - delta * profile.value(&y));
        }
    }
    let m0 = m0 + 1.0;
    let sup = barrier.supersolution(m0, delta);
    let n = u.grid.nodes_per_axis();
    let mut worst = f64::NEG_INFINITY;
    for (idx, &v) in u.values.iter().enumerate() {
        let y = u.grid.point(idx % n, (idx / n) % n, idx / (n * n));
        worst = worst.max(v - sup(&y));
    }
    checks.push(BarrierCheck {
        name: "linear_growth_barrier".into(),
        pass: worst <= tol,
        measured: worst,
        bound: tol,
    });
    Ok(checks)
}

pub fn write_ladder_csv(entries: &[LadderEntry], mut w: impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "delta,lambda,spread,lipschitz,growth_constant,sup_norm,iterations,residual"
    )?;
    for e in entries {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            e.delta,
            e.lambda,
            e.spread,
            e.lipschitz,
            e.growth_constant,
            e.sup_norm,
            e.iterations,
            e.residual
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{shifted_log_barrier_terms, TestFunction};

    fn cos_sum(grid: Grid3) -> GridFunction {
        GridFunction::from_fn(grid, |y| y.y1.cos() + y.y2.cos() + y.y3.cos())
    }

    fn small_config() -> CellConfig {
        CellConfig {
            radius: 3.0,
            h: 0.25,
            ..Default::default()
        }
    }

    #[test]
    fn constant_source_gives_constant_solution() {
        let cfg = small_config();
        let grid = cfg.grid().unwrap();
        let f = GridFunction::from_fn(grid, |_| 2.0);
        let u = solve_cell(0.1, &f, &ModelParams::default(), &cfg).unwrap();
        assert!(u.values.iter().all(|&v| (v - 20.0).abs() < 1e-12));
        let problem = CellProblem::new(&f, &ModelParams::default(), cfg.scheme, cfg.solver);
        let run = ergodic_constant_ladder(&problem, &[0.4, 0.2, 0.1]).unwrap();
        for e in &run.entries {
            assert!((e.lambda - 2.0).abs() < 1e-12);
            assert_eq!(e.spread, 0.0);
        }
        let (w, defect) = corrector(&problem, &[0.4, 0.2], 0.1).unwrap();
        assert_eq!(w.max_abs(), 0.0);
        assert!(defect < 1e-10);
    }

    #[test]
    fn ladder_rejects_bad_deltas() {
        let cfg = small_config();
        let f = cos_sum(cfg.grid().unwrap());
        let problem = CellProblem::new(&f, &ModelParams::default(), cfg.scheme, cfg.solver);
        assert!(ergodic_constant_ladder(&problem, &[0.1, 0.2]).is_err());
        assert!(ergodic_constant_ladder(&problem, &[]).is_err());
        assert!(corrector(&problem, &[0.4], 0.5).is_err());
    }

    #[test]
    fn corrector_vanishes_at_origin_and_has_small_defect() {
        let cfg = small_config();
        let f = cos_sum(cfg.grid().unwrap());
        let problem = CellProblem::new(&f, &ModelParams::default(), cfg.scheme, cfg.solver);
        let (w, defect) = corrector(&problem, &[0.4, 0.2], 0.1).unwrap();
        assert_eq!(w.at_origin(), 0.0);
        let bound = 0.1 * w.max_abs() + 1e-6;
        assert!(defect <= bound, "{defect} > {bound}");
    }

    #[test]
    fn monotone_scheme_maximum_principle() {
        // Random right-hand sides: u >= -|F^-|_inf / delta.
        let grid = Grid3::new(2.0, 0.25).unwrap();
        let p = ModelParams::default();
        let mut state = 12345u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.2
        };
        for _ in 0..3 {
            let f = GridFunction::from_fn(grid, |_| next());
            let neg = f.values.iter().fold(0.0f64, |m, &v| m.max(-v));
            let cfg = CellConfig {
                radius: 2.0,
                h: 0.25,
                scheme: Scheme::Monotone,
                ..Default::default()
            };
            let u = solve_cell(0.3, &f, &p, &cfg).unwrap();
            let min = u.values.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -neg / 0.3 - 1e-7, "{min} vs {}", -neg / 0.3);
        }
    }

    #[test]
    fn lipschitz_and_growth_on_simple_functions() {
        let grid = Grid3::new(4.0, 0.5).unwrap();
        assert_eq!(
            lipschitz_diagnostic(&GridFunction::from_fn(grid, |_| 1.5)),
            0.0
        );
        assert_eq!(
            growth_diagnostic(&GridFunction::from_fn(grid, |_| 1.5)),
            0.0
        );
        let lin = GridFunction::from_fn(grid, |y| y.y1);
        assert!((lipschitz_diagnostic(&lin) - 1.0).abs() < 1e-12);
        let exact = GridFunction::from_fn(grid, |y| {
            if y.norm() == 0.0 {
                0.0
            } else {
                log_envelope(y)
            }
        });
        assert!((growth_diagnostic(&exact) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn barrier_checks_pass_for_cell_solution() {
        let cfg = small_config();
        let grid = cfg.grid().unwrap();
        let f = cos_sum(grid);
        let p = ModelParams::default();
        let u = solve_cell(0.2, &f, &p, &cfg).unwrap();
        for c in barrier_checks(&u, &f, 0.2, (3.0, 1.0), &p, 1e-6).unwrap() {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn log_barrier_consistency_improves_with_h() {
        let p = ModelParams::default();
        let err = |h: f64| {
            let grid = Grid3::new(4.0, h).unwrap();
            let f = TestFunction::LogBarrier {
                c1: 1.0,
                shift: 1.0,
            };
            let op = discretize_generator(grid, &p, Scheme::Centered);
            let lu = op.apply(&GridFunction::from_fn(grid, |y| f.value(y)));
            let mut worst: f64 = 0.0;
            lu.for_each_inner(2.0, |_, _, _, y, v| {
                let (tr, dr) = shifted_log_barrier_terms(y, 1.0, &p);
                worst = worst.max((v - tr - dr).abs());
            });
            worst
        };
        let (coarse, fine) = (err(0.25), err(0.125));
        assert!(fine < coarse / 2.0, "{coarse} -> {fine}");
    }
}
