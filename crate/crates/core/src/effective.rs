//! Effective Hamiltonian and datum by averaging against the invariant
//! measure, and an explicit monotone solver for the effective Cauchy
//! problem `-V_t + Hbar(x, DV, D^2 V) + a V = 0`, `V(T) = gbar`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fast_statistic, ControlModel, ModelParams, MAX_SLOW};
use crate::operator::FastState;
use crate::rng::{normal_pair, stream, Domain};
use crate::sde::{
    em_step, estimate_invariant_integral, sample_mean, InvariantEstimate, TrajectoryConfig,
};

fn trace_diffusion(m: &ControlModel, xmat: &[f64], n: usize) -> f64 {
    // sigma_tilde = c I, so tr(sigma sigma^T X) = c^2 tr X.
    let c = m.sigma_scale();
    c * c * (0..n).map(|i| xmat[i * n + i]).sum::<f64>()
}

fn check_dims(x: &[f64], p: &[f64], xmat: &[f64]) -> Result<usize> {
    let n = x.len();
    if n == 0 || n > MAX_SLOW || p.len() != n || xmat.len() != n * n {
        return Err(Error::InvalidArgument(format!(
            "slow dimension mismatch: x {}, p {}, X {}",
            x.len(),
            p.len(),
            xmat.len()
        )));
    }
    Ok(n)
}

/// `min_u { -tr(sigma sigma^T X) - phi . p - f(x, y, u) }`; `xmat` is
/// row-major `n x n`.
pub fn hamiltonian_pointwise(
    m: &ControlModel,
    x: &[f64],
    y: &FastState,
    p: &[f64],
    xmat: &[f64],
) -> Result<f64> {
    let n = check_dims(x, p, xmat)?;
    let tr = trace_diffusion(m, xmat, n);
    let mut phi = [0.0; MAX_SLOW];
    let mut best = f64::INFINITY;
    for &u in m.controls() {
        m.slow_drift(x, y, u, &mut phi[..n]);
        let dot: f64 = phi[..n].iter().zip(p).map(|(a, b)| a * b).sum();
        best = best.min(-tr - dot - m.running_cost(x, y, u));
    }
    Ok(best)
}

/// Monte Carlo average of [`hamiltonian_pointwise`] along the stationary
/// chain. This is the generic route; [`EffectiveField`] uses the factored
/// form instead.
pub fn effective_hamiltonian(
    m: &ControlModel,
    x: &[f64],
    p: &[f64],
    xmat: &[f64],
    cfg: &TrajectoryConfig,
    params: &ModelParams,
) -> Result<InvariantEstimate> {
    check_dims(x, p, xmat)?;
    if m.running_cost_fast_weight(x) == 0.0 {
        return Ok(InvariantEstimate::exact(hamiltonian_pointwise(
            m,
            x,
            &FastState::ORIGIN,
            p,
            xmat,
        )?));
    }
    estimate_invariant_integral(
        |y| hamiltonian_pointwise(m, x, y, p, xmat).expect("dimensions checked"),
        cfg,
        params,
    )
}

/// Monte Carlo average of `g(x, .)` along the stationary chain.
pub fn effective_datum(
    m: &ControlModel,
    x: &[f64],
    cfg: &TrajectoryConfig,
    params: &ModelParams,
) -> Result<InvariantEstimate> {
    if m.terminal_fast_weight() == 0.0 {
        return Ok(InvariantEstimate::exact(m.terminal_slow(x)));
    }
    estimate_invariant_integral(|y| m.terminal(x, y), cfg, params)
}

/// Statistics of the invariant measure the registry models depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastMoments {
    pub cos_y3: InvariantEstimate,
}

pub fn estimate_fast_moments(cfg: &TrajectoryConfig, params: &ModelParams) -> Result<FastMoments> {
    Ok(FastMoments {
        cos_y3: estimate_invariant_integral(fast_statistic, cfg, params)?,
    })
}

/// `Hbar` and `gbar` of a registry model with `E_mu[cos y3]` plugged in.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveField {
    model: ControlModel,
    moments: FastMoments,
    datum_offset: f64,
}

impl EffectiveField {
    pub fn new(model: ControlModel, moments: FastMoments) -> Self {
        EffectiveField {
            model,
            moments,
            datum_offset: 0.0,
        }
    }

    /// Same field with `gbar` raised by the constant `c`.
    pub fn with_datum_offset(&self, c: f64) -> Self {
        EffectiveField {
            datum_offset: self.datum_offset + c,
            ..self.clone()
        }
    }

    pub fn model(&self) -> &ControlModel {
        &self.model
    }

    pub fn moments(&self) -> &FastMoments {
        &self.moments
    }

    /// Same field with `E_mu[cos y3]` moved by `shift`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut f = self.clone();
        f.moments.cos_y3.mean += shift;
        f
    }

    fn lambda(&self) -> f64 {
        self.moments.cos_y3.mean
    }

    /// `fbar(x)`, the same for every control.
    pub fn running_cost(&self, x: &[f64]) -> f64 {
        self.model.running_cost_fast_weight(x) * self.lambda()
    }

    pub fn hamiltonian(&self, x: &[f64], p: &[f64], xmat: &[f64]) -> Result<f64> {
        let n = check_dims(x, p, xmat)?;
        let tr = trace_diffusion(&self.model, xmat, n);
        let mut phi = [0.0; MAX_SLOW];
        let mut best = f64::INFINITY;
        for &u in self.model.controls() {
            self.model
                .slow_drift(x, &FastState::ORIGIN, u, &mut phi[..n]);
            let dot: f64 = phi[..n].iter().zip(p).map(|(a, b)| a * b).sum();
            best = best.min(-tr - dot);
        }
        Ok(best - self.running_cost(x))
    }

    /// Standard error of [`Self::hamiltonian`] inherited from the moment.
    pub fn hamiltonian_std_error(&self, x: &[f64]) -> f64 {
        self.model.running_cost_fast_weight(x).abs() * self.moments.cos_y3.std_error
    }

    pub fn datum(&self, x: &[f64]) -> f64 {
        self.model.terminal_slow(x)
            + self.model.terminal_fast_weight() * self.lambda()
            + self.datum_offset
    }

    pub fn datum_std_error(&self) -> f64 {
        self.model.terminal_fast_weight().abs() * self.moments.cos_y3.std_error
    }
}

/// Averages `g(x, Y_t)` over independent fast chains started at `y0` and
/// run to time `t_end`: the long-time limit of the stabilization problem.
#[allow(clippy::too_many_arguments)]
pub fn stabilization_average(
    m: &ControlModel,
    x: &[f64],
    y0: FastState,
    t_end: f64,
    dt: f64,
    n_replicas: usize,
    seed: u64,
    params: &ModelParams,
) -> Result<InvariantEstimate> {
    if !(t_end > 0.0 && dt > 0.0 && dt <= t_end) || n_replicas < 2 {
        return Err(Error::InvalidArgument(format!(
            "stabilization: t = {t_end}, dt = {dt}, replicas = {n_replicas}"
        )));
    }
    let steps = (t_end / dt).round() as u64;
    let values: Vec<Result<f64>> = (0..n_replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Domain::Stabilization, r);
            let mut y = y0;
            for step in 0..steps {
                y = em_step(&y, dt, normal_pair(&mut rng), params);
                if !y.is_finite() {
                    return Err(Error::NumericalBlowup { chain: r, step });
                }
            }
            Ok(m.terminal(x, &y))
        })
        .collect();
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(sample_mean(&values))
}

/// Uniform grid on `[-W, W]^n` with `W` a whole number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowGrid {
    pub n_dim: usize,
    pub half_width: f64,
    pub dx: f64,
    pub nodes_per_axis: usize,
}

impl SlowGrid {
    pub fn new(n_dim: usize, half_width: f64, dx: f64) -> Result<Self> {
        if !(1..=MAX_SLOW).contains(&n_dim) || !(dx > 0.0) || !(half_width >= 2.0 * dx) {
            return Err(Error::InvalidArgument(format!(
                "slow grid: n = {n_dim}, W = {half_width}, dx = {dx}"
            )));
        }
        let half = (half_width / dx).ceil() as usize;
        Ok(SlowGrid {
            n_dim,
            half_width: half as f64 * dx,
            dx,
            nodes_per_axis: 2 * half + 1,
        })
    }

    /// Grid whose boundary sits at least `3 C_phi T + 5 C_sigma sqrt(T)`
    /// beyond the reported box `|x|_inf <= report_half_width`.
    pub fn for_report(
        m: &ControlModel,
        report_half_width: f64,
        dx: f64,
        params: &ModelParams,
    ) -> Result<Self> {
        let b = m.bounds();
        let margin = 3.0 * b.c_phi * params.horizon + 5.0 * b.c_sigma * params.horizon.sqrt();
        Self::new(params.n_slow, report_half_width + margin, dx)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes_per_axis.pow(self.n_dim as u32)
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx
    }

    pub fn point(&self, idx: usize) -> [f64; MAX_SLOW] {
        let n = self.nodes_per_axis;
        let mut x = [0.0; MAX_SLOW];
        x[0] = self.coord(idx % n);
        if self.n_dim == 2 {
            x[1] = self.coord(idx / n);
        }
        x
    }

    fn stride(&self, axis: usize) -> usize {
        if axis == 0 {
            1
        } else {
            self.nodes_per_axis
        }
    }

    fn axis_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.stride(axis)) % self.nodes_per_axis
    }

    fn is_interior(&self, idx: usize) -> bool {
        (0..self.n_dim).all(|a| {
            let i = self.axis_index(idx, a);
            i > 0 && i + 1 < self.nodes_per_axis
        })
    }

    /// Multilinear interpolation of nodal values at `x`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let n = self.nodes_per_axis;
        let mut base = [0usize; MAX_SLOW];
        let mut frac = [0.0; MAX_SLOW];
        for a in 0..self.n_dim {
            let s = ((x[a] + self.half_width) / self.dx).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << self.n_dim) {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..self.n_dim {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx += (base[a] + bit) * self.stride(a);
            }
            if w != 0.0 {
                acc += w * values[idx];
            }
        }
        acc
    }
}

/// Largest stable step of the explicit scheme:
/// `dt (2 n c^2 / dx^2 + sum_i max|phi_i| / dx) <= 1`.
pub fn max_stable_timestep(m: &ControlModel, grid: &SlowGrid) -> f64 {
    let c2 = m.sigma_scale() * m.sigma_scale();
    let rate = 2.0 * grid.n_dim as f64 * c2 / (grid.dx * grid.dx) + m.max_drift_speed() / grid.dx;
    1.0 / rate
}

/// Feedback control chosen by the scheme: index into the model's control
/// list per time step and node.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub grid: SlowGrid,
    pub dt: f64,
    /// `choice[j][node]` is the argmin used to step from `t_{j+1}` to `t_j`.
    pub choice: Vec<Vec<u8>>,
}

impl PolicyTable {
    /// Control index at time `t` and state `x` (nearest node, the step
    /// covering `t`).
    pub fn control_at(&self, t: f64, x: &[f64]) -> usize {
        let steps = self.choice.len();
        let j = ((t / self.dt).floor().max(0.0) as usize).min(steps - 1);
        let n = self.grid.nodes_per_axis;
        let mut idx = 0;
        for a in 0..self.grid.n_dim {
            let i = ((x[a] + self.grid.half_width) / self.grid.dx)
                .round()
                .clamp(0.0, (n - 1) as f64) as usize;
            idx += i * self.grid.stride(a);
        }
        self.choice[j][idx] as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveSolution {
    pub grid: SlowGrid,
    pub dt: f64,
    pub n_timesteps: usize,
    /// Saved time levels, latest time first.
    pub times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    pub policy: Option<PolicyTable>,
}

impl EffectiveSolution {
    /// `V(0, .)`.
    pub fn initial(&self) -> &[f64] {
        self.snapshots.last().expect("at least the terminal level")
    }

    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(self.initial(), x)
    }

    /// Rows `t, x.., V` for nodes with `|x|_inf <= report_half_width`.
    pub fn write_csv(&self, report_half_width: f64, mut w: impl Write) -> std::io::Result<()> {
        let names: Vec<String> = (1..=self.grid.n_dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "t,{},V", names.join(","))?;
        for (t, v) in self.times.iter().zip(&self.snapshots).rev() {
            for (idx, value) in v.iter().enumerate() {
                let x = self.grid.point(idx);
                if x[..self.grid.n_dim]
                    .iter()
                    .any(|c| c.abs() > report_half_width + 1e-12)
                {
                    continue;
                }
                let xs: Vec<String> = x[..self.grid.n_dim].iter().map(|c| c.to_string()).collect();
                writeln!(w, "{},{},{}", t, xs.join(","), value)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeConfig {
    /// Half-width of the reported box.
    pub report_half_width: f64,
    pub dx: f64,
    /// Time steps; `None` picks the smallest count within the stability
    /// bound scaled by `cfl_fraction`.
    pub n_timesteps: Option<usize>,
    pub cfl_fraction: f64,
    /// Number of saved time levels besides `t = T`.
    pub snapshots: usize,
    pub store_policy: bool,
}

impl Default for PdeConfig {
    fn default() -> Self {
        PdeConfig {
            report_half_width: 2.0,
            dx: 0.05,
            n_timesteps: None,
            cfl_fraction: 0.9,
            snapshots: 10,
            store_policy: false,
        }
    }
}

impl PdeConfig {
    pub fn timesteps_for(&self, m: &ControlModel, grid: &SlowGrid, horizon: f64) -> usize {
        self.n_timesteps.unwrap_or_else(|| {
            (horizon / (self.cfl_fraction * max_stable_timestep(m, grid)))
                .ceil()
                .max(1.0) as usize
        })
    }
}

/// Upwind drift term `max_u phi(u) . DV / dx` at an interior node and
/// the index of the maximizing control (the argmin of `Hbar`).
fn best_drift(m: &ControlModel, grid: &SlowGrid, v: &[f64], idx: usize) -> (f64, u8) {
    let n_dim = grid.n_dim;
    let x = grid.point(idx);
    let mut phi = [0.0; MAX_SLOW];
    let mut best = (f64::NEG_INFINITY, 0u8);
    for (k, &u) in m.controls().iter().enumerate() {
        m.slow_drift(&x[..n_dim], &FastState::ORIGIN, u, &mut phi[..n_dim]);
        let mut drift = 0.0;
        for a in 0..n_dim {
            let s = grid.stride(a);
            drift += if phi[a] > 0.0 {
                phi[a] * (v[idx + s] - v[idx])
            } else {
                phi[a] * (v[idx] - v[idx - s])
            };
        }
        if drift > best.0 {
            best = (drift, k as u8);
        }
    }
    (best.0 / grid.dx, best.1)
}

/// One backward step `V_j = e^{-a dt} (V_{j+1} - dt Hbar(x, DV, D^2 V))`
/// at interior nodes, faces by linear extrapolation.
#[allow(clippy::too_many_arguments)]
fn backward_step(
    m: &ControlModel,
    grid: &SlowGrid,
    running: &[f64],
    dt: f64,
    discount: f64,
    v: &[f64],
    out: &mut [f64],
    choice: &mut [u8],
) {
    let c2 = m.sigma_scale() * m.sigma_scale();
    let inv_dx2 = 1.0 / (grid.dx * grid.dx);
    out.par_iter_mut()
        .zip(choice.par_iter_mut())
        .enumerate()
        .for_each(|(idx, (o, ch))| {
            if !grid.is_interior(idx) {
                return;
            }
            let mut diffusion = 0.0;
            for a in 0..grid.n_dim {
                let s = grid.stride(a);
                diffusion += v[idx + s] - 2.0 * v[idx] + v[idx - s];
            }
            let (drift, k) = best_drift(m, grid, v, idx);
            // -Hbar = c^2 lap V + max_u phi . DV + fbar
            *o = discount * (v[idx] + dt * (c2 * diffusion * inv_dx2 + drift + running[idx]));
            *ch = k;
        });
    extrapolate_faces(grid, out);
}

fn extrapolate_faces(grid: &SlowGrid, v: &mut [f64]) {
    let n = grid.nodes_per_axis;
    for a in 0..grid.n_dim {
        let s = grid.stride(a);
        for idx in 0..v.len() {
            let i = grid.axis_index(idx, a);
            if i == 0 {
                v[idx] = 2.0 * v[idx + s] - v[idx + 2 * s];
            } else if i == n - 1 {
                v[idx] = 2.0 * v[idx - s] - v[idx - 2 * s];
            }
        }
    }
}

pub fn solve_effective_pde(
    field: &EffectiveField,
    grid: &SlowGrid,
    n_timesteps: usize,
    params: &ModelParams,
    cfg: &PdeConfig,
) -> Result<EffectiveSolution> {
    if grid.n_dim != params.n_slow {
        return Err(Error::InvalidArgument(format!(
            "slow grid has dimension {}, params.n_slow = {}",
            grid.n_dim, params.n_slow
        )));
    }
    if n_timesteps == 0 {
        return Err(Error::InvalidArgument(
            "n_timesteps must be positive".into(),
        ));
    }
    let dt = params.horizon / n_timesteps as f64;
    let bound = max_stable_timestep(field.model(), grid);
    if dt > bound * (1.0 + 1e-12) {
        return Err(Error::InvalidTimestep { dt, bound });
    }
    let n_dim = grid.n_dim;
    let running: Vec<f64> = (0..grid.n_nodes())
        .map(|i| field.running_cost(&grid.point(i)[..n_dim]))
        .collect();
    let mut v: Vec<f64> = (0..grid.n_nodes())
        .map(|i| field.datum(&grid.point(i)[..n_dim]))
        .collect();
    let mut next = v.clone();
    let discount = (-params.a * dt).exp();
    let save_every = (n_timesteps / cfg.snapshots.max(1)).max(1);
    let mut times = vec![params.horizon];
    let mut snapshots = vec![v.clone()];
    let mut policy = cfg.store_policy.then(|| PolicyTable {
        grid: *grid,
        dt,
        choice: vec![Vec::new(); n_timesteps],
    });
    let mut choice = vec![0u8; grid.n_nodes()];
    for step in (0..n_timesteps).rev() {
        backward_step(
            field.model(),
            grid,
            &running,
            dt,
            discount,
            &v,
            &mut next,
            &mut choice,
        );
        if let Some(p) = policy.as_mut() {
            p.choice[step] = choice.clone();
        }
        std::mem::swap(&mut v, &mut next);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalBlowup {
                chain: 0,
                step: step as u64,
            });
        }
        if step == 0 || step % save_every == 0 {
            times.push(step as f64 * dt);
            snapshots.push(v.clone());
        }
    }
    Ok(EffectiveSolution {
        grid: *grid,
        dt,
        n_timesteps,
        times,
        snapshots,
        policy,
    })
}

/// `V(0, x)` on the grid with step `dx` and on the grid with `dx / 2`
/// (each with its own stable step count); the difference is the reported
/// discretization error bound. The band from the moment uncertainty is
/// obtained by re-solving with `E_mu[cos y3]` moved by one standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectiveValue {
    pub value: f64,
    pub grid_error_bound: f64,
    pub std_error: f64,
    pub coarse_value: f64,
}

pub fn effective_value_at(
    field: &EffectiveField,
    x: &[f64],
    params: &ModelParams,
    cfg: &PdeConfig,
) -> Result<(EffectiveValue, EffectiveSolution)> {
    let m = field.model();
    let solve = |f: &EffectiveField, dx: f64| -> Result<EffectiveSolution> {
        let grid = SlowGrid::for_report(m, cfg.report_half_width, dx, params)?;
        let c = PdeConfig { dx, ..*cfg };
        let steps = c.timesteps_for(m, &grid, params.horizon);
        solve_effective_pde(f, &grid, steps, params, &c)
    };
    let coarse = solve(field, cfg.dx)?;
    let fine = solve(field, cfg.dx / 2.0)?;
    let value = fine.value_at(x);
    let coarse_value = coarse.value_at(x);
    let se = field.moments().cos_y3.std_error;
    let std_error = if se > 0.0 {
        let up = solve(&field.shifted(se), cfg.dx)?.value_at(x);
        let down = solve(&field.shifted(-se), cfg.dx)?.value_at(x);
        0.5 * (up - down).abs()
    } else {
        0.0
    };
    Ok((
        EffectiveValue {
            value,
            grid_error_bound: (value - coarse_value).abs(),
            std_error,
            coarse_value,
        },
        fine,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelId;

    fn field(id: ModelId, lambda: f64) -> EffectiveField {
        EffectiveField::new(
            ControlModel::new(id),
            FastMoments {
                cos_y3: InvariantEstimate {
                    mean: lambda,
                    std_error: 0.0,
                    effective_samples: 1.0,
                },
            },
        )
    }

    fn pde(id: ModelId, lambda: f64, params: &ModelParams, dx: f64) -> EffectiveSolution {
        let f = field(id, lambda);
        let grid = SlowGrid::for_report(f.model(), 2.0, dx, params).unwrap();
        let cfg = PdeConfig {
            dx,
            ..Default::default()
        };
        let steps = cfg.timesteps_for(f.model(), &grid, params.horizon);
        solve_effective_pde(&f, &grid, steps, params, &cfg).unwrap()
    }

    #[test]
    fn pointwise_hamiltonian_examples() {
        let lin = ControlModel::new(ModelId::UncontrolledLinear);
        let y = FastState::new(0.3, -1.0, 2.0);
        let h = hamiltonian_pointwise(&lin, &[0.5], &y, &[1.0], &[2.0]).unwrap();
        assert!((h + 0.25 * 2.0).abs() < 1e-15);
        let bb = ControlModel::new(ModelId::BangBang);
        let h = hamiltonian_pointwise(&bb, &[0.0], &FastState::new(0.0, 0.0, 0.0), &[2.0], &[1.0])
            .unwrap();
        assert!((h - (-0.25 - 2.0 - 1.0)).abs() < 1e-15);
        let cos = ControlModel::new(ModelId::CosRunningCost);
        let y = FastState::new(1.0, 1.0, 0.7);
        let h = hamiltonian_pointwise(&cos, &[0.4], &y, &[0.0], &[0.0]).unwrap();
        assert_eq!(h, -cos.running_cost(&[0.4], &y, 0.0));
        assert!(hamiltonian_pointwise(&cos, &[0.4], &y, &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn factored_hamiltonian_matches_monte_carlo_route() {
        let params = ModelParams::default();
        let cfg = TrajectoryConfig::default().with_steps(400_000, 20_000);
        let moments = estimate_fast_moments(&cfg, &params).unwrap();
        for id in ModelId::ALL {
            let m = ControlModel::new(id);
            let f = EffectiveField::new(m.clone(), moments);
            let (x, p, xm) = ([0.3], [-1.5], [0.8]);
            let mc = effective_hamiltonian(&m, &x, &p, &xm, &cfg, &params).unwrap();
            // Same chain, so the two agree to rounding.
            assert!(
                (mc.mean - f.hamiltonian(&x, &p, &xm).unwrap()).abs() < 1e-10,
                "{id:?}"
            );
            let g = effective_datum(&m, &x, &cfg, &params).unwrap();
            assert!((g.mean - f.datum(&x)).abs() < 1e-10, "{id:?}");
        }
        let lin = ControlModel::new(ModelId::UncontrolledLinear);
        let h = effective_hamiltonian(&lin, &[1.0], &[1.0], &[4.0], &cfg, &params).unwrap();
        assert_eq!((h.mean, h.std_error), (-1.0, 0.0));
    }

    #[test]
    fn effective_hamiltonian_is_antitone_in_x() {
        let f = field(ModelId::BangBang, 0.47);
        let mut s = 99u64;
        let mut next = move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        for _ in 0..100 {
            let x = [next(), next()];
            let p = [next(), next()];
            let a = [next(), next(), 0.0, next()];
            let xm = [a[0], a[1], a[1], a[3]];
            // X' = X + B B^T is larger in the semidefinite order.
            let b = [next(), next(), next(), next()];
            let bbt = [
                b[0] * b[0] + b[1] * b[1],
                b[0] * b[2] + b[1] * b[3],
                b[0] * b[2] + b[1] * b[3],
                b[2] * b[2] + b[3] * b[3],
            ];
            let xp: Vec<f64> = xm.iter().zip(&bbt).map(|(u, v)| u + v).collect();
            assert!(
                f.hamiltonian(&x, &p, &xm).unwrap() >= f.hamiltonian(&x, &p, &xp).unwrap() - 1e-12
            );
        }
    }

    #[test]
    fn hamiltonian_regularity_in_x() {
        let f = field(ModelId::CosRunningCost, 0.47);
        let c = f.model().bounds().lip_constant_l;
        for i in 0..200 {
            let x = -3.0 + 0.03 * i as f64;
            let (p, xm) = ([1.3], [-0.7]);
            let d = (f.hamiltonian(&[x + 1e-3], &p, &xm).unwrap()
                - f.hamiltonian(&[x], &p, &xm).unwrap())
                / 1e-3;
            assert!(d.abs() <= c * (1.0 + 1.3 + 0.7));
        }
    }

    #[test]
    fn uncontrolled_linear_is_reproduced() {
        let params = ModelParams::default();
        let sol = pde(ModelId::UncontrolledLinear, 0.0, &params, 0.05);
        for (t, v) in sol.times.iter().zip(&sol.snapshots) {
            for (idx, value) in v.iter().enumerate() {
                let x = sol.grid.point(idx)[0];
                if x.abs() <= sol.grid.half_width / 2.0 {
                    let exact = (-params.a * (params.horizon - t)).exp() * x;
                    assert!((value - exact).abs() <= 1e-6, "t {t} x {x}");
                }
            }
        }
    }

    fn solve_on(f: &EffectiveField, grid: &SlowGrid, params: &ModelParams) -> EffectiveSolution {
        let cfg = PdeConfig {
            dx: grid.dx,
            ..Default::default()
        };
        let steps = cfg.timesteps_for(f.model(), grid, params.horizon);
        solve_effective_pde(f, grid, steps, params, &cfg).unwrap()
    }

    #[test]
    fn constant_datum_decays_exactly() {
        let params = ModelParams::default();
        let m = ControlModel::new(ModelId::UncontrolledLinear).scaled(0.0);
        let f = EffectiveField::new(
            m,
            FastMoments {
                cos_y3: InvariantEstimate::exact(0.0),
            },
        )
        .with_datum_offset(1.7);
        let grid = SlowGrid::new(1, 3.0, 0.1).unwrap();
        let sol = solve_on(&f, &grid, &params);
        for (t, v) in sol.times.iter().zip(&sol.snapshots) {
            let exact = 1.7 * (-params.a * (params.horizon - t)).exp();
            assert!(v.iter().all(|x| (x - exact).abs() < 1e-14));
        }
    }

    #[test]
    fn datum_shift_propagates_exactly() {
        let params = ModelParams::default();
        let lo = field(ModelId::BangBang, 0.47);
        let hi = lo.with_datum_offset(0.5);
        let grid = SlowGrid::for_report(lo.model(), 2.0, 0.05, &params).unwrap();
        let (a, b) = (solve_on(&lo, &grid, &params), solve_on(&hi, &grid, &params));
        for (t, (va, vb)) in a.times.iter().zip(a.snapshots.iter().zip(&b.snapshots)) {
            let shift = 0.5 * (-params.a * (params.horizon - t)).exp();
            assert!(va.iter().zip(vb).all(|(x, y)| (y - x - shift).abs() < 1e-9));
        }
    }

    #[test]
    fn scheme_is_monotone_and_comparison_holds() {
        let params = ModelParams::default();
        let f = field(ModelId::BangBang, 0.47);
        let grid = SlowGrid::new(1, 3.0, 0.05).unwrap();
        let m = f.model();
        let dt = 0.9 * max_stable_timestep(m, &grid);
        let running: Vec<f64> = (0..grid.n_nodes())
            .map(|i| f.running_cost(&grid.point(i)[..1]))
            .collect();
        let v: Vec<f64> = (0..grid.n_nodes())
            .map(|i| (grid.point(i)[0] * 1.3).sin())
            .collect();
        let step = |v: &[f64]| {
            let mut out = v.to_vec();
            let mut ch = vec![0u8; v.len()];
            backward_step(m, &grid, &running, dt, 0.99, v, &mut out, &mut ch);
            out
        };
        let base = step(&v);
        for node in [5, 17, 60, 61, 100] {
            let mut w = v.clone();
            w[node] += 0.3;
            let raised = step(&w);
            for (idx, (r, b)) in raised.iter().zip(&base).enumerate() {
                if grid.is_interior(idx) {
                    assert!(r >= b, "node {node} lowered {idx}");
                }
            }
        }
        // Ordered data stay ordered.
        let lo = f.with_datum_offset(-0.2);
        let (a, b) = (solve_on(&lo, &grid, &params), solve_on(&f, &grid, &params));
        assert!(a.initial().iter().zip(b.initial()).all(|(x, y)| x <= y));
    }

    #[test]
    fn bang_bang_policy_follows_slope() {
        let params = ModelParams::default();
        let f = field(ModelId::BangBang, 0.47);
        let grid = SlowGrid::for_report(f.model(), 2.0, 0.05, &params).unwrap();
        let cfg = PdeConfig {
            dx: 0.05,
            store_policy: true,
            ..Default::default()
        };
        let steps = cfg.timesteps_for(f.model(), &grid, params.horizon);
        let sol = solve_effective_pde(&f, &grid, steps, &params, &cfg).unwrap();
        let pol = sol.policy.unwrap();
        // gbar = cos x1 decreases on (0, pi): near T the maximizing drift is -1 there.
        assert_eq!(f.model().controls()[pol.control_at(0.999, &[1.0])], -1.0);
        assert_eq!(f.model().controls()[pol.control_at(0.999, &[-1.0])], 1.0);
    }

    #[test]
    fn stabilization_matches_effective_datum() {
        let params = ModelParams::default();
        let m = ControlModel::new(ModelId::CosRunningCost);
        let cfg = TrajectoryConfig::default().with_steps(2_000_000, 20_000);
        let gbar = effective_datum(&m, &[0.3], &cfg, &params).unwrap();
        let long = stabilization_average(
            &m,
            &[0.3],
            FastState::new(1.0, 1.0, 1.0),
            5.0,
            1e-3,
            2000,
            7,
            &params,
        )
        .unwrap();
        assert!(gbar.agrees_with(&long, 4.0), "{gbar:?} {long:?}");
        let again = stabilization_average(
            &m,
            &[0.3],
            FastState::new(1.0, 1.0, 1.0),
            5.0,
            1e-3,
            2000,
            7,
            &params,
        )
        .unwrap();
        assert_eq!(long, again);
    }

    #[test]
    fn explicit_scheme_rejects_unstable_steps() {
        let params = ModelParams::default();
        let f = field(ModelId::BangBang, 0.47);
        let grid = SlowGrid::new(1, 3.0, 0.05).unwrap();
        match solve_effective_pde(&f, &grid, 10, &params, &PdeConfig::default()) {
            Err(Error::InvalidTimestep { dt, bound }) => assert!(dt > bound),
            other => panic!("{other:?}"),
        }
    }
}
