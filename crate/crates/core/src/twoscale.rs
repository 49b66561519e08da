//! Monte Carlo values of the singularly perturbed problem on the coupled
//! slow-fast system, and the epsilon-ladder experiment.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellsolver::GridFunction;
use crate::effective::PolicyTable;
use crate::error::{Error, Result};
use crate::model::{ControlModel, ModelParams, MAX_SLOW};
use crate::operator::FastState;
use crate::rng::{normal_pair, stream, Domain};
use crate::sde::{em_step, sample_mean, InvariantEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledState {
    pub t: f64,
    pub x: [f64; MAX_SLOW],
    pub y: FastState,
}

impl CoupledState {
    pub fn new(t: f64, x: &[f64], y: FastState) -> Self {
        let mut xs = [0.0; MAX_SLOW];
        xs[..x.len()].copy_from_slice(x);
        CoupledState { t, x: xs, y }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    /// Index into the model's control list.
    Fixed(usize),
    Feedback(&'a PolicyTable),
}

impl Policy<'_> {
    fn control(&self, t: f64, x: &[f64]) -> usize {
        match self {
            Policy::Fixed(k) => *k,
            Policy::Feedback(table) => table.control_at(t, x),
        }
    }
}

/// `dt = min(1e-3, eps / 100)`.
pub fn default_dt(eps: f64) -> f64 {
    (eps / 100.0).min(1e-3)
}

/// Identifies one replica: streams `(seed, CoupledFast, index)` and
/// `(seed, CoupledSlow, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaKey {
    pub seed: u64,
    pub index: u64,
}

/// One payoff sample `sum e^{-a(s-t)} f dt + e^{-a(T-t)} g(X_T, Y_T)` along
/// an Euler-Maruyama path; the fast noise is independent of the slow one.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled(
    m: &ControlModel,
    start: &CoupledState,
    eps: f64,
    policy: Policy<'_>,
    dt: f64,
    key: ReplicaKey,
    params: &ModelParams,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps = {eps} must be positive"
        )));
    }
    let bound = eps / 100.0;
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(Error::InvalidTimestep { dt, bound });
    }
    let n = params.n_slow;
    let remaining = params.horizon - start.t;
    if !(remaining >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "start time {} beyond T",
            start.t
        )));
    }
    let steps = (remaining / dt).round() as u64;
    let mut fast = stream(key.seed, Domain::CoupledFast, key.index);
    let mut slow = stream(key.seed, Domain::CoupledSlow, key.index);
    let (mut x, mut y) = (start.x, start.y);
    let noise = (2.0 * dt).sqrt() * m.sigma_scale();
    let step_discount = (-params.a * dt).exp();
    let mut discount = 1.0;
    let mut payoff = 0.0;
    let mut phi = [0.0; MAX_SLOW];
    for step in 0..steps {
        let s = start.t + step as f64 * dt;
        let u = m.controls()[policy.control(s, &x[..n])];
        payoff += discount * m.running_cost(&x[..n], &y, u) * dt;
        m.slow_drift(&x[..n], &y, u, &mut phi[..n]);
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut slow);
            x[i] += phi[i] * dt + noise * z;
        }
        y = em_step(&y, dt / eps, normal_pair(&mut fast), params);
        if !(y.is_finite() && x[..n].iter().all(|v| v.is_finite())) {
            return Err(Error::NumericalBlowup {
                chain: key.index,
                step,
            });
        }
        discount *= step_discount;
    }
    let terminal = (-params.a * remaining).exp();
    Ok(payoff + terminal * m.terminal(&x[..n], &y))
}

/// Mean and standard error over replicas `0..n_samples`.
#[allow(clippy::too_many_arguments)]
pub fn mc_value(
    m: &ControlModel,
    start: &CoupledState,
    eps: f64,
    policy: Policy<'_>,
    dt: f64,
    n_samples: usize,
    seed: u64,
    params: &ModelParams,
) -> Result<InvariantEstimate> {
    mc_value_range(m, start, eps, policy, dt, 0..n_samples as u64, seed, params)
}

/// As [`mc_value`] over an explicit replica range.
#[allow(clippy::too_many_arguments)]
pub fn mc_value_range(
    m: &ControlModel,
    start: &CoupledState,
    eps: f64,
    policy: Policy<'_>,
    dt: f64,
    replicas: std::ops::Range<u64>,
    seed: u64,
    params: &ModelParams,
) -> Result<InvariantEstimate> {
    if replicas.end.saturating_sub(replicas.start) < 100 {
        return Err(Error::InvalidArgument(
            "at least 100 samples required".into(),
        ));
    }
    let samples: Vec<Result<f64>> = replicas
        .into_par_iter()
        .map(|index| {
            simulate_coupled(
                m,
                start,
                eps,
                policy,
                dt,
                ReplicaKey { seed, index },
                params,
            )
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(sample_mean(&samples))
}

/// `C0 (1 + |x|)` with `C0 = (C_f T + C_g)(1 + C_phi T + C_sigma sqrt(2T))`.
pub fn value_bound(m: &ControlModel, x: &[f64], params: &ModelParams) -> f64 {
    let b = m.bounds();
    let t = params.horizon;
    let c0 = (b.c_f * t + b.c_g) * (1.0 + b.c_phi * t + b.c_sigma * (2.0 * t).sqrt());
    c0 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderRow {
    pub eps: f64,
    pub estimate: f64,
    pub std_error: f64,
    /// `|estimate - V|` for singleton models, `V - estimate` (the
    /// policy-evaluation gap) otherwise.
    pub gap: f64,
    pub n_samples: usize,
    pub dt: f64,
}

/// Runs the ladder with common replica indices across `eps`.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_ladder_experiment(
    m: &ControlModel,
    start: &CoupledState,
    params: &ModelParams,
    effective_value: f64,
    policy: Policy<'_>,
    n_samples: usize,
    seed: u64,
    dt_rule: impl Fn(f64) -> f64,
) -> Result<Vec<LadderRow>> {
    params
        .epsilon_ladder
        .iter()
        .map(|&eps| {
            let dt = dt_rule(eps);
            let est = mc_value(m, start, eps, policy, dt, n_samples, seed, params)?;
            let gap = if m.is_singleton() {
                (est.mean - effective_value).abs()
            } else {
                effective_value - est.mean
            };
            Ok(LadderRow {
                eps,
                estimate: est.mean,
                std_error: est.std_error,
                gap,
                n_samples,
                dt,
            })
        })
        .collect()
}

pub fn write_ladder_csv(rows: &[LadderRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "eps,estimate,std_error,gap,n_samples,dt")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.eps, r.estimate, r.std_error, r.gap, r.n_samples, r.dt
        )?;
    }
    Ok(())
}

/// Value of a grid function at a lattice node.
fn node_value(w: &GridFunction, y: &FastState) -> Result<f64> {
    let grid = w.grid;
    let mut idx = [0usize; 3];
    for (k, v) in y.to_array().into_iter().enumerate() {
        let s = v / grid.h() + grid.center() as f64;
        let i = s.round();
        if (s - i).abs() > 1e-9 || i < 0.0 || i >= grid.nodes_per_axis() as f64 {
            return Err(Error::InvalidArgument(format!(
                "start {y:?} is not a node of the corrector grid"
            )));
        }
        idx[k] = i as usize;
    }
    Ok(w.at(idx[0], idx[1], idx[2]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartPair {
    pub first: usize,
    pub second: usize,
    /// `V(first) - V(second)` at the smallest `eps`.
    pub difference: f64,
    pub combined_std_error: f64,
    /// `eps |eta(x)| |w(first) - w(second)|`, the initial-layer term.
    pub band: f64,
    /// `|difference - eps eta(x) (w(first) - w(second))|`.
    pub corrected_residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YIndependence {
    pub eps_smallest: f64,
    pub eps_largest: f64,
    pub starts: Vec<FastState>,
    pub smallest: Vec<InvariantEstimate>,
    pub largest: Vec<InvariantEstimate>,
    pub pairs: Vec<StartPair>,
    pub spread_smallest: f64,
    pub spread_largest: f64,
    pub pass: bool,
}

/// Compares `V^eps(0, x, y)` across starting points at the two ends of the
/// ladder. At the smallest `eps` every pair must agree within four combined
/// standard errors plus `eps |eta(x)| |w(y) - w(y')|`, where `w` is the
/// corrector of `cos y3` (read at lattice nodes) and `eta` the running-cost
/// weight; the largest pairwise difference must also have shrunk relative
/// to the largest `eps` (or be zero).
#[allow(clippy::too_many_arguments)]
pub fn y_independence_check(
    m: &ControlModel,
    x: &[f64],
    starts: &[FastState],
    corrector: &GridFunction,
    params: &ModelParams,
    policy: Policy<'_>,
    n_samples: usize,
    seed: u64,
    dt_rule: impl Fn(f64) -> f64,
) -> Result<YIndependence> {
    if starts.len() < 2 {
        return Err(Error::InvalidArgument(
            "at least two starting points required".into(),
        ));
    }
    let (eps_largest, eps_smallest) = match params.epsilon_ladder.as_slice() {
        [first, .., last] => (*first, *last),
        _ => {
            return Err(Error::InvalidArgument(
                "epsilon ladder needs two entries".into(),
            ))
        }
    };
    let w = starts
        .iter()
        .map(|y| node_value(corrector, y))
        .collect::<Result<Vec<f64>>>()?;
    let values = |eps: f64| -> Result<Vec<InvariantEstimate>> {
        starts
            .iter()
            .map(|y| {
                mc_value(
                    m,
                    &CoupledState::new(0.0, x, *y),
                    eps,
                    policy,
                    dt_rule(eps),
                    n_samples,
                    seed,
                    params,
                )
            })
            .collect()
    };
    let smallest = values(eps_smallest)?;
    let largest = values(eps_largest)?;
    let spread = |v: &[InvariantEstimate]| {
        let hi = v.iter().map(|e| e.mean).fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().map(|e| e.mean).fold(f64::INFINITY, f64::min);
        hi - lo
    };
    let eta = m.running_cost_fast_weight(x);
    let mut pairs = Vec::new();
    for i in 0..starts.len() {
        for j in i + 1..starts.len() {
            let difference = smallest[i].mean - smallest[j].mean;
            let combined_std_error = smallest[i].combined_error(&smallest[j]);
            let predicted = eps_smallest * eta * (w[i] - w[j]);
            let band = predicted.abs();
            pairs.push(StartPair {
                first: i,
                second: j,
                difference,
                combined_std_error,
                band,
                corrected_residual: (difference - predicted).abs(),
                pass: difference.abs() <= 4.0 * combined_std_error + band,
            });
        }
    }
    let (spread_smallest, spread_largest) = (spread(&smallest), spread(&largest));
    // A payoff that ignores y has no spread to shrink.
    let pass = pairs.iter().all(|p| p.pass)
        && (spread_smallest < spread_largest || spread_smallest == 0.0);
    Ok(YIndependence {
        eps_smallest,
        eps_largest,
        starts: starts.to_vec(),
        smallest,
        largest,
        pairs,
        spread_smallest,
        spread_largest,
        pass,
    })
}
