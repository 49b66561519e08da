//! Euler-Maruyama simulation of the fast process
//! `dY = b(Y) dt + sqrt(2) sigma(Y) dW` and batch-means estimation of
//! integrals against its invariant measure.
//!
//! The process is simulated at unit time scale; the fast time scale of the
//! coupled system is a time change and leaves the invariant measure alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::operator::FastState;
use crate::rng::{self, Domain};

/// Clip level for integrands with unbounded moments.
pub const DEFAULT_CLIP: f64 = 1.0e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub total_steps: u64,
    pub burn_in_steps: u64,
    pub seed: u64,
    pub n_chains: usize,
    /// Batches per chain for the batch-means error.
    pub batches_per_chain: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            dt: 1.0e-3,
            total_steps: 10_000_000,
            burn_in_steps: 100_000,
            seed: 0x0b5e_55ed,
            n_chains: 8,
            batches_per_chain: 20,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("trajectory: {m}")));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt > 0 required");
        }
        if self.burn_in_steps >= self.total_steps {
            return bad("burn_in_steps < total_steps required");
        }
        if self.n_chains == 0 {
            return bad("n_chains >= 1 required");
        }
        if self.batches_per_chain < 2 {
            return bad("batches_per_chain >= 2 required");
        }
        if self.n_chains * self.batches_per_chain < 20 {
            return bad("at least 20 batches in total required");
        }
        if self.total_steps - self.burn_in_steps < self.batches_per_chain as u64 {
            return bad("fewer post-burn-in steps than batches");
        }
        Ok(())
    }

    pub fn with_steps(mut self, total: u64, burn_in: u64) -> Self {
        self.total_steps = total;
        self.burn_in_steps = burn_in;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_chains(mut self, n: usize) -> Self {
        self.n_chains = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub effective_samples: f64,
}

impl InvariantEstimate {
    pub fn exact(value: f64) -> Self {
        InvariantEstimate {
            mean: value,
            std_error: 0.0,
            effective_samples: f64::INFINITY,
        }
    }

    /// `sqrt(se_a^2 + se_b^2)`.
    pub fn combined_error(&self, other: &InvariantEstimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }

    pub fn agrees_with(&self, other: &InvariantEstimate, sigmas: f64) -> bool {
        (self.mean - other.mean).abs() <= sigmas * self.combined_error(other)
    }
}

/// One Euler-Maruyama step driven by a two-dimensional Gaussian vector.
#[inline]
pub fn em_step(y: &FastState, dt: f64, xi: [f64; 2], p: &ModelParams) -> FastState {
    let s = (2.0 * dt).sqrt();
    let (w1, w2) = (s * xi[0], s * xi[1]);
    FastState {
        y1: y.y1 - p.k1 * y.y1 * dt + w1,
        y2: y.y2 - p.k2 * y.y2 * dt + w2,
        y3: y.y3 - p.k3 * y.y3 * dt + 2.0 * y.y2 * w1 - 2.0 * y.y1 * w2,
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean and standard error of independent samples, summed in order.
pub fn sample_mean(values: &[f64]) -> InvariantEstimate {
    let n = values.len() as f64;
    let mut sum = CompensatedSum::default();
    for &v in values {
        sum.add(v);
    }
    let mean = sum.value() / n;
    let mut sq = CompensatedSum::default();
    for &v in values {
        sq.add((v - mean) * (v - mean));
    }
    let var = if values.len() > 1 {
        sq.value() / (n - 1.0)
    } else {
        0.0
    };
    InvariantEstimate {
        mean,
        std_error: (var / n).sqrt(),
        effective_samples: n,
    }
}

/// Per-chain batch statistics for several integrands.
#[derive(Debug, Clone)]
struct ChainBatches {
    /// `means[stat][batch]`.
    means: Vec<Vec<f64>>,
    /// Mean of squares per statistic over the whole chain.
    mean_sq: Vec<f64>,
    clipped: u64,
    far: u64,
}

/// Batch means of all integrands across all chains.
#[derive(Debug, Clone)]
pub struct BatchTable {
    chains: Vec<ChainBatches>,
    batch_len: u64,
    samples_per_chain: u64,
}

/// Radius used for the tightness diagnostic.
pub const FAR_RADIUS: f64 = 25.0;

impl BatchTable {
    pub fn n_stats(&self) -> usize {
        self.chains[0].means.len()
    }

    pub fn total_samples(&self) -> u64 {
        self.samples_per_chain * self.chains.len() as u64
    }

    pub fn clip_rate(&self) -> f64 {
        let clipped: u64 = self.chains.iter().map(|c| c.clipped).sum();
        clipped as f64 / (self.total_samples() as f64 * self.n_stats() as f64)
    }

    /// Fraction of post-burn-in samples with `|y| > 25`.
    pub fn far_fraction(&self) -> f64 {
        let far: u64 = self.chains.iter().map(|c| c.far).sum();
        far as f64 / self.total_samples() as f64
    }

    /// Estimate of statistic `stat` over the first `batches` batches of each chain.
    pub fn estimate_window(&self, stat: usize, batches: usize) -> InvariantEstimate {
        let means: Vec<f64> = self
            .chains
            .iter()
            .flat_map(|c| c.means[stat][..batches].iter().copied())
            .collect();
        let k = means.len() as f64;
        let mut acc = CompensatedSum::default();
        means.iter().for_each(|&m| acc.add(m));
        let mean = acc.value() / k;
        let var_b = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (k - 1.0);
        let std_error = (var_b / k).sqrt();
        let n = self.batch_len as f64 * k;
        let mean_sq =
            self.chains.iter().map(|c| c.mean_sq[stat]).sum::<f64>() / self.chains.len() as f64;
        let var = (mean_sq - mean * mean).max(0.0);
        let effective_samples = if var_b > 0.0 {
            (var / var_b * k).clamp(1.0, n)
        } else {
            n
        };
        InvariantEstimate {
            mean,
            std_error,
            effective_samples,
        }
    }

    pub fn estimate(&self, stat: usize) -> InvariantEstimate {
        self.estimate_window(stat, self.chains[0].means[stat].len())
    }
}

fn run_chain<F>(
    chain: usize,
    n_stats: usize,
    f: &F,
    clip: Option<f64>,
    cfg: &TrajectoryConfig,
    p: &ModelParams,
) -> Result<ChainBatches>
where
    F: Fn(&FastState, &mut [f64]) + Sync,
{
    let mut rng = rng::stream(cfg.seed, Domain::StationaryChain, chain as u64);
    let mut y = FastState::ORIGIN;
    for step in 0..cfg.burn_in_steps {
        y = em_step(&y, cfg.dt, rng::normal_pair(&mut rng), p);
        if !y.is_finite() {
            return Err(Error::NumericalBlowup {
                chain: chain as u64,
                step,
            });
        }
    }
    let post = cfg.total_steps - cfg.burn_in_steps;
    let n_batches = cfg.batches_per_chain;
    let batch_len = post / n_batches as u64;
    let mut means = vec![Vec::with_capacity(n_batches); n_stats];
    let mut sq = vec![CompensatedSum::default(); n_stats];
    let mut values = vec![0.0; n_stats];
    let (mut clipped, mut far) = (0u64, 0u64);
    let mut step = cfg.burn_in_steps;
    for _ in 0..n_batches {
        let mut sums = vec![CompensatedSum::default(); n_stats];
        for _ in 0..batch_len {
            y = em_step(&y, cfg.dt, rng::normal_pair(&mut rng), p);
            step += 1;
            if y.norm_sq() > FAR_RADIUS * FAR_RADIUS {
                far += 1;
            }
            f(&y, &mut values);
            for (k, v) in values.iter_mut().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NumericalBlowup {
                        chain: chain as u64,
                        step,
                    });
                }
                if let Some(c) = clip {
                    if v.abs() > c {
                        *v = v.signum() * c;
                        clipped += 1;
                    }
                }
                sums[k].add(*v);
                sq[k].add(*v * *v);
            }
        }
        for k in 0..n_stats {
            means[k].push(sums[k].value() / batch_len as f64);
        }
    }
    let n = (batch_len * n_batches as u64) as f64;
    Ok(ChainBatches {
        means,
        mean_sq: sq.iter().map(|s| s.value() / n).collect(),
        clipped,
        far,
    })
}

/// Runs `n_chains` independent chains from the origin and records batch
/// means of the `n_stats` integrands written by `f`.
///
/// Post-burn-in steps beyond a whole number of batches are not simulated.
pub fn sample_batches<F>(
    n_stats: usize,
    f: F,
    clip: Option<f64>,
    cfg: &TrajectoryConfig,
    p: &ModelParams,
) -> Result<BatchTable>
where
    F: Fn(&FastState, &mut [f64]) + Sync,
{
    cfg.validate()?;
    let chains = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(c, n_stats, &f, clip, cfg, p))
        .collect::<Result<Vec<_>>>()?;
    let batch_len = (cfg.total_steps - cfg.burn_in_steps) / cfg.batches_per_chain as u64;
    Ok(BatchTable {
        chains,
        batch_len,
        samples_per_chain: batch_len * cfg.batches_per_chain as u64,
    })
}

/// Time average of a bounded `F` along the stationary chains.
pub fn estimate_invariant_integral<F>(
    f: F,
    cfg: &TrajectoryConfig,
    p: &ModelParams,
) -> Result<InvariantEstimate>
where
    F: Fn(&FastState) -> f64 + Sync,
{
    let table = sample_batches(1, |y, out| out[0] = f(y), None, cfg, p)?;
    Ok(table.estimate(0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub statistic: &'static str,
    pub estimate: InvariantEstimate,
    /// Estimate over the first half of each chain's window.
    pub half_window: InvariantEstimate,
    pub window_stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub rows: Vec<MomentRow>,
    pub clip_rate: f64,
    /// Fraction of samples with `|y| > 25`.
    pub far_fraction: f64,
    pub converged: bool,
}

impl MomentReport {
    pub fn get(&self, statistic: &str) -> Option<&MomentRow> {
        self.rows.iter().find(|r| r.statistic == statistic)
    }
}

pub const MOMENT_NAMES: [&str; 6] = [
    "E[y1]",
    "E[y2]",
    "E[y1^4]",
    "E[y2^4]",
    "E[y3^2]",
    "E[cos y3]",
];

/// Moments of the invariant measure with a window-doubling stability flag.
pub fn moment_diagnostics(cfg: &TrajectoryConfig, p: &ModelParams) -> Result<MomentReport> {
    if !cfg.batches_per_chain.is_multiple_of(2) {
        return Err(Error::InvalidArgument(
            "batches_per_chain must be even".into(),
        ));
    }
    let table = sample_batches(
        MOMENT_NAMES.len(),
        |y, out| {
            let (a, b) = (y.y1 * y.y1, y.y2 * y.y2);
            out[0] = y.y1;
            out[1] = y.y2;
            out[2] = a * a;
            out[3] = b * b;
            out[4] = y.y3 * y.y3;
            out[5] = y.y3.cos();
        },
        Some(DEFAULT_CLIP),
        cfg,
        p,
    )?;
    let half = cfg.batches_per_chain / 2;
    let rows: Vec<MomentRow> = MOMENT_NAMES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let estimate = table.estimate(k);
            let half_window = table.estimate_window(k, half);
            let window_stable =
                estimate.mean.is_finite() && estimate.agrees_with(&half_window, 4.0);
            MomentRow {
                statistic: name,
                estimate,
                half_window,
                window_stable,
            }
        })
        .collect();
    let converged = rows.iter().all(|r| r.window_stable);
    Ok(MomentReport {
        rows,
        clip_rate: table.clip_rate(),
        far_fraction: table.far_fraction(),
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k555() -> ModelParams {
        ModelParams::with_rates(5.0, 5.0, 1.0)
    }

    fn short() -> TrajectoryConfig {
        TrajectoryConfig::default()
            .with_steps(400_000, 20_000)
            .with_chains(4)
    }

    #[test]
    fn zero_noise_is_a_drift_step() {
        let y = FastState::new(0.4, -1.0, 2.0);
        let out = em_step(&y, 0.01, [0.0, 0.0], &k555());
        assert_eq!(out, FastState::new(0.4 - 0.02, -1.0 + 0.05, 2.0 - 0.02));
    }

    #[test]
    fn noise_at_origin_leaves_y3() {
        let out = em_step(&FastState::ORIGIN, 1.0, [1.0, 0.0], &k555());
        assert_eq!(out, FastState::new(2f64.sqrt(), 0.0, 0.0));
    }

    #[test]
    fn hand_evaluated_step() {
        // b(0,1,0) = (0,-5,0); first column of sigma at (0,1,0) is (1,0,2).
        let out = em_step(&FastState::new(0.0, 1.0, 0.0), 1.0, [1.0, 0.0], &k555());
        let r2 = 2f64.sqrt();
        assert!((out.y1 - r2).abs() < 1e-15);
        assert!((out.y2 + 4.0).abs() < 1e-15);
        assert!((out.y3 - 2.0 * r2).abs() < 1e-15);
    }

    #[test]
    fn constant_integrand_is_exact() {
        let est = estimate_invariant_integral(|_| 1.0, &short(), &k555()).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.std_error, 0.0);
        assert!(est.effective_samples >= 1.0);
    }

    #[test]
    fn odd_moment_vanishes() {
        let est = estimate_invariant_integral(|y| y.y1, &short(), &k555()).unwrap();
        assert!(est.mean.abs() <= 4.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn y1_marginal_is_gaussian() {
        // y1 is an autonomous OU process with stationary law N(0, 1/k1).
        let est = estimate_invariant_integral(|y| y.y1.cos(), &short(), &k555()).unwrap();
        let exact = (-0.5f64 / 5.0).exp();
        assert!(
            (est.mean - exact).abs() <= 4.0 * est.std_error + 5e-4,
            "{est:?} vs {exact}"
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            short().with_dt(0.0),
            short().with_steps(10, 10),
            short().with_chains(0),
            TrajectoryConfig {
                n_chains: 1,
                batches_per_chain: 10,
                ..short()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn large_step_blows_up() {
        let cfg = short().with_dt(0.5).with_steps(100_000, 1_000);
        let res =
            estimate_invariant_integral(|y| y.y1, &cfg, &ModelParams::with_rates(50.0, 50.0, 1.0));
        assert!(matches!(res, Err(Error::NumericalBlowup { .. })));
    }

    #[test]
    fn reproducible_across_worker_counts() {
        let cfg = TrajectoryConfig::default()
            .with_steps(100_000, 10_000)
            .with_chains(5)
            .with_seed(99);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| estimate_invariant_integral(|y| y.y3.cos(), &cfg, &k555()).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
    }

    #[test]
    fn reflection_symmetry() {
        let cfg = short();
        let f = |y: &FastState| (y.y1 + 0.5 * y.y2).sin() + y.y3.cos() * y.y1;
        let table = sample_batches(
            2,
            |y, out| {
                out[0] = f(y);
                out[1] = f(&FastState::new(-y.y1, -y.y2, y.y3));
            },
            None,
            &cfg,
            &k555(),
        )
        .unwrap();
        let (a, b) = (table.estimate(0), table.estimate(1));
        assert!(a.agrees_with(&b, 4.0), "{a:?} {b:?}");
    }
}
