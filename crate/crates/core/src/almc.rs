//! Annealed unadjusted-Langevin particle evolution with importance
//! reweighting and ESS-triggered resampling.
//!
//! The chain walks intermediate potentials
//! `V_k(x) = (1 - lambda_k) |x|^2 / 2 - lambda_k log rho(x)` from the standard
//! Gaussian (`lambda = 0`) to the target (`lambda = 1`). Two weight modes are
//! supported:
//!
//! * `Jarzynski` — per-step accumulators `A_k` updated from the potential
//!   difference plus the backward/forward kernel log-ratio, with the backward
//!   kernel taken as reverse ULA under the same potential. `E[e^{A_k}]`
//!   estimates `Z_k / Z_0`, so the running log-normalizer comes for free.
//! * `Marginal` — weights `log w = -V_k(x) - log p_hat_k(x)` where
//!   `p_hat_k` is a kernel estimate of the forward marginal from the previous
//!   particle cloud. Exact in the large-n limit, O(n * m) per evaluation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::ensemble::{ess, log_sum_exp, resample, Ensemble, ResampleMethod};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{derive_rng, purpose};
use crate::target::TargetModel;

/// Step sizes and annealing fractions for one run: `deltas[k-1]` is the step
/// size of transition `k` and `lambdas[k]` the annealing fraction of the
/// potential targeted by that transition, `k = 0..=K`.
#[derive(Debug, Clone)]
pub struct AnnealPath {
    deltas: Vec<f64>,
    lambdas: Vec<f64>,
}

/// How the annealing fractions are generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSchedule {
    /// `lambda_k = k / K`.
    Linear,
    /// `lambda_k = 1 - exp(-rate * k / K)`, clamped to exactly 1 at the final
    /// step so the last potential is the target itself.
    ExpSaturating { rate: f64 },
}

/// How the step sizes interpolate from `delta_start` to `delta_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaSchedule {
    /// Arithmetic interpolation in the step index.
    Linear,
    /// Harmonic interpolation in the annealing fraction:
    /// `delta_k = 1 / (1/start + (1/end - 1/start) lambda_k)`. Because the
    /// annealed potential's stiffness also grows affinely in lambda, this
    /// keeps `delta * stiffness` roughly level along the whole path instead
    /// of letting it spike mid-anneal.
    Tempered,
}

impl AnnealPath {
    pub fn new(deltas: Vec<f64>, lambdas: Vec<f64>) -> Result<Self> {
        if deltas.is_empty() || lambdas.len() != deltas.len() + 1 {
            return Err(Error::Config(
                "need K deltas and K+1 lambdas with K >= 1".into(),
            ));
        }
        if deltas.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if lambdas[0] != 0.0 {
            return Err(Error::Config("lambda_0 must be 0".into()));
        }
        if *lambdas.last().unwrap() > 1.0 {
            return Err(Error::Config("final lambda must be <= 1".into()));
        }
        if lambdas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("lambdas must be nondecreasing".into()));
        }
        Ok(Self { deltas, lambdas })
    }

    /// Linearly interpolated step sizes plus a generated lambda schedule.
    pub fn generate(
        num_steps: usize,
        delta_start: f64,
        delta_end: f64,
        lambda: LambdaSchedule,
    ) -> Result<Self> {
        Self::generate_with(num_steps, delta_start, delta_end, DeltaSchedule::Linear, lambda)
    }

    /// Generated schedules with an explicit step-size interpolation kind.
    pub fn generate_with(
        num_steps: usize,
        delta_start: f64,
        delta_end: f64,
        delta_kind: DeltaSchedule,
        lambda: LambdaSchedule,
    ) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("need at least one anneal step".into()));
        }
        if !(delta_start > 0.0 && delta_end > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        let k = num_steps;
        let lambdas: Vec<f64> = (0..=k)
            .map(|i| {
                let u = i as f64 / k as f64;
                match lambda {
                    LambdaSchedule::Linear => u,
                    LambdaSchedule::ExpSaturating { rate } => {
                        if i == k {
                            1.0
                        } else {
                            1.0 - (-rate * u).exp()
                        }
                    }
                }
            })
            .collect();
        let deltas: Vec<f64> = (1..=k)
            .map(|i| match delta_kind {
                DeltaSchedule::Linear => {
                    let u = if k == 1 {
                        0.0
                    } else {
                        (i - 1) as f64 / (k - 1) as f64
                    };
                    delta_start + (delta_end - delta_start) * u
                }
                DeltaSchedule::Tempered => {
                    1.0 / (1.0 / delta_start
                        + (1.0 / delta_end - 1.0 / delta_start) * lambdas[i])
                }
            })
            .collect();
        Self::new(deltas, lambdas)
    }

    /// Number of transitions `K`.
    pub fn num_steps(&self) -> usize {
        self.deltas.len()
    }

    /// Annealing fraction at step `k`, `k = 0..=K`.
    pub fn lambda(&self, k: usize) -> f64 {
        self.lambdas[k]
    }

    /// Step size of transition `k`, `k = 1..=K`.
    pub fn delta(&self, k: usize) -> f64 {
        self.deltas[k - 1]
    }
}

/// Importance-weight style for [`run_almc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    /// Marginal weights from the forward-density estimate, evaluated every
    /// `stride` steps with a fixed seeded reference subsample of size
    /// `subsample`.
    Marginal { subsample: usize, stride: usize },
    /// Nonequilibrium path weights with a reverse-ULA backward kernel.
    Jarzynski,
}

/// Annealed drift `(1 - lambda_k) x - lambda_k grad log rho(x)`.
pub fn annealed_grad(
    path: &AnnealPath,
    k: usize,
    target: &dyn TargetModel,
    x: &[f64],
) -> Result<Vec<f64>> {
    let lambda = path.lambda(k);
    let grad = target.grad_log_density(x);
    let out: Vec<f64> = x
        .iter()
        .zip(&grad)
        .map(|(&xi, &gi)| (1.0 - lambda) * xi - lambda * gi)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite annealed gradient at step {k}"
        )));
    }
    Ok(out)
}

/// Annealed potential `V_k(x) = (1 - lambda_k) |x|^2 / 2 - lambda_k log rho(x)`.
pub fn annealed_potential(path: &AnnealPath, k: usize, target: &dyn TargetModel, x: &[f64]) -> f64 {
    let lambda = path.lambda(k);
    let sq: f64 = x.iter().map(|v| v * v).sum();
    (1.0 - lambda) * 0.5 * sq - lambda * target.log_density_unnorm(x)
}

fn potential_from_parts(lambda: f64, half_sq: f64, log_rho: f64) -> f64 {
    (1.0 - lambda) * half_sq - lambda * log_rho
}

/// One Euler-Maruyama transition with caller-supplied noise (`n x d`,
/// standard normal). Weights are untouched; the step index advances.
pub fn ula_step_with_noise(
    path: &AnnealPath,
    k: usize,
    target: &dyn TargetModel,
    e: &Ensemble,
    noise: &[f64],
) -> Result<Ensemble> {
    let (n, d) = (e.len(), e.dim());
    if noise.len() != n * d {
        return Err(Error::DimensionMismatch {
            expected: n * d,
            got: noise.len(),
        });
    }
    let delta = path.delta(k);
    let lambda = path.lambda(k);
    let scale = (2.0 * delta).sqrt();
    let positions = e.positions();
    let mut grads = vec![0.0; n * d];
    parallel::for_each_row(&mut grads, d, |i, g| {
        target.log_density_and_grad(&positions[i * d..(i + 1) * d], g);
    });
    let mut out = vec![0.0; n * d];
    parallel::for_each_row(&mut out, d, |i, row| {
        let x = &positions[i * d..(i + 1) * d];
        let g = &grads[i * d..(i + 1) * d];
        let eps = &noise[i * d..(i + 1) * d];
        for j in 0..d {
            let drift = (1.0 - lambda) * x[j] - lambda * g[j];
            row[j] = x[j] - delta * drift + scale * eps[j];
        }
    });
    if let Some(i) = out
        .chunks_exact(d)
        .position(|row| row.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite { particle: i, step: k });
    }
    Ensemble::new(out, e.log_weights().to_vec(), d, e.step_index() + 1)
}

/// One ULA transition with per-particle noise streams keyed by
/// `(seed, particle, k)`.
pub fn ula_step(
    path: &AnnealPath,
    k: usize,
    target: &dyn TargetModel,
    e: &Ensemble,
    seed: u64,
) -> Result<Ensemble> {
    let noise = standard_normal_rows(e.len(), e.dim(), seed, purpose::ULA, k as u64);
    ula_step_with_noise(path, k, target, e, &noise)
}

fn standard_normal_rows(n: usize, d: usize, seed: u64, tag: u64, step: u64) -> Vec<f64> {
    let mut noise = vec![0.0; n * d];
    parallel::for_each_row(&mut noise, d, |i, row| {
        let mut rng = derive_rng(seed, tag, i as u64, step);
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
    });
    noise
}

/// Exact log-density of the ULA transition kernel at step `k`, including the
/// `(4 pi delta_k)^{-d/2}` normalizer.
pub fn log_transition_density(
    path: &AnnealPath,
    k: usize,
    target: &dyn TargetModel,
    x_prev: &[f64],
    x_next: &[f64],
) -> Result<f64> {
    if x_prev.len() != x_next.len() {
        return Err(Error::DimensionMismatch {
            expected: x_prev.len(),
            got: x_next.len(),
        });
    }
    let delta = path.delta(k);
    let lambda = path.lambda(k);
    let grad = target.grad_log_density(x_prev);
    let d = x_prev.len() as f64;
    let mut sq = 0.0;
    for j in 0..x_prev.len() {
        let drift = (1.0 - lambda) * x_prev[j] - lambda * grad[j];
        let diff = x_next[j] - x_prev[j] + delta * drift;
        sq += diff * diff;
    }
    Ok(-0.5 * d * (4.0 * std::f64::consts::PI * delta).ln() - sq / (4.0 * delta))
}

/// Kernel estimate of the forward marginal `log p_hat_k(x)`: a log-mean of
/// transition densities from `m` reference particles of the previous cloud.
/// When `m < n` the reference subsample is fixed by `(seed, k)`, so every
/// evaluation point at a given step sees the same references.
pub fn log_forward_density_estimate(
    path: &AnnealPath,
    k: usize,
    target: &dyn TargetModel,
    prev: &Ensemble,
    x: &[f64],
    m: usize,
    seed: u64,
) -> Result<f64> {
    let refs = reference_indices(prev.len(), m, seed, k);
    let est = ForwardDensityEstimator::new(path, k, target, prev, &refs)?;
    est.log_density(x)
}

fn reference_indices(n: usize, m: usize, seed: u64, k: usize) -> Vec<usize> {
    let m = m.min(n).max(1);
    if m == n {
        return (0..n).collect();
    }
    let mut rng = derive_rng(seed, purpose::SUBSAMPLE, k as u64, 0);
    // Partial Fisher-Yates over the first m slots.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + (rng.random::<u64>() % (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

/// Precomputed transition means from a set of reference particles, so the
/// O(m) kernel sum can be evaluated at many points.
struct ForwardDensityEstimator {
    means: Vec<f64>, // m x d: x_ref - delta * grad V_k(x_ref)
    delta: f64,
    d: usize,
    log_m: f64,
    log_norm: f64,
}

impl ForwardDensityEstimator {
    fn new(
        path: &AnnealPath,
        k: usize,
        target: &dyn TargetModel,
        prev: &Ensemble,
        refs: &[usize],
    ) -> Result<Self> {
        let d = prev.dim();
        let delta = path.delta(k);
        let lambda = path.lambda(k);
        let mut means = vec![0.0; refs.len() * d];
        let positions = prev.positions();
        parallel::for_each_row(&mut means, d, |i, row| {
            let x = &positions[refs[i] * d..(refs[i] + 1) * d];
            let mut grad = vec![0.0; d];
            target.log_density_and_grad(x, &mut grad);
            for j in 0..d {
                let drift = (1.0 - lambda) * x[j] - lambda * grad[j];
                row[j] = x[j] - delta * drift;
            }
        });
        Ok(Self {
            means,
            delta,
            d,
            log_m: (refs.len() as f64).ln(),
            log_norm: -0.5 * d as f64 * (4.0 * std::f64::consts::PI * delta).ln(),
        })
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        let inv = 1.0 / (4.0 * self.delta);
        let mut terms = Vec::with_capacity(self.means.len() / self.d);
        for mean in self.means.chunks_exact(self.d) {
            let mut sq = 0.0;
            for (&xj, &mj) in x.iter().zip(mean) {
                let diff = xj - mj;
                sq += diff * diff;
            }
            terms.push(-sq * inv);
        }
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(Error::DegenerateWeights(
                "forward-density estimate underflowed".into(),
            ));
        }
        Ok(self.log_norm + lse - self.log_m)
    }
}

/// Marginal log-weights `-V_k(x) - log p_hat_k(x)` for every particle of
/// `cur`, using `prev` as the reference cloud. Unnormalized; constants cancel
/// downstream.
pub fn marginal_log_weights(
    path: &AnnealPath,
    k: usize,
    target: &dyn TargetModel,
    cur: &Ensemble,
    prev: &Ensemble,
    m: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let refs = reference_indices(prev.len(), m, seed, k);
    let est = ForwardDensityEstimator::new(path, k, target, prev, &refs)?;
    let d = cur.dim();
    let positions = cur.positions();
    let mut out = vec![0.0; cur.len()];
    parallel::fill_indexed(&mut out, |i| {
        let x = &positions[i * d..(i + 1) * d];
        let v = annealed_potential(path, k, target, x);
        match est.log_density(x) {
            // The annealed density decays faster than any transition kernel,
            // so a particle beyond kernel resolution carries zero weight.
            Ok(lp) => -v - lp,
            Err(_) => f64::NEG_INFINITY,
        }
    });
    if let Some(i) = out.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite { particle: i, step: k });
    }
    Ok(out)
}

/// One accumulator update `A_k = A_{k-1} + V_{k-1}(x_prev) - V_k(x_next)
/// + log nu_k(x_next, x_prev) - log mu_k(x_prev, x_next)` with the reverse-ULA
/// backward kernel; the Gaussian normalizers of `nu` and `mu` cancel exactly
/// and are never computed.
pub fn jarzynski_log_weight_update(
    path: &AnnealPath,
    k: usize,
    target: &dyn TargetModel,
    x_prev: &[f64],
    x_next: &[f64],
    a_prev: f64,
) -> f64 {
    let delta = path.delta(k);
    let lambda = path.lambda(k);
    let grad_prev = target.grad_log_density(x_prev);
    let grad_next = target.grad_log_density(x_next);
    let mut fwd_sq = 0.0;
    let mut bwd_sq = 0.0;
    for j in 0..x_prev.len() {
        let drift_prev = (1.0 - lambda) * x_prev[j] - lambda * grad_prev[j];
        let diff_f = x_next[j] - x_prev[j] + delta * drift_prev;
        fwd_sq += diff_f * diff_f;
        let drift_next = (1.0 - lambda) * x_next[j] - lambda * grad_next[j];
        let diff_b = x_prev[j] - x_next[j] + delta * drift_next;
        bwd_sq += diff_b * diff_b;
    }
    let v_prev = annealed_potential(path, k - 1, target, x_prev);
    let v_next = annealed_potential(path, k, target, x_next);
    a_prev + v_prev - v_next + (fwd_sq - bwd_sq) / (4.0 * delta)
}

/// Configuration for [`run_almc`].
#[derive(Debug, Clone)]
pub struct AlmcConfig {
    pub num_particles: usize,
    pub path: AnnealPath,
    pub weight_mode: WeightMode,
    /// Resample when the effective sample size drops below this, in `[1, n]`.
    pub ess_threshold: f64,
    pub seed: u64,
    pub resample_method: ResampleMethod,
}

/// One line of the per-step diagnostics stream.
#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub ess: f64,
    pub resampled: bool,
    pub lambda: f64,
    pub delta: f64,
    pub log_z_estimate: f64,
}

/// Weighted particles plus per-step diagnostics from one annealed run.
#[derive(Debug, Clone)]
pub struct AlmcOutput {
    pub ensemble: Ensemble,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Accumulated log-normalizer estimate `log(Z_K / Z_0)` (Jarzynski mode;
    /// in marginal mode this is the same bookkeeping applied to the marginal
    /// weights and is diagnostic only).
    pub log_z_estimate: f64,
}

/// Run the annealed Langevin particle system: Gaussian initialization with
/// unit weights, per-step ULA updates and weight updates, and systematic
/// resampling whenever the ESS falls below the threshold (accumulators reset
/// and the pre-reset mean weight folds into the running log-normalizer).
pub fn run_almc(cfg: &AlmcConfig, target: &dyn TargetModel) -> Result<AlmcOutput> {
    let n = cfg.num_particles;
    let d = target.dim();
    if n == 0 {
        return Err(Error::Config("need at least one particle".into()));
    }
    if !(1.0..=n as f64).contains(&cfg.ess_threshold) {
        return Err(Error::Config(format!(
            "ess threshold {} outside [1, {n}]",
            cfg.ess_threshold
        )));
    }
    let big_k = cfg.path.num_steps();

    let mut positions = vec![0.0; n * d];
    parallel::for_each_row(&mut positions, d, |i, row| {
        let mut rng = derive_rng(cfg.seed, purpose::INIT, i as u64, 0);
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
    });
    // Cached per-particle quantities at the current positions.
    let mut grads = vec![0.0; n * d];
    let mut log_rho = vec![0.0; n];
    let mut half_sq = vec![0.0; n];
    refresh_cache(target, &positions, &mut grads, &mut log_rho, &mut half_sq, d);

    let mut log_weights = vec![0.0; n];
    let mut log_z = 0.0;
    let mut diagnostics = Vec::with_capacity(big_k + 1);
    diagnostics.push(StepDiagnostics {
        step: 0,
        ess: n as f64,
        resampled: false,
        lambda: cfg.path.lambda(0),
        delta: 0.0,
        log_z_estimate: 0.0,
    });

    let mut scratch = vec![0.0; n * d];
    for k in 1..=big_k {
        let delta = cfg.path.delta(k);
        let lambda = cfg.path.lambda(k);
        let lambda_prev = cfg.path.lambda(k - 1);
        let scale = (2.0 * delta).sqrt();

        // Move every particle and collect the pieces the weight updates need.
        let noise = standard_normal_rows(n, d, cfg.seed, purpose::ULA, k as u64);
        {
            let positions = &positions;
            let grads = &grads;
            let noise = &noise;
            parallel::for_each_row(&mut scratch, d, |i, row| {
                let x = &positions[i * d..(i + 1) * d];
                let g = &grads[i * d..(i + 1) * d];
                let eps = &noise[i * d..(i + 1) * d];
                for j in 0..d {
                    let drift = (1.0 - lambda) * x[j] - lambda * g[j];
                    row[j] = x[j] - delta * drift + scale * eps[j];
                }
            });
        }
        if let Some(i) = scratch
            .chunks_exact(d)
            .position(|row| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite { particle: i, step: k });
        }

        match cfg.weight_mode {
            WeightMode::Jarzynski => {
                // V_{k-1} at the old positions from the cache, V_k and the
                // kernel log-ratio at the new ones.
                let mut new_grads = vec![0.0; n * d];
                let mut new_log_rho = vec![0.0; n];
                let mut new_half_sq = vec![0.0; n];
                refresh_cache(
                    target,
                    &scratch,
                    &mut new_grads,
                    &mut new_log_rho,
                    &mut new_half_sq,
                    d,
                );
                let increments: Vec<f64> = {
                    let positions = &positions;
                    let scratch = &scratch;
                    let noise = &noise;
                    let new_grads = &new_grads;
                    let mut inc = vec![0.0; n];
                    parallel::fill_indexed(&mut inc, |i| {
                        let x = &positions[i * d..(i + 1) * d];
                        let y = &scratch[i * d..(i + 1) * d];
                        let eps = &noise[i * d..(i + 1) * d];
                        let gy = &new_grads[i * d..(i + 1) * d];
                        // Forward residual is the injected noise itself.
                        let fwd_sq: f64 =
                            eps.iter().map(|&e| (scale * e) * (scale * e)).sum();
                        let mut bwd_sq = 0.0;
                        for j in 0..d {
                            let drift = (1.0 - lambda) * y[j] - lambda * gy[j];
                            let diff = x[j] - y[j] + delta * drift;
                            bwd_sq += diff * diff;
                        }
                        let v_prev = potential_from_parts(lambda_prev, half_sq[i], log_rho[i]);
                        let v_next =
                            potential_from_parts(lambda, new_half_sq[i], new_log_rho[i]);
                        v_prev - v_next + (fwd_sq - bwd_sq) / (4.0 * delta)
                    });
                    inc
                };
                for (lw, inc) in log_weights.iter_mut().zip(&increments) {
                    *lw += inc;
                }
                grads = new_grads;
                log_rho = new_log_rho;
                half_sq = new_half_sq;
            }
            WeightMode::Marginal { subsample, stride } => {
                let evaluate = k % stride.max(1) == 0 || k == big_k;
                if evaluate {
                    let prev =
                        Ensemble::new(positions.clone(), log_weights.clone(), d, k - 1)?;
                    let cur = Ensemble::new(scratch.clone(), log_weights.clone(), d, k)?;
                    log_weights =
                        marginal_log_weights(&cfg.path, k, target, &cur, &prev, subsample, cfg.seed)?;
                }
                refresh_cache(target, &scratch, &mut grads, &mut log_rho, &mut half_sq, d);
            }
        }
        std::mem::swap(&mut positions, &mut scratch);

        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            let i = log_weights
                .iter()
                .position(|w| w.is_nan() || *w == f64::INFINITY)
                .unwrap();
            return Err(Error::NonFinite { particle: i, step: k });
        }

        let ess_k = ess(&log_weights)?;
        let resampled = ess_k < cfg.ess_threshold && k < big_k;
        if resampled {
            // Fold the pre-reset mean weight into the running normalizer.
            log_z += log_sum_exp(&log_weights) - (n as f64).ln();
            let e = Ensemble::new(positions.clone(), log_weights.clone(), d, k)?;
            let mut rng = derive_rng(cfg.seed, purpose::RESAMPLE, 0, k as u64);
            let res = resample(&e, &mut rng, cfg.resample_method)?;
            positions.copy_from_slice(res.positions());
            log_weights.iter_mut().for_each(|w| *w = 0.0);
            refresh_cache(target, &positions, &mut grads, &mut log_rho, &mut half_sq, d);
        }
        diagnostics.push(StepDiagnostics {
            step: k,
            ess: ess_k,
            resampled,
            lambda,
            delta,
            log_z_estimate: log_z + log_sum_exp(&log_weights) - (n as f64).ln(),
        });
    }

    let log_z_estimate = log_z + log_sum_exp(&log_weights) - (n as f64).ln();
    let ensemble = Ensemble::new(positions, log_weights, d, big_k)?;
    Ok(AlmcOutput {
        ensemble,
        diagnostics,
        log_z_estimate,
    })
}

fn refresh_cache(
    target: &dyn TargetModel,
    positions: &[f64],
    grads: &mut [f64],
    log_rho: &mut [f64],
    half_sq: &mut [f64],
    d: usize,
) {
    let n = positions.len() / d;
    let mut aux = vec![(0.0, 0.0); n];
    parallel::for_each_row_with(grads, d, &mut aux, |i, g| {
        let x = &positions[i * d..(i + 1) * d];
        let lr = target.log_density_and_grad(x, g);
        let hs = 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        (lr, hs)
    });
    for (i, (lr, hs)) in aux.into_iter().enumerate() {
        log_rho[i] = lr;
        half_sq[i] = hs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::test_support::StdGaussianEnergy;
    use crate::target::GaussianMixture;

    fn static_path(k: usize, delta: f64) -> AnnealPath {
        AnnealPath::generate(k, delta, delta, LambdaSchedule::Linear).unwrap()
    }

    #[test]
    fn path_generation_invariants() {
        let p = AnnealPath::generate(10, 0.5, 0.05, LambdaSchedule::Linear).unwrap();
        assert_eq!(p.num_steps(), 10);
        assert_eq!(p.lambda(0), 0.0);
        assert_eq!(p.lambda(10), 1.0);
        assert!((p.delta(1) - 0.5).abs() < 1e-15);
        assert!((p.delta(10) - 0.05).abs() < 1e-15);

        let e = AnnealPath::generate(100, 0.1, 0.001, LambdaSchedule::ExpSaturating { rate: 50.0 })
            .unwrap();
        assert_eq!(e.lambda(0), 0.0);
        assert_eq!(e.lambda(100), 1.0); // clamped at the final step
        assert!(e.lambda(50) > 0.999 && e.lambda(50) < 1.0);
    }

    #[test]
    fn annealed_grad_examples() {
        let g = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let x = [0.7, -1.2];
        // lambda = 0: the standard Gaussian potential gradient, x itself.
        let p0 = AnnealPath::new(vec![0.1], vec![0.0, 0.0]).unwrap();
        let out = annealed_grad(&p0, 1, &g, &x).unwrap();
        assert_eq!(out, vec![0.7, -1.2]);
        // lambda = 1: -grad log rho.
        let p1 = AnnealPath::new(vec![0.1], vec![0.0, 1.0]).unwrap();
        let out = annealed_grad(&p1, 1, &g, &x).unwrap();
        let grad = g.grad_log_density(&x);
        assert_eq!(out, grad.iter().map(|v| -v).collect::<Vec<_>>());
        // lambda = 0.5 on a standard Gaussian target: drift is x again.
        let ph = AnnealPath::new(vec![0.1], vec![0.0, 0.5]).unwrap();
        let out = annealed_grad(&ph, 1, &g, &x).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-14 && (out[1] + 1.2).abs() < 1e-14);
    }

    #[test]
    fn annealed_potential_examples() {
        let g = GaussianMixture::single(vec![1.0], 0.8).unwrap();
        let x = [0.3];
        let p = AnnealPath::new(vec![0.1, 0.1], vec![0.0, 0.4, 1.0]).unwrap();
        assert!((annealed_potential(&p, 0, &g, &x) - 0.5 * 0.09).abs() < 1e-14);
        assert!(
            (annealed_potential(&p, 2, &g, &x) + g.log_density_unnorm(&x)).abs() < 1e-14
        );
        // Finite differences of the potential match the annealed gradient.
        let h = 1e-6;
        for k in [1, 2] {
            let up = annealed_potential(&p, k, &g, &[x[0] + h]);
            let dn = annealed_potential(&p, k, &g, &[x[0] - h]);
            let fd = (up - dn) / (2.0 * h);
            let grad = annealed_grad(&p, k, &g, &x).unwrap()[0];
            assert!((fd - grad).abs() < 1e-5);
        }
    }

    #[test]
    fn ula_zero_noise_contracts() {
        let g = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let path = AnnealPath::new(vec![0.25], vec![0.0, 0.0]).unwrap();
        let e = Ensemble::new(vec![2.0, -4.0], vec![0.0], 2, 0).unwrap();
        let out = ula_step_with_noise(&path, 1, &g, &e, &[0.0, 0.0]).unwrap();
        assert_eq!(out.positions(), &[1.5, -3.0]);
        assert_eq!(out.step_index(), 1);
        assert_eq!(out.log_weights(), e.log_weights());
    }

    #[test]
    fn ula_one_step_moments_from_point_mass() {
        let g = GaussianMixture::single(vec![0.0], 1.0).unwrap();
        let delta = 0.05;
        let path = AnnealPath::new(vec![delta], vec![0.0, 1.0]).unwrap();
        let n = 100_000usize;
        let x0 = 1.3;
        let e = Ensemble::new(vec![x0; n], vec![0.0; n], 1, 0).unwrap();
        let out = ula_step(&path, 1, &g, &e, 77).unwrap();
        let drift_target = x0 - delta * x0; // grad V = x for this target
        let mean: f64 = out.positions().iter().sum::<f64>() / n as f64;
        let se = (2.0 * delta / n as f64).sqrt();
        assert!((mean - drift_target).abs() < 4.0 * se);
        let var: f64 = out
            .positions()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let var_se = 2.0 * delta * (2.0 / n as f64).sqrt();
        assert!((var - 2.0 * delta).abs() < 4.0 * var_se);
    }

    #[test]
    fn ula_ergodic_variance_matches_biased_law() {
        // Static standard-Gaussian potential: ULA equilibrates to variance
        // 1 / (1 - delta/2), not 1.
        let g = StdGaussianEnergy(1);
        let delta = 0.01;
        let k_steps = 10_000usize;
        let path = static_path(k_steps, delta);
        let n = 20_000usize;
        let mut rng = derive_rng(5, purpose::INIT, 0, 0);
        let mut e = Ensemble::standard_normal_init(n, 1, &mut rng);
        for k in 1..=k_steps {
            e = ula_step(&path, k, &g, &e, 5).unwrap();
        }
        let mean: f64 = e.positions().iter().sum::<f64>() / n as f64;
        let var: f64 = e
            .positions()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let expect = 1.0 / (1.0 - delta / 2.0);
        assert!(
            (var - expect).abs() / expect < 0.05,
            "var {var} vs {expect}"
        );
    }

    #[test]
    fn transition_density_peak_and_symmetry() {
        let g = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let delta = 0.2;
        let path = AnnealPath::new(vec![delta], vec![0.0, 1.0]).unwrap();
        let x = [0.4, -0.8];
        let grad_v = annealed_grad(&path, 1, &g, &x).unwrap();
        let mode: Vec<f64> = x.iter().zip(&grad_v).map(|(&a, &b)| a - delta * b).collect();
        let peak = log_transition_density(&path, 1, &g, &x, &mode).unwrap();
        let expect = -1.0 * (4.0 * std::f64::consts::PI * delta).ln(); // d/2 = 1
        assert!((peak - expect).abs() < 1e-12);

        let off1: Vec<f64> = mode.iter().map(|&m| m + 0.3).collect();
        let off2: Vec<f64> = mode.iter().map(|&m| m - 0.3).collect();
        let a = log_transition_density(&path, 1, &g, &x, &off1).unwrap();
        let b = log_transition_density(&path, 1, &g, &x, &off2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn transition_density_integrates_to_one() {
        let g = GaussianMixture::single(vec![0.5], 1.0).unwrap();
        let delta = 0.07;
        let path = AnnealPath::new(vec![delta], vec![0.0, 0.6]).unwrap();
        let x = [0.9];
        let nodes = 200_000usize;
        let (lo, hi) = (-6.0, 6.0);
        let h = (hi - lo) / nodes as f64;
        let mut acc = 0.0;
        for i in 0..=nodes {
            let y = lo + i as f64 * h;
            let w = if i == 0 || i == nodes { 0.5 } else { 1.0 };
            acc += w * log_transition_density(&path, 1, &g, &x, &[y]).unwrap().exp();
        }
        acc *= h;
        assert!((acc - 1.0).abs() < 1e-8, "integral {acc}");
    }

    #[test]
    fn forward_density_single_reference_reduces_to_kernel() {
        let g = GaussianMixture::single(vec![0.0], 1.0).unwrap();
        let path = AnnealPath::new(vec![0.1], vec![0.0, 1.0]).unwrap();
        let prev = Ensemble::new(vec![0.4], vec![0.0], 1, 0).unwrap();
        let x = [0.7];
        let direct = log_transition_density(&path, 1, &g, prev.position(0), &x).unwrap();
        let est = log_forward_density_estimate(&path, 1, &g, &prev, &x, 1, 9).unwrap();
        assert!((est - direct).abs() < 1e-12);

        // n identical references behave like the single-particle case.
        let prev_n = Ensemble::new(vec![0.4; 8], vec![0.0; 8], 1, 0).unwrap();
        let est_n = log_forward_density_estimate(&path, 1, &g, &prev_n, &x, 8, 9).unwrap();
        assert!((est_n - direct).abs() < 1e-12);
    }

    #[test]
    fn forward_density_matches_quadrature() {
        // References drawn from a known Gaussian; compare the kernel average
        // to the integral of p_{k-1} against the transition kernel.
        let g = StdGaussianEnergy(1);
        let delta = 0.1;
        let path = AnnealPath::new(vec![delta], vec![0.0, 1.0]).unwrap();
        let s = 0.8;
        let m = 10_000usize;
        let mut rng = derive_rng(31, purpose::INIT, 1, 0);
        let mut prev_pos = vec![0.0; m];
        for v in prev_pos.iter_mut() {
            *v = s * rand::Rng::sample::<f64, _>(&mut rng, StandardNormal);
        }
        let prev = Ensemble::new(prev_pos.clone(), vec![0.0; m], 1, 0).unwrap();
        for x in [0.0, 0.5, -1.0] {
            let est = log_forward_density_estimate(&path, 1, &g, &prev, &[x], m, 9).unwrap();
            // Quadrature over the reference density.
            let nodes = 100_000usize;
            let (lo, hi) = (-10.0, 10.0);
            let h = (hi - lo) / nodes as f64;
            let mut acc = 0.0;
            for i in 0..=nodes {
                let y = lo + i as f64 * h;
                let w = if i == 0 || i == nodes { 0.5 } else { 1.0 };
                let p_prev =
                    (-y * y / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                let mu = log_transition_density(&path, 1, &g, &[y], &[x]).unwrap().exp();
                acc += w * p_prev * mu;
            }
            acc *= h;
            // Monte Carlo band: 3 standard errors of the kernel average.
            let kernels: Vec<f64> = prev_pos
                .iter()
                .map(|&y| log_transition_density(&path, 1, &g, &[y], &[x]).unwrap().exp())
                .collect();
            let kmean: f64 = kernels.iter().sum::<f64>() / m as f64;
            let kvar: f64 =
                kernels.iter().map(|v| (v - kmean).powi(2)).sum::<f64>() / (m - 1) as f64;
            let se = (kvar / m as f64).sqrt();
            assert!(
                (est.exp() - acc).abs() < 3.0 * se,
                "x={x}: {} vs {acc} (se {se})",
                est.exp()
            );
        }
    }

    #[test]
    fn marginal_weights_exact_case_keeps_full_ess() {
        // Engineered so the one-step forward marginal equals the annealed
        // target: tau = 1, delta = 0.1, prev variance (1/tau - 2 delta) /
        // (1 - delta tau)^2. Weights then differ only by kernel-estimate
        // noise and the ESS stays within 1% of n.
        let g = StdGaussianEnergy(1);
        let delta = 0.1;
        let path = AnnealPath::new(vec![delta], vec![0.0, 1.0]).unwrap();
        let s2: f64 = (1.0 - 2.0 * delta) / ((1.0 - delta) * (1.0 - delta));
        let n = 10_000usize;
        let mut rng = derive_rng(33, purpose::INIT, 2, 0);
        let mut prev_pos = vec![0.0; n];
        for v in prev_pos.iter_mut() {
            *v = s2.sqrt() * rand::Rng::sample::<f64, _>(&mut rng, StandardNormal);
        }
        let prev = Ensemble::new(prev_pos, vec![0.0; n], 1, 0).unwrap();
        let cur = ula_step(&path, 1, &g, &prev, 33).unwrap();
        let lw = marginal_log_weights(&path, 1, &g, &cur, &prev, n, 33).unwrap();
        let ess_val = ess(&lw).unwrap();
        assert!(ess_val > 0.99 * n as f64, "ess {ess_val} of {n}");
    }

    #[test]
    fn marginal_weight_single_reference_at_mode() {
        let g = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let delta = 0.15;
        let path = AnnealPath::new(vec![delta], vec![0.0, 1.0]).unwrap();
        let y = [0.6, -0.2];
        let grad_v = annealed_grad(&path, 1, &g, &y).unwrap();
        let mode: Vec<f64> = y.iter().zip(&grad_v).map(|(&a, &b)| a - delta * b).collect();
        let prev = Ensemble::new(y.to_vec(), vec![0.0], 2, 0).unwrap();
        let cur = Ensemble::new(mode.clone(), vec![0.0], 2, 1).unwrap();
        let lw = marginal_log_weights(&path, 1, &g, &cur, &prev, 1, 3).unwrap();
        let expect = -annealed_potential(&path, 1, &g, &mode)
            + (4.0 * std::f64::consts::PI * delta).ln(); // d/2 = 1
        assert!((lw[0] - expect).abs() < 1e-12);
    }

    struct Shifted<'a>(&'a dyn TargetModel, f64);

    impl TargetModel for Shifted<'_> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn log_density_unnorm(&self, x: &[f64]) -> f64 {
            self.0.log_density_unnorm(x) + self.1
        }
        fn log_density_and_grad(&self, x: &[f64], grad_out: &mut [f64]) -> f64 {
            self.0.log_density_and_grad(x, grad_out) + self.1
        }
    }

    #[test]
    fn marginal_weights_invariant_to_target_scale() {
        let g = GaussianMixture::kou20();
        let shifted = Shifted(&g, 123.456);
        let path = AnnealPath::generate(4, 0.2, 0.05, LambdaSchedule::Linear).unwrap();
        let mut rng = derive_rng(8, purpose::INIT, 3, 0);
        let prev = Ensemble::standard_normal_init(64, 2, &mut rng);
        let cur = ula_step(&path, 2, &g, &prev, 8).unwrap();
        let a = marginal_log_weights(&path, 2, &g, &cur, &prev, 64, 8).unwrap();
        let b = marginal_log_weights(&path, 2, &shifted, &cur, &prev, 64, 8).unwrap();
        let na = crate::ensemble::normalize_log_weights(&a).unwrap();
        let nb = crate::ensemble::normalize_log_weights(&b).unwrap();
        for (x, y) in na.iter().zip(&nb) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn jarzynski_increment_zero_for_static_fixed_point() {
        let g = StdGaussianEnergy(2);
        let path = AnnealPath::new(vec![1e-9], vec![0.0, 0.0]).unwrap();
        let x = [0.4, -0.9];
        let inc = jarzynski_log_weight_update(&path, 1, &g, &x, &x, 0.0);
        assert_eq!(inc, 0.0);
    }

    #[test]
    fn jarzynski_static_anneal_mean_weight_is_one() {
        // V_k identical for all k, so Z_K = Z_0 and E[e^{A_K}] = 1.
        let g = StdGaussianEnergy(1);
        let k_steps = 100usize;
        let delta = 0.05;
        let path = static_path(k_steps, delta);
        let n = 20_000usize;
        let cfg = AlmcConfig {
            num_particles: n,
            path,
            weight_mode: WeightMode::Jarzynski,
            ess_threshold: 1.0, // never triggers
            seed: 99,
            resample_method: ResampleMethod::Systematic,
        };
        let out = run_almc(&cfg, &g).unwrap();
        let weights: Vec<f64> = out.ensemble.log_weights().iter().map(|w| w.exp()).collect();
        let mean: f64 = weights.iter().sum::<f64>() / n as f64;
        let var: f64 = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean weight {mean} (se {se})");
        assert!(out.log_z_estimate.abs() < 3.0 * se);
    }

    #[test]
    fn run_almc_gaussian_anneal_moments() {
        let g = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let path = AnnealPath::generate(200, 0.05, 0.05, LambdaSchedule::Linear).unwrap();
        let n = 5000usize;
        let cfg = AlmcConfig {
            num_particles: n,
            path,
            weight_mode: WeightMode::Jarzynski,
            ess_threshold: n as f64 / 2.0,
            seed: 4,
            resample_method: ResampleMethod::Systematic,
        };
        let out = run_almc(&cfg, &g).unwrap();
        assert_eq!(out.diagnostics[0].ess, n as f64);
        assert_eq!(out.diagnostics[0].step, 0);
        let lw = out.ensemble.normalized_log_weights().unwrap();
        let mean = out.ensemble.weighted_mean().unwrap();
        for j in 0..2 {
            let se = {
                let mut acc = 0.0;
                for (i, row) in out.ensemble.positions().chunks_exact(2).enumerate() {
                    let w = lw[i].exp();
                    acc += w * w * (row[j] - mean[j]).powi(2);
                }
                acc.sqrt()
            };
            assert!(mean[j].abs() < 4.0 * se, "coord {j}: {} vs se {se}", mean[j]);
            let mut m2 = 0.0;
            for (i, row) in out.ensemble.positions().chunks_exact(2).enumerate() {
                m2 += lw[i].exp() * row[j] * row[j];
            }
            assert!((m2 - 1.0).abs() < 0.05, "second moment {m2}");
        }
    }

    #[test]
    fn run_almc_weights_invariant_to_target_scale() {
        let g = GaussianMixture::single(vec![1.0, 0.5], 0.9).unwrap();
        let shifted = Shifted(&g, -55.5);
        let mk = |target: &dyn TargetModel| {
            let cfg = AlmcConfig {
                num_particles: 256,
                path: AnnealPath::generate(50, 0.05, 0.02, LambdaSchedule::Linear).unwrap(),
                weight_mode: WeightMode::Jarzynski,
                ess_threshold: 128.0,
                seed: 12,
                resample_method: ResampleMethod::Systematic,
            };
            run_almc(&cfg, target).unwrap()
        };
        let a = mk(&g);
        let b = mk(&shifted);
        assert_eq!(a.ensemble.positions(), b.ensemble.positions());
        let na = a.ensemble.normalized_log_weights().unwrap();
        let nb = b.ensemble.normalized_log_weights().unwrap();
        for (x, y) in na.iter().zip(&nb) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn run_almc_bit_identical_across_thread_counts() {
        let g = GaussianMixture::single(vec![0.3, -0.3], 1.1).unwrap();
        let cfg = AlmcConfig {
            num_particles: 512,
            path: AnnealPath::generate(60, 0.08, 0.02, LambdaSchedule::Linear).unwrap(),
            weight_mode: WeightMode::Jarzynski,
            ess_threshold: 256.0,
            seed: 21,
            resample_method: ResampleMethod::Systematic,
        };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let r1 = pool1.install(|| run_almc(&cfg, &g).unwrap());
        let r4 = pool4.install(|| run_almc(&cfg, &g).unwrap());
        assert_eq!(r1.ensemble, r4.ensemble);
        assert_eq!(r1.log_z_estimate.to_bits(), r4.log_z_estimate.to_bits());
    }
}
