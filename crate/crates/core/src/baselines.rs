//! Comparison samplers: single-chain Hamiltonian Monte Carlo and the per-step
//! Monte Carlo ODE estimator that draws fresh Gaussian proposals instead of
//! reusing annealed particles.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::{ess, Ensemble};
use crate::error::{Error, Result};
use crate::flow::{integrate, FlowConfig, VelocityEvaluator};
use crate::interpolant::InterpolantSchedule;
use crate::rng::{derive_rng, purpose};
use crate::target::TargetModel;

/// Plain HMC settings: identity mass matrix, no adaptation.
#[derive(Debug, Clone)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub burn_in: usize,
    pub num_samples: usize,
    pub seed: u64,
}

/// Post-burn-in samples and the post-burn-in acceptance rate.
#[derive(Debug, Clone)]
pub struct HmcOutput {
    pub samples: Vec<f64>, // num_samples x d, row-major
    pub acceptance_rate: f64,
}

/// `leapfrog_steps` leapfrog updates of `(x, p)` under the Hamiltonian
/// `-log rho(x) + |p|^2 / 2`. Returns the proposal and its potential/grad so
/// the caller can finish the accept test without re-evaluating.
pub fn leapfrog(
    target: &dyn TargetModel,
    x0: &[f64],
    p0: &[f64],
    step_size: f64,
    steps: usize,
) -> (Vec<f64>, Vec<f64>, f64, Vec<f64>) {
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut p = p0.to_vec();
    let mut grad = vec![0.0; d];
    let mut log_rho = target.log_density_and_grad(&x, &mut grad);
    for _ in 0..steps {
        for j in 0..d {
            p[j] += 0.5 * step_size * grad[j];
        }
        for j in 0..d {
            x[j] += step_size * p[j];
        }
        log_rho = target.log_density_and_grad(&x, &mut grad);
        for j in 0..d {
            p[j] += 0.5 * step_size * grad[j];
        }
    }
    (x, p, log_rho, grad)
}

/// Run one HMC chain from `init`: fresh Gaussian momentum each iteration,
/// leapfrog proposal, Metropolis accept on the Hamiltonian difference. A
/// non-finite Hamiltonian rejects the proposal and still counts toward the
/// rate.
pub fn hmc_chain(cfg: &HmcConfig, target: &dyn TargetModel, init: &[f64]) -> Result<HmcOutput> {
    if init.len() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: init.len(),
        });
    }
    if !(cfg.step_size > 0.0) || cfg.leapfrog_steps == 0 {
        return Err(Error::Config("need step_size > 0 and leapfrog_steps >= 1".into()));
    }
    let d = target.dim();
    let mut x = init.to_vec();
    let mut log_rho = target.log_density_unnorm(&x);
    let total = cfg.burn_in + cfg.num_samples;
    let mut samples = Vec::with_capacity(cfg.num_samples * d);
    let mut accepted_post = 0usize;
    for iter in 0..total {
        let mut rng = derive_rng(cfg.seed, purpose::HMC, iter as u64, 0);
        let p0: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let kinetic0: f64 = 0.5 * p0.iter().map(|v| v * v).sum::<f64>();
        let h0 = -log_rho + kinetic0;
        let (x_new, p_new, log_rho_new, _) =
            leapfrog(target, &x, &p0, cfg.step_size, cfg.leapfrog_steps);
        let kinetic1: f64 = 0.5 * p_new.iter().map(|v| v * v).sum::<f64>();
        let h1 = -log_rho_new + kinetic1;
        let accept = if h1.is_finite() {
            let log_u = rng.random::<f64>().max(f64::MIN_POSITIVE).ln();
            log_u < h0 - h1
        } else {
            false
        };
        if accept {
            x = x_new;
            log_rho = log_rho_new;
        }
        if iter >= cfg.burn_in {
            if accept {
                accepted_post += 1;
            }
            samples.extend_from_slice(&x);
        }
    }
    Ok(HmcOutput {
        samples,
        acceptance_rate: accepted_post as f64 / cfg.num_samples.max(1) as f64,
    })
}

/// Fresh-proposal velocity estimate: draw `n_mc` proposals from `N(0, I_d)`,
/// weight them by `log rho(z) - log phi(z)`, and apply the same log-domain
/// kernel ratio as the particle estimator.
pub fn mc_ode_velocity(
    schedule: InterpolantSchedule,
    t: f64,
    x: &[f64],
    target: &dyn TargetModel,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let batch = McOdeBatch::draw(target, n_mc, rng)?;
    let eval = VelocityEvaluator::new(schedule, t, &batch.proposals)?;
    let mut out = vec![0.0; x.len()];
    eval.velocity_into(x, &mut out)?;
    Ok(out)
}

/// One batch of Gaussian proposals with target importance weights.
struct McOdeBatch {
    proposals: Ensemble,
    weight_ess: f64,
}

impl McOdeBatch {
    fn draw(target: &dyn TargetModel, n_mc: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = target.dim();
        let mut positions = vec![0.0; n_mc * d];
        for v in positions.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let mut log_weights = vec![0.0; n_mc];
        crate::parallel::fill_indexed(&mut log_weights, |i| {
            let z = &positions[i * d..(i + 1) * d];
            let sq: f64 = z.iter().map(|v| v * v).sum();
            // log phi(z) up to its constant; the constant cancels in the
            // self-normalized ratio.
            target.log_density_unnorm(z) + 0.5 * sq
        });
        let weight_ess = ess(&log_weights)?;
        let proposals = Ensemble::new(positions, log_weights, d, 0)?;
        Ok(Self {
            proposals,
            weight_ess,
        })
    }
}

/// Per-run diagnostics for the Monte Carlo ODE baseline.
#[derive(Debug, Clone)]
pub struct McOdeOutput {
    pub samples: Vec<f64>, // N x d, row-major
    /// Proposal-weight effective sample size at each flow step.
    pub proposal_ess: Vec<f64>,
    /// Smallest proposal ESS seen; a handful of effective samples out of
    /// `n_mc` marks weight collapse.
    pub min_proposal_ess: f64,
    /// True when the proposal weights collapsed (min ESS below 5).
    pub degenerate: bool,
}

/// Degeneracy threshold for the fresh-proposal weights.
pub const MC_ODE_ESS_FLOOR: f64 = 5.0;

/// The flow loop with the velocity estimated from `n_mc` fresh Gaussian
/// proposals per step (drawn once per step and shared across test particles).
pub fn run_mc_ode(
    cfg: &FlowConfig,
    target: &dyn TargetModel,
    n_mc: usize,
) -> Result<McOdeOutput> {
    if n_mc == 0 {
        return Err(Error::Config("need at least one proposal".into()));
    }
    let mut proposal_ess = Vec::with_capacity(cfg.num_steps);
    let samples = integrate(
        cfg,
        target.dim(),
        |m, t| {
            let mut rng = derive_rng(cfg.seed, purpose::MC_PROPOSAL, m as u64, 0);
            let batch = McOdeBatch::draw(target, n_mc, &mut rng)?;
            proposal_ess.push(batch.weight_ess);
            VelocityEvaluator::new(cfg.schedule, t, &batch.proposals)
        },
        |eval, _t, x, out| eval.velocity_into(x, out),
    )?;
    let min_proposal_ess = proposal_ess.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(McOdeOutput {
        samples,
        proposal_ess,
        min_proposal_ess,
        degenerate: min_proposal_ess < MC_ODE_ESS_FLOOR,
    })
}
