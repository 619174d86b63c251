//! Target densities: the sampling interface plus the concrete benchmark
//! targets (Gaussian mixtures and a discretized Allen-Cahn lattice field).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::log_sum_exp;
use crate::error::{Error, Result};
use crate::interpolant::InterpolantSchedule;

/// Unnormalized log-density with gradient. The pipeline only ever uses the
/// log-density up to an additive constant.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density_unnorm(&self, x: &[f64]) -> f64;

    fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.log_density_and_grad(x, &mut out);
        out
    }

    /// Log-density and gradient in one pass; hot loops call this to avoid
    /// evaluating mixture responsibilities twice.
    fn log_density_and_grad(&self, x: &[f64], grad_out: &mut [f64]) -> f64;
}

/// Isotropic Gaussian mixture with per-component scale `sigma_i` and mixing
/// weights summing to one. The stored log-density is normalized.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    means: Vec<f64>, // components x dim, row-major
    sigmas: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
    // log w_i - d ln sigma_i - (d/2) ln(2 pi), reused in every evaluation
    log_norm: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<f64>, sigmas: Vec<f64>, weights: Vec<f64>, dim: usize) -> Result<Self> {
        let k = sigmas.len();
        if k == 0 || weights.len() != k || means.len() != k * dim || dim == 0 {
            return Err(Error::Config("inconsistent mixture shapes".into()));
        }
        if sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("mixture sigmas must be positive".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let d = dim as f64;
        let log_norm = weights
            .iter()
            .zip(&sigmas)
            .map(|(&w, &s)| w.ln() - d * s.ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
            .collect();
        Ok(Self {
            means,
            sigmas,
            weights,
            dim,
            log_norm,
        })
    }

    pub fn single(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(mean, vec![sigma], vec![1.0], dim)
    }

    /// The 20-component planar benchmark mixture: means spread over
    /// `[0, 10]^2`, all scales `0.1`, all weights `0.05`. Modes sit many
    /// standard deviations apart, so local samplers get trapped.
    pub fn kou20() -> Self {
        #[rustfmt::skip]
        const MEANS: [[f64; 2]; 20] = [
            [2.18, 5.76], [8.67, 9.59], [4.24, 8.48], [8.41, 1.68], [3.93, 8.82],
            [3.25, 3.47], [1.70, 0.50], [4.59, 5.60], [6.91, 5.81], [6.87, 5.40],
            [5.41, 2.65], [2.70, 7.88], [4.98, 3.70], [1.14, 2.39], [8.33, 9.50],
            [4.93, 1.50], [1.83, 0.09], [2.26, 0.31], [5.54, 6.86], [1.69, 8.11],
        ];
        let means: Vec<f64> = MEANS.iter().flatten().copied().collect();
        Self::new(means, vec![0.1; 20], vec![0.05; 20], 2).expect("static preset")
    }

    /// Five well-separated components in 100 dimensions; the means live in the
    /// first two coordinates and each component has covariance `0.1 * I`.
    pub fn gmm100d5() -> Self {
        let d = 100;
        let heads: [[f64; 2]; 5] = [[10.0, 10.0], [15.0, 15.0], [5.0, 15.0], [15.0, 5.0], [5.0, 5.0]];
        let mut means = vec![0.0; 5 * d];
        for (i, head) in heads.iter().enumerate() {
            means[i * d] = head[0];
            means[i * d + 1] = head[1];
        }
        let sigma = 0.1f64.sqrt();
        Self::new(means, vec![sigma; 5], vec![0.2; 5], d).expect("static preset")
    }

    pub fn num_components(&self) -> usize {
        self.sigmas.len()
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Exact normalized log-density via log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let mut terms = Vec::with_capacity(self.num_components());
        for i in 0..self.num_components() {
            let mu = self.mean(i);
            let mut sq = 0.0;
            for (&xj, &mj) in x.iter().zip(mu) {
                let diff = xj - mj;
                sq += diff * diff;
            }
            terms.push(self.log_norm[i] - sq / (2.0 * self.sigmas[i] * self.sigmas[i]));
        }
        log_sum_exp(&terms)
    }

    /// `m` i.i.d. draws: a categorical component pick, then an isotropic
    /// Gaussian around its mean. Returns an `m x d` row-major array.
    pub fn sample(&self, m: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut cdf = Vec::with_capacity(self.num_components());
        let mut acc = 0.0;
        for &w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let mut out = vec![0.0; m * self.dim];
        for row in out.chunks_exact_mut(self.dim) {
            let u: f64 = rng.random::<f64>() * acc;
            let comp = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(i) | Err(i) => i.min(self.num_components() - 1),
            };
            let mu = &self.means[comp * self.dim..(comp + 1) * self.dim];
            let s = self.sigmas[comp];
            for (v, &mj) in row.iter_mut().zip(mu) {
                let z: f64 = rng.sample(StandardNormal);
                *v = mj + s * z;
            }
        }
        out
    }

    /// Closed-form flow velocity for a mixture target.
    ///
    /// Conditioning the bridge `x_t = alpha z + beta x1` on component `i`
    /// gives `x_t ~ N(beta mu_i, (beta^2 sigma_i^2 + alpha^2) I)`, so the
    /// conditional mean of `x1` is a responsibility-weighted combination of
    /// per-component posterior means `(beta sigma_i^2 x + alpha^2 mu_i) /
    /// (beta^2 sigma_i^2 + alpha^2)`.
    pub fn exact_velocity(
        &self,
        schedule: InterpolantSchedule,
        t: f64,
        x: &[f64],
    ) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let (a, c) = schedule.velocity_coeffs(t)?;
        let v = schedule.eval(t)?;
        let (alpha, beta) = (v.alpha, v.beta);
        let kc = self.num_components();
        let mut log_resp = Vec::with_capacity(kc);
        for i in 0..kc {
            let s2 = self.sigmas[i] * self.sigmas[i];
            let var = beta * beta * s2 + alpha * alpha;
            let mu = self.mean(i);
            let mut sq = 0.0;
            for (&xj, &mj) in x.iter().zip(mu) {
                let diff = xj - beta * mj;
                sq += diff * diff;
            }
            log_resp
                .push(self.weights[i].ln() - 0.5 * self.dim as f64 * var.ln() - sq / (2.0 * var));
        }
        let lse = log_sum_exp(&log_resp);
        let mut cond_mean = vec![0.0; self.dim];
        for i in 0..kc {
            let r = (log_resp[i] - lse).exp();
            let s2 = self.sigmas[i] * self.sigmas[i];
            let var = beta * beta * s2 + alpha * alpha;
            let mu = self.mean(i);
            for ((cm, &xj), &mj) in cond_mean.iter_mut().zip(x).zip(mu) {
                *cm += r * (beta * s2 * xj + alpha * alpha * mj) / var;
            }
        }
        Ok(x.iter()
            .zip(&cond_mean)
            .map(|(&xj, &ej)| a * xj + c * ej)
            .collect())
    }
}

impl TargetModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_unnorm(&self, x: &[f64]) -> f64 {
        self.log_density(x)
    }

    fn log_density_and_grad(&self, x: &[f64], grad_out: &mut [f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(grad_out.len(), self.dim);
        let kc = self.num_components();
        let mut terms = Vec::with_capacity(kc);
        for i in 0..kc {
            let mu = self.mean(i);
            let mut sq = 0.0;
            for (&xj, &mj) in x.iter().zip(mu) {
                let diff = xj - mj;
                sq += diff * diff;
            }
            terms.push(self.log_norm[i] - sq / (2.0 * self.sigmas[i] * self.sigmas[i]));
        }
        let lse = log_sum_exp(&terms);
        grad_out.fill(0.0);
        for i in 0..kc {
            let r = (terms[i] - lse).exp();
            if r == 0.0 {
                continue;
            }
            let inv_s2 = 1.0 / (self.sigmas[i] * self.sigmas[i]);
            let mu = self.mean(i);
            for ((g, &xj), &mj) in grad_out.iter_mut().zip(x).zip(mu) {
                *g += r * (mj - xj) * inv_s2;
            }
        }
        lse
    }
}

/// Discretized double-well lattice field on `d` interior grid points with
/// zero Dirichlet boundaries and spacing `1/d`. Unnormalized:
///
/// `log mu(x) = -beta ( a/(2 ds) * sum_{i=1..d+1} (x_i - x_{i-1})^2
///                      + b ds / 4 * sum_{i=1..d} (1 - x_i^2)^2 )`.
#[derive(Debug, Clone)]
pub struct AllenCahn1D {
    pub d: usize,
    pub a: f64,
    pub b: f64,
    pub beta: f64,
}

impl AllenCahn1D {
    pub fn new(d: usize, a: f64, b: f64, beta: f64) -> Result<Self> {
        if d == 0 || !(a > 0.0) || !(b > 0.0) || !(beta > 0.0) {
            return Err(Error::Config(
                "allen-cahn parameters must satisfy d >= 1, a > 0, b > 0, beta > 0".into(),
            ));
        }
        Ok(Self { d, a, b, beta })
    }

    /// Benchmark setting: `a = 0.1`, `b = 1/a = 10`, `beta = 20`.
    pub fn benchmark(d: usize) -> Self {
        Self::new(d, 0.1, 10.0, 20.0).expect("static preset")
    }

    fn ds(&self) -> f64 {
        1.0 / self.d as f64
    }
}

impl TargetModel for AllenCahn1D {
    fn dim(&self) -> usize {
        self.d
    }

    fn log_density_unnorm(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.d);
        let ds = self.ds();
        let mut grad_sq = 0.0;
        let mut prev = 0.0; // x_0 = 0
        for &xi in x {
            let diff = xi - prev;
            grad_sq += diff * diff;
            prev = xi;
        }
        grad_sq += prev * prev; // x_{d+1} = 0
        let mut quartic = 0.0;
        for &xi in x {
            let w = 1.0 - xi * xi;
            quartic += w * w;
        }
        -self.beta * (0.5 * self.a / ds * grad_sq + 0.25 * self.b * ds * quartic)
    }

    fn log_density_and_grad(&self, x: &[f64], grad_out: &mut [f64]) -> f64 {
        debug_assert_eq!(grad_out.len(), self.d);
        let ds = self.ds();
        let lap_coeff = self.a / ds;
        for j in 0..self.d {
            let left = if j == 0 { 0.0 } else { x[j - 1] };
            let right = if j + 1 == self.d { 0.0 } else { x[j + 1] };
            let lap = 2.0 * x[j] - left - right;
            let quart = self.b * ds * x[j] * (1.0 - x[j] * x[j]);
            grad_out[j] = -self.beta * (lap_coeff * lap - quart);
        }
        self.log_density_unnorm(x)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Standard Gaussian potential with no normalizer: `log rho = -|x|^2 / 2`.
    pub struct StdGaussianEnergy(pub usize);

    impl TargetModel for StdGaussianEnergy {
        fn dim(&self) -> usize {
            self.0
        }

        fn log_density_unnorm(&self, x: &[f64]) -> f64 {
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }

        fn log_density_and_grad(&self, x: &[f64], grad_out: &mut [f64]) -> f64 {
            for (g, &xi) in grad_out.iter_mut().zip(x) {
                *g = -xi;
            }
            self.log_density_unnorm(x)
        }
    }

    /// Centered finite-difference check of a target gradient at `points`.
    pub fn assert_grad_matches_fd(target: &dyn TargetModel, points: &[Vec<f64>], tol: f64) {
        let h = 1e-5;
        for x in points {
            let grad = target.grad_log_density(x);
            let mut xp = x.clone();
            for j in 0..target.dim() {
                let orig = xp[j];
                xp[j] = orig + h;
                let up = target.log_density_unnorm(&xp);
                xp[j] = orig - h;
                let dn = target.log_density_unnorm(&xp);
                xp[j] = orig;
                let fd = (up - dn) / (2.0 * h);
                let scale = grad[j].abs().max(1.0);
                assert!(
                    (fd - grad[j]).abs() / scale < tol,
                    "coord {j}: fd {fd} vs analytic {}",
                    grad[j]
                );
            }
        }
    }

    /// Trapezoid-quadrature oracle for the one-dimensional conditional-mean
    /// integral behind the flow velocity; the master check for every velocity
    /// estimator in the crate. Independent of `exact_velocity`'s conjugate
    /// algebra: it integrates the bridge-weighted density directly.
    pub fn quadrature_velocity(
        g: &GaussianMixture,
        schedule: InterpolantSchedule,
        t: f64,
        x: f64,
    ) -> f64 {
        let v = schedule.eval(t).unwrap();
        let (a, c) = schedule.velocity_coeffs(t).unwrap();
        let nodes = 100_000usize;
        let (lo, hi) = (-20.0, 20.0);
        let h = (hi - lo) / nodes as f64;
        let mut log_terms = Vec::with_capacity(nodes + 1);
        let mut xs = Vec::with_capacity(nodes + 1);
        for i in 0..=nodes {
            let x1 = lo + i as f64 * h;
            let diff = x - v.beta * x1;
            let lt = -diff * diff / (2.0 * v.alpha * v.alpha) + g.log_density(&[x1]);
            let trap = if i == 0 || i == nodes { 0.5f64.ln() } else { 0.0 };
            log_terms.push(lt + trap);
            xs.push(x1);
        }
        let lse = crate::ensemble::log_sum_exp(&log_terms);
        let mut num = 0.0;
        for (lt, x1) in log_terms.iter().zip(&xs) {
            num += (lt - lse).exp() * x1;
        }
        a * x + c * num
    }
}
