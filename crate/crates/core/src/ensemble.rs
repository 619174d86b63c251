//! Weighted particle ensembles and numerically stable log-weight arithmetic.
//!
//! Weights are kept in log space end-to-end; exponentials only ever appear
//! inside log-sum-exp style reductions, so weight ranges spanning hundreds of
//! nats stay representable. All reductions run in a fixed index order, which
//! keeps results independent of thread scheduling.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` particle positions in `R^d` plus per-particle log-weights.
///
/// Invariants enforced at construction: positions finite, at least one finite
/// log-weight, no `NaN`/`+inf` log-weights (`-inf` marks a zero weight).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    positions: Vec<f64>, // row-major n x d
    log_weights: Vec<f64>,
    dim: usize,
    step_index: usize,
}

impl Ensemble {
    pub fn new(
        positions: Vec<f64>,
        log_weights: Vec<f64>,
        dim: usize,
        step_index: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("dimension must be >= 1".into()));
        }
        if log_weights.is_empty() || positions.len() != log_weights.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: log_weights.len() * dim,
                got: positions.len(),
            });
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("positions contain non-finite values".into()));
        }
        check_log_weights(&log_weights)?;
        Ok(Self {
            positions,
            log_weights,
            dim,
            step_index,
        })
    }

    /// `n` particles drawn from `N(0, I_d)` with unit weights (`log w = 0`).
    pub fn standard_normal_init(n: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut positions = vec![0.0; n * dim];
        for v in positions.iter_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        Self {
            positions,
            log_weights: vec![0.0; n],
            dim,
            step_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn set_step_index(&mut self, step: usize) {
        self.step_index = step;
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn log_weights_mut(&mut self) -> &mut [f64] {
        &mut self.log_weights
    }

    /// Normalized log-weights (see [`normalize_log_weights`]).
    pub fn normalized_log_weights(&self) -> Result<Vec<f64>> {
        normalize_log_weights(&self.log_weights)
    }

    /// Effective sample size of the current weights, in `[1, n]`.
    pub fn ess(&self) -> Result<f64> {
        ess(&self.log_weights)
    }

    /// Self-normalized weighted mean of the positions.
    pub fn weighted_mean(&self) -> Result<Vec<f64>> {
        let lw = self.normalized_log_weights()?;
        let mut mean = vec![0.0; self.dim];
        for (i, row) in self.positions.chunks_exact(self.dim).enumerate() {
            let w = lw[i].exp();
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += w * x;
            }
        }
        Ok(mean)
    }
}

fn check_log_weights(lw: &[f64]) -> Result<()> {
    if lw.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::DegenerateWeights(
            "log-weights contain NaN or +inf".into(),
        ));
    }
    if !lw.iter().any(|v| v.is_finite()) {
        return Err(Error::DegenerateWeights("all log-weights are -inf".into()));
    }
    Ok(())
}

/// Log of the summed exponentials of `xs`, evaluated in index order with the
/// usual max shift. Returns `-inf` for an all-`-inf` (or empty) input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max; // empty or all -inf (NaN callers are rejected upstream)
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Shift log-weights so their exponentials sum to one.
///
/// Invariant to adding any constant to all entries, and idempotent.
pub fn normalize_log_weights(lw: &[f64]) -> Result<Vec<f64>> {
    check_log_weights(lw)?;
    let lse = log_sum_exp(lw);
    Ok(lw.iter().map(|&x| x - lse).collect())
}

/// Effective sample size `(sum w)^2 / sum w^2`, computed in log space as
/// `exp(2*lse(lw) - lse(2*lw))`.
pub fn ess(lw: &[f64]) -> Result<f64> {
    check_log_weights(lw)?;
    let lse = log_sum_exp(lw);
    let doubled: Vec<f64> = lw.iter().map(|&x| 2.0 * x).collect();
    let lse2 = log_sum_exp(&doubled);
    Ok((2.0 * lse - lse2).exp())
}

/// How resampling picks ancestors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleMethod {
    /// Single uniform offset, stratified over `[0,1)`: O(n), low variance, and
    /// each copy count is within one of `n * W_i`.
    Systematic,
    /// Independent categorical draws; higher variance, kept for tests that
    /// need i.i.d. ancestor picks.
    Multinomial,
}

/// Draw a same-size ensemble from `e` with probabilities proportional to its
/// weights; output log-weights are all `-ln n` and the step index is kept.
pub fn resample(e: &Ensemble, rng: &mut impl Rng, method: ResampleMethod) -> Result<Ensemble> {
    let n = e.len();
    let lw = e.normalized_log_weights()?;
    let weights: Vec<f64> = lw.iter().map(|&x| x.exp()).collect();
    let ancestors = match method {
        ResampleMethod::Systematic => systematic_ancestors(&weights, rng.random::<f64>()),
        ResampleMethod::Multinomial => multinomial_ancestors(&weights, rng),
    };
    let d = e.dim();
    let mut positions = Vec::with_capacity(n * d);
    for &a in &ancestors {
        positions.extend_from_slice(e.position(a));
    }
    let log_w = -(n as f64).ln();
    Ensemble::new(positions, vec![log_w; n], d, e.step_index())
}

/// Ancestor indices for systematic resampling with offset `u` in `[0, 1)`.
fn systematic_ancestors(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut ancestors = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut i = 0usize;
    for j in 0..n {
        let point = (j as f64 + u) / n as f64;
        while point >= cumulative && i + 1 < n {
            i += 1;
            cumulative += weights[i];
        }
        ancestors.push(i);
    }
    ancestors
}

fn multinomial_ancestors(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let n = weights.len();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cdf.push(acc);
    }
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(idx) | Err(idx) => idx.min(n - 1),
            }
        })
        .collect()
}

/// Sidecar metadata written next to every ensemble CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub n: usize,
    pub d: usize,
    pub step_index: usize,
    pub seed: u64,
}

/// Write `e` as CSV (`particle,coord_0..coord_{d-1},log_weight`) plus a JSON
/// sidecar at the same path with extension `json`.
pub fn write_ensemble_csv(e: &Ensemble, path: &Path, seed: u64) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "particle")?;
    for j in 0..e.dim() {
        write!(w, ",coord_{j}")?;
    }
    writeln!(w, ",log_weight")?;
    for i in 0..e.len() {
        write!(w, "{i}")?;
        for &x in e.position(i) {
            write!(w, ",{x}")?;
        }
        writeln!(w, ",{}", e.log_weights()[i])?;
    }
    w.flush()?;
    let meta = EnsembleMeta {
        n: e.len(),
        d: e.dim(),
        step_index: e.step_index(),
        seed,
    };
    let sidecar = path.with_extension("json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Read an ensemble written by [`write_ensemble_csv`].
pub fn read_ensemble_csv(path: &Path) -> Result<(Ensemble, EnsembleMeta)> {
    let meta: EnsembleMeta =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut positions = Vec::with_capacity(meta.n * meta.d);
    let mut log_weights = Vec::with_capacity(meta.n);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            continue; // header
        }
        let mut fields = line.split(',');
        let _particle = fields.next();
        let mut row: Vec<f64> = Vec::with_capacity(meta.d + 1);
        for f in fields {
            row.push(
                f.parse::<f64>()
                    .map_err(|e| Error::Serde(format!("bad float at line {lineno}: {e}")))?,
            );
        }
        if row.len() != meta.d + 1 {
            return Err(Error::Serde(format!(
                "line {lineno}: expected {} fields, got {}",
                meta.d + 1,
                row.len()
            )));
        }
        log_weights.push(row.pop().unwrap());
        positions.extend_from_slice(&row);
    }
    let e = Ensemble::new(positions, log_weights, meta.d, meta.step_index)?;
    Ok((e, meta))
}
