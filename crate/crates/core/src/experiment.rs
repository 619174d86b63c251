//! Experiment runner: typed configs with named presets, per-seed execution of
//! the three sampling methods, metric computation, output persistence, and
//! aggregate comparison tables.
//!
//! Outputs per `(method, seed)`: a sample CSV in the ensemble format, a
//! diagnostics JSONL stream, and a metric-report JSON. A run directory also
//! carries the resolved config, a metadata JSON recording scale and metric
//! conventions, and `table.csv` / `table.txt` aggregates (mean +/- std across
//! seeds). Reruns with the same config and seeds reproduce every output
//! byte-for-byte except the wall-clock `runtime_seconds` field inside the
//! metric reports.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::almc::{run_almc, AlmcConfig, AnnealPath, LambdaSchedule, WeightMode};
use crate::baselines::{hmc_chain, run_mc_ode, HmcConfig};
use crate::ensemble::{write_ensemble_csv, Ensemble, ResampleMethod};
use crate::error::{Error, Result};
use crate::flow::{run_flow, FlowConfig};
use crate::interpolant::InterpolantSchedule;
use crate::metrics::{
    energy_distance, ksd_imq, l2_moment_errors, mmd_rbf, sliced_wasserstein, MetricReport,
};
use crate::rng::{derive_rng, purpose};
use crate::target::{AllenCahn1D, GaussianMixture, TargetModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AlmcOde,
    McOde,
    Hmc,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::AlmcOde => "almc_ode",
            Method::McOde => "mc_ode",
            Method::Hmc => "hmc",
        }
    }

    /// Fixed column order for tables, independent of config order.
    fn rank(&self) -> usize {
        match self {
            Method::AlmcOde => 0,
            Method::McOde => 1,
            Method::Hmc => 2,
        }
    }
}

/// Target selection: a named preset, Allen-Cahn parameters, or an inline
/// mixture specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    Kou20,
    Gmm100d5,
    AllenCahn {
        d: usize,
        #[serde(default = "default_ac_a")]
        a: f64,
        #[serde(default = "default_ac_b")]
        b: f64,
        #[serde(default = "default_ac_beta")]
        beta: f64,
    },
    Mixture {
        dim: usize,
        means: Vec<Vec<f64>>,
        sigmas: Vec<f64>,
        weights: Vec<f64>,
    },
}

fn default_ac_a() -> f64 {
    0.1
}
fn default_ac_b() -> f64 {
    10.0
}
fn default_ac_beta() -> f64 {
    20.0
}

/// A target instance with enough structure to drive target-specific output
/// (mode coverage for mixtures, field polarity for lattice fields).
pub enum ResolvedTarget {
    Mixture(GaussianMixture),
    AllenCahn(AllenCahn1D),
}

impl ResolvedTarget {
    pub fn model(&self) -> &dyn TargetModel {
        match self {
            ResolvedTarget::Mixture(g) => g,
            ResolvedTarget::AllenCahn(t) => t,
        }
    }

    pub fn as_mixture(&self) -> Option<&GaussianMixture> {
        match self {
            ResolvedTarget::Mixture(g) => Some(g),
            ResolvedTarget::AllenCahn(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        self.model().dim()
    }
}

impl TargetSpec {
    pub fn resolve(&self) -> Result<ResolvedTarget> {
        Ok(match self {
            TargetSpec::Kou20 => ResolvedTarget::Mixture(GaussianMixture::kou20()),
            TargetSpec::Gmm100d5 => ResolvedTarget::Mixture(GaussianMixture::gmm100d5()),
            TargetSpec::AllenCahn { d, a, b, beta } => {
                ResolvedTarget::AllenCahn(AllenCahn1D::new(*d, *a, *b, *beta)?)
            }
            TargetSpec::Mixture {
                dim,
                means,
                sigmas,
                weights,
            } => {
                let flat: Vec<f64> = means.iter().flatten().copied().collect();
                ResolvedTarget::Mixture(GaussianMixture::new(
                    flat,
                    sigmas.clone(),
                    weights.clone(),
                    *dim,
                )?)
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub name: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_reference_samples")]
    pub reference_samples: usize,
}

fn default_reference_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlmcSection {
    pub particles: usize,
    pub steps: usize,
    pub delta_start: f64,
    pub delta_end: f64,
    #[serde(default = "default_lambda_kind")]
    pub lambda: String,
    #[serde(default = "default_lambda_rate")]
    pub lambda_rate: f64,
    #[serde(default = "default_ess_frac")]
    pub ess_threshold_frac: f64,
    #[serde(default = "default_weight_mode")]
    pub weight_mode: String,
    #[serde(default = "default_marginal_subsample")]
    pub marginal_subsample: usize,
    #[serde(default = "default_marginal_stride")]
    pub marginal_stride: usize,
}

fn default_lambda_kind() -> String {
    "linear".into()
}
fn default_lambda_rate() -> f64 {
    50.0
}
fn default_ess_frac() -> f64 {
    0.5
}
fn default_weight_mode() -> String {
    "jarzynski".into()
}
fn default_marginal_subsample() -> usize {
    2048
}
fn default_marginal_stride() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowSection {
    #[serde(default = "default_interpolant")]
    pub interpolant: String,
    pub test_particles: usize,
    #[serde(default = "default_flow_steps")]
    pub steps: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_interpolant() -> String {
    "follmer".into()
}
fn default_flow_steps() -> usize {
    100
}
fn default_epsilon() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McOdeSection {
    #[serde(default = "default_mc_proposals")]
    pub proposals: usize,
}

fn default_mc_proposals() -> usize {
    10_000
}

impl Default for McOdeSection {
    fn default() -> Self {
        Self {
            proposals: default_mc_proposals(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmcSection {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub burn_in: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSection {
    #[serde(default = "default_swd_projections")]
    pub swd_projections: usize,
}

fn default_swd_projections() -> usize {
    200
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            swd_projections: default_swd_projections(),
        }
    }
}

/// Full experiment description, readable from a TOML file with one section
/// per module.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub target: TargetSpec,
    pub almc: AlmcSection,
    pub flow: FlowSection,
    #[serde(default)]
    pub mc_ode: McOdeSection,
    pub hmc: HmcSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        self.target.resolve()?;
        self.lambda_schedule()?;
        self.weight_mode()?;
        self.interpolant()?;
        Ok(())
    }

    pub fn lambda_schedule(&self) -> Result<LambdaSchedule> {
        match self.almc.lambda.as_str() {
            "linear" => Ok(LambdaSchedule::Linear),
            "exp_saturating" => Ok(LambdaSchedule::ExpSaturating {
                rate: self.almc.lambda_rate,
            }),
            other => Err(Error::Config(format!(
                "unknown lambda schedule '{other}' (expected linear | exp_saturating)"
            ))),
        }
    }

    pub fn weight_mode(&self) -> Result<WeightMode> {
        match self.almc.weight_mode.as_str() {
            "jarzynski" => Ok(WeightMode::Jarzynski),
            "marginal" => Ok(WeightMode::Marginal {
                subsample: self.almc.marginal_subsample,
                stride: self.almc.marginal_stride,
            }),
            other => Err(Error::Config(format!(
                "unknown weight mode '{other}' (expected jarzynski | marginal)"
            ))),
        }
    }

    pub fn interpolant(&self) -> Result<InterpolantSchedule> {
        self.flow.interpolant.parse()
    }

    /// Multiply particle counts and chain length by `f` (floor, at least 1).
    pub fn apply_scale(&mut self, f: f64) -> Result<()> {
        if !(f > 0.0) {
            return Err(Error::Config(format!("scale {f} must be positive")));
        }
        let scale = |v: usize| ((v as f64 * f).round() as usize).max(1);
        self.almc.particles = scale(self.almc.particles);
        self.almc.steps = scale(self.almc.steps);
        self.flow.test_particles = scale(self.flow.test_particles);
        Ok(())
    }
}

/// Benchmark presets. At scale 1 these match the published experiment
/// settings; the planar-mixture anneal schedule is unpublished, so its values
/// are this crate's defaults (recorded in run metadata).
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "gmm2d" => Ok(ExperimentConfig {
            experiment: ExperimentSection {
                name: "gmm2d".into(),
                methods: vec![Method::AlmcOde, Method::McOde, Method::Hmc],
                seeds: (1..=20).collect(),
                reference_samples: 10_000,
            },
            target: TargetSpec::Kou20,
            almc: AlmcSection {
                particles: 10_000,
                steps: 1000,
                delta_start: 0.5,
                delta_end: 0.01,
                lambda: "linear".into(),
                lambda_rate: default_lambda_rate(),
                ess_threshold_frac: 0.5,
                weight_mode: "jarzynski".into(),
                marginal_subsample: default_marginal_subsample(),
                marginal_stride: default_marginal_stride(),
            },
            flow: FlowSection {
                interpolant: "follmer".into(),
                test_particles: 10_000,
                steps: 100,
                epsilon: 0.01,
            },
            mc_ode: McOdeSection { proposals: 10_000 },
            hmc: HmcSection {
                step_size: 0.05,
                leapfrog_steps: 10,
                burn_in: 1000,
                samples: 10_000,
            },
            metrics: MetricsSection::default(),
        }),
        "gmm100d" => Ok(ExperimentConfig {
            experiment: ExperimentSection {
                name: "gmm100d".into(),
                methods: vec![Method::AlmcOde, Method::Hmc],
                seeds: (1..=10).collect(),
                reference_samples: 10_000,
            },
            target: TargetSpec::Gmm100d5,
            almc: AlmcSection {
                particles: 10_000,
                steps: 1000,
                delta_start: 1.0,
                delta_end: 0.1,
                lambda: "linear".into(),
                lambda_rate: default_lambda_rate(),
                ess_threshold_frac: 0.5,
                weight_mode: "jarzynski".into(),
                marginal_subsample: default_marginal_subsample(),
                marginal_stride: default_marginal_stride(),
            },
            flow: FlowSection {
                interpolant: "follmer".into(),
                test_particles: 10_000,
                steps: 100,
                epsilon: 0.01,
            },
            mc_ode: McOdeSection { proposals: 10_000 },
            hmc: HmcSection {
                step_size: 0.05,
                leapfrog_steps: 10,
                burn_in: 1000,
                samples: 10_000,
            },
            metrics: MetricsSection::default(),
        }),
        "allen_cahn" => Ok(ExperimentConfig {
            experiment: ExperimentSection {
                name: "allen_cahn".into(),
                methods: vec![Method::AlmcOde, Method::McOde, Method::Hmc],
                seeds: vec![1],
                reference_samples: 0,
            },
            target: TargetSpec::AllenCahn {
                d: 64,
                a: 0.1,
                b: 10.0,
                beta: 20.0,
            },
            almc: AlmcSection {
                particles: 10_000,
                steps: 10_000,
                delta_start: 0.1,
                delta_end: 0.001,
                lambda: "exp_saturating".into(),
                lambda_rate: 50.0,
                ess_threshold_frac: 0.5,
                weight_mode: "jarzynski".into(),
                marginal_subsample: default_marginal_subsample(),
                marginal_stride: default_marginal_stride(),
            },
            flow: FlowSection {
                interpolant: "follmer".into(),
                test_particles: 1000,
                steps: 100,
                epsilon: 0.01,
            },
            mc_ode: McOdeSection { proposals: 10_000 },
            hmc: HmcSection {
                step_size: 0.02,
                leapfrog_steps: 30,
                burn_in: 2000,
                samples: 1000,
            },
            metrics: MetricsSection::default(),
        }),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (expected gmm2d | gmm100d | allen_cahn)"
        ))),
    }
}

/// Load a config: a preset name or a path to a TOML file.
pub fn load_config(spec: &str) -> Result<ExperimentConfig> {
    if let Ok(cfg) = preset(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    if path.exists() {
        ExperimentConfig::from_toml(&std::fs::read_to_string(path)?)
    } else {
        Err(Error::Config(format!(
            "'{spec}' is neither a preset name nor a config file"
        )))
    }
}

/// Per-mode sample counts for a mixture target: each sample goes to its
/// nearest component mean if within three of that component's sigma, else it
/// counts as unassigned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeCoverage {
    pub counts: Vec<usize>,
    pub unassigned: usize,
    pub covered: usize,
}

pub fn emit_mode_coverage(samples: &[f64], g: &GaussianMixture) -> ModeCoverage {
    let d = g.dim();
    let mut counts = vec![0usize; g.num_components()];
    let mut unassigned = 0usize;
    for row in samples.chunks_exact(d) {
        let mut best = 0usize;
        let mut best_sq = f64::INFINITY;
        for i in 0..g.num_components() {
            let mu = g.mean(i);
            let mut sq = 0.0;
            for (&a, &b) in row.iter().zip(mu) {
                let diff = a - b;
                sq += diff * diff;
            }
            if sq < best_sq {
                best_sq = sq;
                best = i;
            }
        }
        let sigma = g.sigmas()[best];
        if best_sq.sqrt() <= 3.0 * sigma {
            counts[best] += 1;
        } else {
            unassigned += 1;
        }
    }
    let covered = counts.iter().filter(|&&c| c > 0).count();
    ModeCoverage {
        counts,
        unassigned,
        covered,
    }
}

/// Fractions of samples whose spatial mean is positive / negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldPolarity {
    pub frac_positive: f64,
    pub frac_negative: f64,
}

pub fn emit_field_polarity(samples: &[f64], d: usize) -> FieldPolarity {
    let n = samples.len() / d;
    let mut positive = 0usize;
    for row in samples.chunks_exact(d) {
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        if mean >= 0.0 {
            positive += 1;
        }
    }
    FieldPolarity {
        frac_positive: positive as f64 / n as f64,
        frac_negative: (n - positive) as f64 / n as f64,
    }
}

/// Outcome of one `(method, seed)` cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub report: MetricReport,
}

/// Everything a finished run directory contains, in memory.
#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub failures: Vec<(Method, u64, String)>,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    name: &'a str,
    scale: f64,
    methods: Vec<&'static str>,
    seeds: &'a [u64],
    conventions: &'static str,
}

const CONVENTIONS: &str = "energy_distance and mmd_rbf are V-statistics (within-sample sums \
include the diagonal); sliced_wasserstein uses order-1 Wasserstein over 200 projections unless \
configured otherwise; mmd bandwidth is the median pairwise distance of the pooled sample \
subsampled to <= 4096 points; ksd uses the inverse multiquadric kernel (1 + |x - x'|^2)^(-1/2); \
runtime_seconds is wall clock and is the one field excluded from byte-reproducibility";

/// Run every `(method, seed)` cell of a config, writing outputs under
/// `out_dir`. Per-seed failures are recorded and the aggregate proceeds over
/// the surviving cells. `jobs` bounds how many seeds run concurrently.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    scale: f64,
    jobs: usize,
) -> Result<RunSummary> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.apply_scale(scale)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    let meta = RunMeta {
        name: &cfg.experiment.name,
        scale,
        methods: cfg.experiment.methods.iter().map(|m| m.name()).collect(),
        seeds: &cfg.experiment.seeds,
        conventions: CONVENTIONS,
    };
    std::fs::write(
        out_dir.join("run_meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;

    let seeds = cfg.experiment.seeds.clone();
    let jobs = jobs.max(1);
    let mut cells: Vec<CellResult> = Vec::new();
    let mut failures: Vec<(Method, u64, String)> = Vec::new();

    for chunk in seeds.chunks(jobs) {
        let results: Vec<Vec<std::result::Result<CellResult, (Method, u64, String)>>> =
            if chunk.len() == 1 {
                vec![run_seed(&cfg, out_dir, chunk[0])]
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|&seed| {
                            let cfg = &cfg;
                            scope.spawn(move || run_seed(cfg, out_dir, seed))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().unwrap()).collect()
                })
            };
        for seed_results in results {
            for r in seed_results {
                match r {
                    Ok(cell) => cells.push(cell),
                    Err(fail) => failures.push(fail),
                }
            }
        }
    }

    if !failures.is_empty() {
        let rows: Vec<serde_json::Value> = failures
            .iter()
            .map(|(m, s, e)| {
                serde_json::json!({"method": m.name(), "seed": s, "error": e})
            })
            .collect();
        std::fs::write(
            out_dir.join("errors.json"),
            serde_json::to_string_pretty(&rows)?,
        )?;
    }

    write_tables(out_dir, &cells)?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        cells,
        failures,
    })
}

fn run_seed(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
) -> Vec<std::result::Result<CellResult, (Method, u64, String)>> {
    let mut out = Vec::new();
    let target = match cfg.target.resolve() {
        Ok(t) => t,
        Err(e) => {
            return cfg
                .experiment
                .methods
                .iter()
                .map(|&m| Err((m, seed, e.to_string())))
                .collect()
        }
    };

    // Reference samples exist only for mixture targets; lattice-field runs
    // are scored by KSD, which needs no reference.
    let reference: Option<Vec<f64>> = target.as_mixture().and_then(|g| {
        if cfg.experiment.reference_samples == 0 {
            return None;
        }
        let mut rng = derive_rng(seed, purpose::REFERENCE, 0, 0);
        Some(g.sample(cfg.experiment.reference_samples, &mut rng))
    });
    if let (Some(reference), Some(_g)) = (&reference, target.as_mixture()) {
        let e = Ensemble::new(
            reference.clone(),
            vec![0.0; reference.len() / target.dim()],
            target.dim(),
            0,
        );
        if let Ok(e) = e {
            let path = out_dir.join(format!("reference_seed{seed}.csv"));
            let _ = write_ensemble_csv(&e, &path, seed);
        }
    }

    for &method in &cfg.experiment.methods {
        match run_cell(cfg, &target, reference.as_deref(), method, seed, out_dir) {
            Ok(cell) => out.push(Ok(cell)),
            Err(e) => out.push(Err((method, seed, e.to_string()))),
        }
    }
    out
}

fn run_cell(
    cfg: &ExperimentConfig,
    target: &ResolvedTarget,
    reference: Option<&[f64]>,
    method: Method,
    seed: u64,
    out_dir: &Path,
) -> Result<CellResult> {
    let started = Instant::now();
    let d = target.dim();
    let model = target.model();
    let schedule = cfg.interpolant()?;

    let mut acceptance_rate = None;
    let mut degenerate = false;

    let samples: Vec<f64> = match method {
        Method::AlmcOde => {
            let path = AnnealPath::generate(
                cfg.almc.steps,
                cfg.almc.delta_start,
                cfg.almc.delta_end,
                cfg.lambda_schedule()?,
            )?;
            let n = cfg.almc.particles;
            let almc_cfg = AlmcConfig {
                num_particles: n,
                path,
                weight_mode: cfg.weight_mode()?,
                ess_threshold: (cfg.almc.ess_threshold_frac * n as f64).clamp(1.0, n as f64),
                seed,
                resample_method: ResampleMethod::Systematic,
            };
            let almc_out = run_almc(&almc_cfg, model)?;
            write_ensemble_csv(
                &almc_out.ensemble,
                &out_dir.join(format!("particles_almc_seed{seed}.csv")),
                seed,
            )?;
            let diag_path = out_dir.join(format!("diagnostics_almc_ode_seed{seed}.jsonl"));
            let mut w = std::io::BufWriter::new(std::fs::File::create(diag_path)?);
            for row in &almc_out.diagnostics {
                writeln!(w, "{}", serde_json::to_string(row)?)?;
            }
            w.flush()?;
            let flow_cfg = FlowConfig {
                schedule,
                epsilon: cfg.flow.epsilon,
                num_steps: cfg.flow.steps,
                num_test_particles: cfg.flow.test_particles,
                seed,
            };
            run_flow(&flow_cfg, &almc_out.ensemble)?
        }
        Method::McOde => {
            let flow_cfg = FlowConfig {
                schedule,
                epsilon: cfg.flow.epsilon,
                num_steps: cfg.flow.steps,
                num_test_particles: cfg.flow.test_particles,
                seed,
            };
            let mc = run_mc_ode(&flow_cfg, model, cfg.mc_ode.proposals)?;
            let diag_path = out_dir.join(format!("diagnostics_mc_ode_seed{seed}.jsonl"));
            let mut w = std::io::BufWriter::new(std::fs::File::create(diag_path)?);
            for (step, ess) in mc.proposal_ess.iter().enumerate() {
                writeln!(
                    w,
                    "{}",
                    serde_json::json!({"step": step, "proposal_ess": ess})
                )?;
            }
            w.flush()?;
            degenerate = mc.degenerate;
            mc.samples
        }
        Method::Hmc => {
            let mut rng = derive_rng(seed, purpose::HMC_INIT, 0, 0);
            let init: Vec<f64> = (0..d)
                .map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
                .collect();
            let hmc_cfg = HmcConfig {
                step_size: cfg.hmc.step_size,
                leapfrog_steps: cfg.hmc.leapfrog_steps,
                burn_in: cfg.hmc.burn_in,
                num_samples: cfg.hmc.samples,
                seed,
            };
            let out = hmc_chain(&hmc_cfg, model, &init)?;
            acceptance_rate = Some(out.acceptance_rate);
            out.samples
        }
    };

    // Persist samples in the shared ensemble CSV format (unit weights).
    let n_samples = samples.len() / d;
    let ensemble = Ensemble::new(samples.clone(), vec![0.0; n_samples], d, 0)?;
    write_ensemble_csv(
        &ensemble,
        &out_dir.join(format!("samples_{}_seed{seed}.csv", method.name())),
        seed,
    )?;

    // Target-specific summaries.
    match target {
        ResolvedTarget::Mixture(g) => {
            let cov = emit_mode_coverage(&samples, g);
            std::fs::write(
                out_dir.join(format!("coverage_{}_seed{seed}.json", method.name())),
                serde_json::to_string_pretty(&cov)?,
            )?;
        }
        ResolvedTarget::AllenCahn(_) => {
            let pol = emit_field_polarity(&samples, d);
            std::fs::write(
                out_dir.join(format!("polarity_{}_seed{seed}.json", method.name())),
                serde_json::to_string_pretty(&pol)?,
            )?;
        }
    }

    let mut report = MetricReport::empty();
    report.acceptance_rate = acceptance_rate;
    if let Some(reference) = reference {
        let (mean_err, second_err) = l2_moment_errors(&samples, reference, d)?;
        report.mean_err = Some(mean_err);
        report.second_moment_err = Some(second_err);
        report.energy_distance = Some(energy_distance(&samples, reference, d)?);
        report.mmd_rbf = Some(mmd_rbf(&samples, reference, d)?);
        report.sliced_wasserstein = Some(sliced_wasserstein(
            &samples,
            reference,
            d,
            cfg.metrics.swd_projections,
            seed,
        )?);
    }
    if matches!(target, ResolvedTarget::AllenCahn(_)) {
        // Degenerate Monte Carlo proposals leave the KSD undefined; the null
        // fields are the marker.
        if !degenerate {
            let (u, v) = ksd_imq(&samples, d, model)?;
            report.ksd_u = Some(u);
            report.ksd_v = Some(v);
        }
    }
    report.runtime_seconds = started.elapsed().as_secs_f64();

    std::fs::write(
        out_dir.join(format!("metrics_{}_seed{seed}.json", method.name())),
        serde_json::to_string_pretty(&report)?,
    )?;

    Ok(CellResult {
        method,
        seed,
        report,
    })
}

const TABLE_METRICS: [(&str, fn(&MetricReport) -> Option<f64>); 8] = [
    ("mean_err", |r| r.mean_err),
    ("second_moment_err", |r| r.second_moment_err),
    ("energy_distance", |r| r.energy_distance),
    ("mmd_rbf", |r| r.mmd_rbf),
    ("sliced_wasserstein", |r| r.sliced_wasserstein),
    ("ksd_u", |r| r.ksd_u),
    ("ksd_v", |r| r.ksd_v),
    ("acceptance_rate", |r| r.acceptance_rate),
];

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Write `table.csv` and an aligned `table.txt` aggregating the metric
/// reports (mean +/- std across seeds). Wall-clock columns are deliberately
/// excluded so the tables are byte-reproducible.
pub fn write_tables(out_dir: &Path, cells: &[CellResult]) -> Result<()> {
    let mut methods: Vec<Method> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
    }
    methods.sort_by_key(|m| m.rank());

    let mut csv = String::from("metric,method,mean,std,seeds\n");
    for (name, get) in TABLE_METRICS {
        for &m in &methods {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.method == m)
                .filter_map(|c| get(&c.report))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&vals);
            let _ = writeln!(csv, "{name},{},{mean:.6},{std:.6},{}", m.name(), vals.len());
        }
    }
    std::fs::write(out_dir.join("table.csv"), &csv)?;

    let mut txt = String::new();
    let _ = write!(txt, "{:<22}", "metric");
    for &m in &methods {
        let _ = write!(txt, "{:>24}", m.name());
    }
    let _ = writeln!(txt);
    for (name, get) in TABLE_METRICS {
        let mut row = format!("{name:<22}");
        let mut any = false;
        for &m in &methods {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.method == m)
                .filter_map(|c| get(&c.report))
                .collect();
            if vals.is_empty() {
                let _ = write!(row, "{:>24}", "-");
            } else {
                any = true;
                let (mean, std) = mean_std(&vals);
                let _ = write!(row, "{:>24}", format!("{mean:.4} +/- {std:.4}"));
            }
        }
        if any {
            let _ = writeln!(txt, "{row}");
        }
    }
    std::fs::write(out_dir.join("table.txt"), &txt)?;
    Ok(())
}

/// Rebuild the aggregate tables from the metric JSONs in `dir` (the `table`
/// subcommand). Returns the rendered text table.
pub fn aggregate_directory(dir: &Path) -> Result<String> {
    let mut cells = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix("metrics_") {
            if let Some(stem) = rest.strip_suffix(".json") {
                // metrics_<method>_seed<seed>.json
                if let Some((method_name, seed_part)) = stem.rsplit_once("_seed") {
                    let method = match method_name {
                        "almc_ode" => Method::AlmcOde,
                        "mc_ode" => Method::McOde,
                        "hmc" => Method::Hmc,
                        _ => continue,
                    };
                    let seed: u64 = seed_part
                        .parse()
                        .map_err(|_| Error::Config(format!("bad metrics file name {name}")))?;
                    let report: MetricReport =
                        serde_json::from_str(&std::fs::read_to_string(entry.path())?)?;
                    cells.push(CellResult {
                        method,
                        seed,
                        report,
                    });
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config(format!(
            "no metrics_*.json files found in {}",
            dir.display()
        )));
    }
    cells.sort_by_key(|c| (c.method.rank(), c.seed));
    write_tables(dir, &cells)?;
    Ok(std::fs::read_to_string(dir.join("table.txt"))?)
}
