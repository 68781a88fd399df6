//! Config-driven experiment runner.
//!
//! Experiments are described by a TOML file mirroring [`ExperimentConfig`];
//! the runner simulates stochastic quadratics with per-trial deterministic
//! RNG substreams, attaches the closed-form theory columns, and emits a
//! fixed-header CSV plus a metadata sidecar. Reports are bitwise
//! reproducible for a given `(config, seed)` regardless of thread count:
//! every trial draws from its own counter-derived stream and aggregation
//! uses a fixed-order pairwise reduction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::curvature::{self, CurvatureKind, CurvatureOperator, DiagAccumulator, DiagMode};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{objective_and_grad, Dataset, MlpModel, Model, PredictiveFamily};
use crate::optim::{self, AveragingMode, LrSchedule, OptimizerState, TrajectoryRow};
use crate::theory::{self, IterationSpec, QuadraticProblem};

/// Outcome of one named in-run assertion or acceptance check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }

    /// One-line `PASS`/`FAIL` rendering.
    pub fn line(&self) -> String {
        format!(
            "[{}] {} — {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Simulate,
    Theory,
    Verify,
    Train,
    Invariance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumConfig {
    /// All eigenvalues equal to `scale`.
    Isotropic { scale: f64 },
    /// `λ_i = n − i + 1`.
    Linear,
    /// `λ_i = ratio^{i−1}`, descending from 1.
    Geometric { ratio: f64 },
    Custom { values: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaConfig {
    /// `Σ_g = H*`.
    Realizable,
    Isotropic { scale: f64 },
    Custom { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Theta0Config {
    Ones { scale: f64 },
    Custom { values: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub dim: usize,
    pub spectrum: SpectrumConfig,
    pub sigma: SigmaConfig,
    pub theta0: Theta0Config,
    /// Conjugate the diagonal spectrum by a seeded random rotation.
    #[serde(default)]
    pub rotate: bool,
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrecondConfig {
    Hstar,
    Identity { scale: f64 },
    /// `B = λ_n(H*)·I`.
    LambdaNIdentity,
    Custom { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleConfig {
    Constant { alpha: f64 },
    Annealed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AveragingConfig {
    None,
    Uniform,
    Forgetful { beta_max: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationConfig {
    pub b: PrecondConfig,
    pub schedule: ScheduleConfig,
    pub averaging: AveragingConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layer_dims: Vec<usize>,
    pub cases: usize,
    /// `"gaussian"` or `"softmax"`.
    pub family: String,
    /// Standard deviation of the target noise (Gaussian data only).
    #[serde(default)]
    pub noise: f64,
    pub steps: usize,
    /// Learning rate of the plain gradient-descent baseline.
    pub alpha: f64,
    /// Initial Tikhonov damping of the natural-gradient run.
    pub lambda0: f64,
    /// Exponent and damping of the diagonal method.
    pub xi: f64,
    pub diag_lambda: f64,
    pub rms_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// 0 means the default rayon pool size.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub suite: Option<String>,
    pub problem: Option<ProblemConfig>,
    pub iteration: Option<IterationConfig>,
    pub train: Option<TrainConfig>,
}

fn default_trials() -> usize {
    1000
}

fn default_horizon() -> usize {
    1024
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    /// Build the quadratic problem and iteration spec, validating all
    /// module invariants up front.
    pub fn build_quadratic(&self) -> Result<(QuadraticProblem, IterationSpec, AveragingMode)> {
        let pc = self
            .problem
            .as_ref()
            .ok_or_else(|| Error::Config("missing [problem] section".into()))?;
        let ic = self
            .iteration
            .as_ref()
            .ok_or_else(|| Error::Config("missing [iteration] section".into()))?;
        let problem = build_problem(pc, self.seed)?;
        let spec = build_iteration(ic, &problem)?;
        let averaging = match ic.averaging {
            AveragingConfig::None => AveragingMode::None,
            AveragingConfig::Uniform => AveragingMode::Uniform,
            AveragingConfig::Forgetful { beta_max } => AveragingMode::Forgetful { beta_max },
        };
        Ok((problem, spec, averaging))
    }
}

fn spectrum_values(cfg: &SpectrumConfig, n: usize) -> Result<Vec<f64>> {
    let vals = match cfg {
        SpectrumConfig::Isotropic { scale } => vec![*scale; n],
        SpectrumConfig::Linear => (0..n).map(|i| (n - i) as f64).collect(),
        SpectrumConfig::Geometric { ratio } => (0..n).map(|i| ratio.powi(i as i32)).collect(),
        SpectrumConfig::Custom { values } => values.clone(),
    };
    if vals.len() != n {
        return Err(Error::Config(format!("spectrum has {} values, dim is {n}", vals.len())));
    }
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::Config("H* spectrum must be positive".into()));
    }
    Ok(vals)
}

fn matrix_from_rows(values: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>> {
    if values.len() != n || values.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{what} must be {n}×{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| values[i][j]))
}

/// Seeded random orthogonal matrix (QR of a Gaussian draw).
pub fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let gauss = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    gauss.qr().q()
}

fn build_problem(pc: &ProblemConfig, seed: u64) -> Result<QuadraticProblem> {
    let n = pc.dim;
    let vals = spectrum_values(&pc.spectrum, n)?;
    let mut hessian = DMatrix::from_diagonal(&DVector::from_vec(vals));
    if pc.rotate {
        // Stream 0 of the master seed is reserved for problem setup.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let q = random_orthogonal(n, &mut rng);
        hessian = &q * hessian * q.transpose();
    }
    let sigma = match &pc.sigma {
        SigmaConfig::Realizable => hessian.clone(),
        SigmaConfig::Isotropic { scale } => DMatrix::identity(n, n) * *scale,
        SigmaConfig::Custom { values } => matrix_from_rows(values, n, "sigma")?,
    };
    let theta_star = match &pc.theta_star {
        Some(v) if v.len() == n => DVector::from_vec(v.clone()),
        Some(_) => return Err(Error::Config("theta_star has the wrong dimension".into())),
        None => DVector::zeros(n),
    };
    let theta0 = match &pc.theta0 {
        Theta0Config::Ones { scale } => DVector::from_element(n, *scale),
        Theta0Config::Custom { values } => {
            if values.len() != n {
                return Err(Error::Config("theta0 has the wrong dimension".into()));
            }
            DVector::from_vec(values.clone())
        }
    };
    QuadraticProblem::new(hessian, theta_star, sigma, theta0)
}

fn build_iteration(ic: &IterationConfig, problem: &QuadraticProblem) -> Result<IterationSpec> {
    let n = problem.dim();
    let b = match &ic.b {
        PrecondConfig::Hstar => problem.hessian().clone(),
        PrecondConfig::Identity { scale } => DMatrix::identity(n, n) * *scale,
        PrecondConfig::LambdaNIdentity => {
            let eigs = linalg::sorted_eigenvalues_desc(problem.hessian());
            DMatrix::identity(n, n) * *eigs.last().unwrap()
        }
        PrecondConfig::Custom { values } => matrix_from_rows(values, n, "preconditioner")?,
    };
    let schedule = match ic.schedule {
        ScheduleConfig::Constant { alpha } => LrSchedule::Constant(alpha),
        ScheduleConfig::Annealed => LrSchedule::Annealed,
    };
    IterationSpec::new(b, schedule)
}

// ---------------------------------------------------------------------------
// Gradient sampling
// ---------------------------------------------------------------------------

/// Draws `g = H*(θ − θ*) + Σ_g^{1/2}·ξ` with `ξ ~ N(0, I)`: unbiased with
/// covariance exactly `Σ_g`. The square root is factorized once.
#[derive(Debug, Clone)]
pub struct GradientSampler {
    hessian: DMatrix<f64>,
    theta_star: DVector<f64>,
    sigma_sqrt: DMatrix<f64>,
}

impl GradientSampler {
    pub fn new(problem: &QuadraticProblem) -> Self {
        Self {
            hessian: problem.hessian().clone(),
            theta_star: problem.theta_star().clone(),
            sigma_sqrt: linalg::sym_sqrt(problem.noise_cov()),
        }
    }

    pub fn sample<R: Rng>(&self, theta: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let noise = DVector::from_fn(theta.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.hessian * (theta - &self.theta_star) + &self.sigma_sqrt * noise
    }
}

/// One-shot form of [`GradientSampler::sample`].
pub fn sample_gradient<R: Rng>(
    problem: &QuadraticProblem,
    theta: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    GradientSampler::new(problem).sample(theta, rng)
}

/// The RNG stream for trial `t` under a master seed. Stream 0 is reserved
/// for problem setup, so trials use streams `1..`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

/// Geometric logging grid `{1, 2, 4, …} ∪ {k_max}`.
pub fn log_grid(k_max: usize) -> Vec<usize> {
    let mut ks = Vec::new();
    let mut k = 1usize;
    while k <= k_max {
        ks.push(k);
        k *= 2;
    }
    if *ks.last().unwrap_or(&0) != k_max && k_max >= 1 {
        ks.push(k_max);
    }
    ks
}

/// Fixed-order pairwise summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Mean and standard error of a per-trial sample, skipping NaNs (diverged
/// trials). Deterministic for a given slice.
fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let t = finite.len();
    if t == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(&finite) / t as f64;
    if t == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = finite.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (t - 1) as f64;
    (mean, (var / t as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Monte-Carlo simulation
// ---------------------------------------------------------------------------

/// Per-`k` aggregates of a simulation run.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub ks: Vec<usize>,
    pub mc_mean: Vec<f64>,
    pub mc_stderr: Vec<f64>,
    pub averaged_mean: Vec<f64>,
    pub averaged_stderr: Vec<f64>,
    pub diverged: usize,
}

/// Run `trials` independent trajectories of the stochastic iteration and
/// aggregate `h(θ_k)` and `h(θ̄_k)` at the logged indices.
pub fn simulate(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    averaging: &AveragingMode,
    trials: usize,
    ks: &[usize],
    seed: u64,
    threads: usize,
) -> Result<SimOutcome> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()));
    }
    let sampler = GradientSampler::new(problem);
    let b_inv = spec.precond_inv()?;
    let horizon = *ks.last().unwrap_or(&0);
    let schedule = spec.schedule;

    let run_trial = |t: usize| -> (Vec<f64>, Vec<f64>, bool) {
        let mut rng = trial_rng(seed, t);
        let mut theta = problem.theta0().clone();
        let mut average = theta.clone();
        let mut raw = vec![f64::NAN; ks.len()];
        let mut avg = vec![f64::NAN; ks.len()];
        let mut next = 0usize;
        let mut diverged = false;
        for k in 0..horizon {
            if !diverged {
                let g = sampler.sample(&theta, &mut rng);
                theta -= &b_inv * g * schedule.rate(k);
                optim::average_update(averaging, &mut average, &theta, k + 1);
                if theta.amax() > optim::DIVERGENCE_CUTOFF || !theta.iter().all(|v| v.is_finite())
                {
                    diverged = true;
                }
            }
            while next < ks.len() && ks[next] == k + 1 {
                if !diverged {
                    raw[next] = problem.loss(&theta);
                    avg[next] = problem.loss(&average);
                }
                next += 1;
            }
        }
        (raw, avg, diverged)
    };

    let results: Vec<(Vec<f64>, Vec<f64>, bool)> = run_in_pool(threads, || {
        use rayon::prelude::*;
        (0..trials).into_par_iter().map(run_trial).collect()
    })?;

    let diverged = results.iter().filter(|r| r.2).count();
    let mut mc_mean = Vec::with_capacity(ks.len());
    let mut mc_stderr = Vec::with_capacity(ks.len());
    let mut averaged_mean = Vec::with_capacity(ks.len());
    let mut averaged_stderr = Vec::with_capacity(ks.len());
    for slot in 0..ks.len() {
        let raw: Vec<f64> = results.iter().map(|r| r.0[slot]).collect();
        let (m, s) = mean_stderr(&raw);
        mc_mean.push(m);
        mc_stderr.push(s);
        let avg: Vec<f64> = results.iter().map(|r| r.1[slot]).collect();
        let (m, s) = mean_stderr(&avg);
        averaged_mean.push(m);
        averaged_stderr.push(s);
    }
    Ok(SimOutcome { ks: ks.to_vec(), mc_mean, mc_stderr, averaged_mean, averaged_stderr, diverged })
}

fn run_in_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        Ok(job())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(job))
    }
}

/// One row of a simulation report. NaN marks columns the run's schedule or
/// averaging mode does not define.
#[derive(Debug, Clone, Copy)]
pub struct ReportRow {
    pub k: usize,
    pub mc_mean_loss: f64,
    pub mc_stderr: f64,
    pub loss_exact: f64,
    pub lower: f64,
    pub upper: f64,
    pub averaging_bound: f64,
    pub averaged_mc_mean: f64,
    pub averaged_exact: f64,
}

#[derive(Debug, Clone)]
pub struct RunMeta {
    pub config_echo: String,
    pub seed: u64,
    pub version: String,
    pub wall_seconds: f64,
    pub diverged: usize,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub meta: RunMeta,
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

impl RunReport {
    pub fn all_passed(&self) -> bool {
        self.meta.checks.iter().all(|c| c.passed)
    }

    /// Fixed-header CSV; bitwise reproducible for a given (config, seed).
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "k,mc_mean_loss,mc_stderr,loss_exact,L,U,averaging_bound,averaged_mc_mean,averaged_exact\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.k,
                fmt(r.mc_mean_loss),
                fmt(r.mc_stderr),
                fmt(r.loss_exact),
                fmt(r.lower),
                fmt(r.upper),
                fmt(r.averaging_bound),
                fmt(r.averaged_mc_mean),
                fmt(r.averaged_exact),
            ));
        }
        out
    }

    /// Sidecar metadata (not byte-stable: contains wall time).
    pub fn meta_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed = {}\n", self.meta.seed));
        out.push_str(&format!("version = \"{}\"\n", self.meta.version));
        out.push_str(&format!("wall_seconds = {:.3}\n", self.meta.wall_seconds));
        out.push_str(&format!("diverged_trials = {}\n", self.meta.diverged));
        for c in &self.meta.checks {
            out.push_str(&format!("# {}\n", c.line()));
        }
        out.push_str("\n# --- config echo ---\n");
        for line in self.meta.config_echo.lines() {
            out.push_str(&format!("# {line}\n"));
        }
        out
    }
}

/// Run a `simulate` experiment: Monte-Carlo aggregates, theory columns,
/// and in-run assertions. The run completes even when assertions fail;
/// their outcomes land in the metadata.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<RunReport> {
    let start = std::time::Instant::now();
    let (problem, spec, averaging) = config.build_quadratic()?;
    let ks = log_grid(config.horizon);
    let sim = simulate(&problem, &spec, &averaging, config.trials, &ks, config.seed, config.threads)?;

    let loss_exact = theory::loss_exact_grid(&problem, &spec, &ks)?;
    let constant = spec.constant_rate().is_ok();
    let uniform = matches!(averaging, AveragingMode::Uniform);
    let averaged_exact = if constant && uniform {
        theory::averaged_loss_exact_grid(&problem, &spec, &ks)?
    } else {
        vec![f64::NAN; ks.len()]
    };

    let mut rows = Vec::with_capacity(ks.len());
    for (i, &k) in ks.iter().enumerate() {
        let (lower, upper) = if constant {
            theory::loss_bounds_constant(&problem, &spec, k).unwrap_or((f64::NAN, f64::NAN))
        } else {
            (f64::NAN, f64::NAN)
        };
        let bound = if constant && uniform {
            theory::averaging_bound(&problem, &spec, k).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        rows.push(ReportRow {
            k,
            mc_mean_loss: sim.mc_mean[i],
            mc_stderr: sim.mc_stderr[i],
            loss_exact: loss_exact[i],
            lower,
            upper,
            averaging_bound: bound,
            averaged_mc_mean: sim.averaged_mean[i],
            averaged_exact: averaged_exact[i],
        });
    }

    let mut checks = Vec::new();
    checks.push(coverage_check(
        "mc vs loss_exact",
        &sim.mc_mean,
        &loss_exact,
        &sim.mc_stderr,
    ));
    if constant {
        // U(k) comes from the linearized variance propagation, which sits
        // (α·λ₁/4)-relative below the exact stationary noise floor; at very
        // high trial counts this check resolves that gap and flags it.
        let violations = rows
            .iter()
            .filter(|r| !r.upper.is_nan() && r.upper < r.mc_mean_loss - 3.0 * r.mc_stderr)
            .count();
        checks.push(CheckResult::new(
            "upper bound U(k) vs mc",
            violations == 0,
            format!("{violations} of {} logged k violate U(k) beyond noise", rows.len()),
        ));
    }
    if constant && uniform {
        checks.push(coverage_check(
            "averaged mc vs averaged_exact",
            &sim.averaged_mean,
            &averaged_exact,
            &sim.averaged_stderr,
        ));
        let violations = (0..rows.len())
            .filter(|&i| {
                !rows[i].averaging_bound.is_nan()
                    && rows[i].averaging_bound
                        < sim.averaged_mean[i] - 3.0 * sim.averaged_stderr[i]
            })
            .count();
        checks.push(CheckResult::new(
            "averaging bound vs averaged mc",
            violations == 0,
            format!("{violations} of {} logged k violate the bound beyond noise", rows.len()),
        ));
    }

    Ok(RunReport {
        rows,
        meta: RunMeta {
            config_echo: config.to_toml(),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_seconds: start.elapsed().as_secs_f64(),
            diverged: sim.diverged,
            checks,
        },
    })
}

fn coverage_check(name: &str, mc: &[f64], exact: &[f64], stderr: &[f64]) -> CheckResult {
    let mut checked = 0usize;
    let mut within = 0usize;
    for i in 0..mc.len() {
        if mc[i].is_nan() || exact[i].is_nan() || stderr[i] <= 0.0 {
            continue;
        }
        checked += 1;
        if (mc[i] - exact[i]).abs() <= 3.0 * stderr[i] {
            within += 1;
        }
    }
    let frac = if checked == 0 { 1.0 } else { within as f64 / checked as f64 };
    CheckResult::new(
        name,
        frac >= 0.95,
        format!("{within}/{checked} logged k within 3 standard errors"),
    )
}

// ---------------------------------------------------------------------------
// The 1-d counterexample
// ---------------------------------------------------------------------------

/// Traces of the exact-Fisher and empirical-Fisher preconditioned scalar
/// iterations on `h(θ) = ½θ²`.
#[derive(Debug, Clone)]
pub struct CounterexampleReport {
    pub theta0: f64,
    pub alpha: f64,
    pub xi: f64,
    pub steps: usize,
    /// `(k, |θ_k| for the F run, |θ_k| for the F̄ run)` on the log grid.
    pub rows: Vec<(usize, f64, f64)>,
    /// Max relative deviation of the F run from `|1−α|^k |θ₀|`.
    pub fisher_max_rel_err: f64,
    pub fisher_linear_ok: bool,
    /// `min_k |θ_k|` of the F̄ run.
    pub empfisher_min_abs: f64,
    /// The F̄ run (at ξ = 1) never entered `|θ| < 1e−6`.
    pub empfisher_stalls: bool,
}

pub fn run_counterexample(theta0: f64, alpha: f64, xi: f64, steps: usize) -> CounterexampleReport {
    let grid = log_grid(steps);
    let mut rows = Vec::with_capacity(grid.len());

    // Exact-Fisher run: F = 1, so θ_{k+1} = (1 − α)θ_k exactly. Compare
    // against |1−α|^k·|θ₀| while the reference stays comfortably normal;
    // below 1e−250 the trajectory has long since converged and subnormal
    // rounding makes a relative comparison meaningless.
    let contraction = 1.0 - alpha;
    let mut theta_f = theta0;
    let mut fisher_max_rel_err = 0.0f64;
    let mut f_at: Vec<f64> = Vec::with_capacity(grid.len());
    let mut next = 0;
    for k in 0..steps {
        theta_f *= contraction;
        let reference = contraction.abs().powi(k as i32 + 1) * theta0.abs();
        if reference > 1e-250 {
            let rel = (theta_f.abs() - reference).abs() / reference;
            fisher_max_rel_err = fisher_max_rel_err.max(rel);
        }
        while next < grid.len() && grid[next] == k + 1 {
            f_at.push(theta_f.abs());
            next += 1;
        }
    }

    // Empirical-Fisher run: B = F̄^ξ = (θ²)^ξ, so
    // θ_{k+1} = (1 − α(θ²)^{−ξ})θ_k; plain division at ξ = 1.
    let mut theta_e = theta0;
    let mut min_abs = theta0.abs();
    let mut e_at: Vec<f64> = Vec::with_capacity(grid.len());
    let mut next = 0;
    for k in 0..steps {
        let factor = if xi == 1.0 {
            1.0 - alpha / (theta_e * theta_e)
        } else {
            1.0 - alpha * (theta_e * theta_e).powf(-xi)
        };
        theta_e *= factor;
        min_abs = min_abs.min(theta_e.abs());
        if !theta_e.is_finite() {
            break;
        }
        while next < grid.len() && grid[next] == k + 1 {
            e_at.push(theta_e.abs());
            next += 1;
        }
    }
    e_at.resize(grid.len(), f64::NAN);

    for (i, &k) in grid.iter().enumerate() {
        rows.push((k, f_at.get(i).copied().unwrap_or(f64::NAN), e_at[i]));
    }
    CounterexampleReport {
        theta0,
        alpha,
        xi,
        steps,
        rows,
        fisher_max_rel_err,
        fisher_linear_ok: fisher_max_rel_err <= 1e-12,
        empfisher_min_abs: min_abs,
        empfisher_stalls: min_abs >= 1e-6,
    }
}

impl CounterexampleReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("k,abs_theta_fisher,abs_theta_empfisher\n");
        for (k, f, e) in &self.rows {
            out.push_str(&format!("{},{},{}\n", k, fmt(*f), fmt(*e)));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Training demo
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub name: String,
    pub rows: Vec<TrajectoryRow>,
    /// Loss non-increasing from iteration 5 onward.
    pub monotone_after_burn_in: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub runs: Vec<TrainRun>,
    /// Exact optimum of the quadratic objective when the student is linear.
    pub h_opt: Option<f64>,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("run,k,loss,loss_avg,dist_to_opt,lambda\n");
        for run in &self.runs {
            for r in &run.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    run.name,
                    r.k,
                    fmt(r.loss),
                    fmt(r.loss_avg),
                    fmt(r.dist_to_opt),
                    fmt(r.lambda)
                ));
            }
        }
        out
    }
}

/// Full-batch comparison of gradient descent, LM-damped natural gradient,
/// and the diagonal empirical-Fisher method on a synthetic teacher-student
/// problem.
pub fn run_train_demo(cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    let family = match cfg.family.as_str() {
        "gaussian" => PredictiveFamily::gaussian_mean(*cfg.layer_dims.last().unwrap(), 1.0),
        "softmax" => PredictiveFamily::softmax(*cfg.layer_dims.last().unwrap()),
        other => return Err(Error::Config(format!("unknown family {other:?}"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let teacher = MlpModel::random(&cfg.layer_dims, &mut rng)?;
    let mut data_cases = Vec::with_capacity(cfg.cases);
    for _ in 0..cfg.cases {
        let x = DVector::from_fn(teacher.input_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = teacher.forward(&x)?;
        let y = match family {
            PredictiveFamily::GaussianMean { .. } => {
                let noisy = z.map(|v| v + cfg.noise * rng.sample::<f64, _>(StandardNormal));
                crate::model::Target::Real(noisy)
            }
            PredictiveFamily::MultinomialSoftmax { .. } => family.sample(&z, &mut rng)?,
        };
        data_cases.push((x, y));
    }
    let data = Dataset::new(data_cases)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(1);
    let student = MlpModel::random(&cfg.layer_dims, &mut init_rng)?;
    let theta_ref = teacher.params();

    // Linear students make h quadratic in θ; its optimum is one damped
    // Newton step away and serves as the convergence reference.
    let h_opt = if student.activations().iter().all(|a| *a == crate::model::Activation::Identity)
    {
        let f = curvature::fisher_dense(&student, &family, &data)?;
        let (_, grad) = objective_and_grad(&student, &family, &data)?;
        let op = CurvatureOperator::new(CurvatureKind::Fisher, f).damp(1e-10);
        let opt = student.params() - op.apply_inverse(&grad)?;
        Some(crate::model::objective(&student.with_params(&opt)?, &family, &data)?)
    } else {
        None
    };

    let runs = vec![
        train_gd(&student, &family, &data, &theta_ref, cfg)?,
        train_ng_lm(&student, &family, &data, &theta_ref, cfg)?,
        train_diag(&student, &family, &data, &theta_ref, cfg)?,
    ];
    Ok(TrainReport { runs, h_opt })
}

fn monotone_after(rows: &[TrajectoryRow], burn_in: usize) -> bool {
    rows.windows(2)
        .filter(|w| w[0].k >= burn_in)
        .all(|w| w[1].loss <= w[0].loss * (1.0 + 1e-12) + 1e-15)
}

fn record(
    rows: &mut Vec<TrajectoryRow>,
    state: &OptimizerState,
    problem_loss: f64,
    avg_loss: f64,
    theta_ref: &DVector<f64>,
    lambda: f64,
) {
    rows.push(TrajectoryRow {
        k: state.k,
        loss: problem_loss,
        loss_avg: avg_loss,
        dist_to_opt: (&state.theta - theta_ref).norm(),
        lambda,
    });
}

fn train_gd(
    student: &MlpModel,
    family: &PredictiveFamily,
    data: &Dataset,
    theta_ref: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let mut state = OptimizerState::new(student.params());
    let op = CurvatureOperator::identity(student.param_count());
    let schedule = LrSchedule::Constant(cfg.alpha);
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let mut model = student.clone();
    for _ in 0..cfg.steps {
        model.set_params(&state.theta)?;
        let (h, grad) = objective_and_grad(&model, family, data)?;
        let avg = crate::model::objective(&model.with_params(&state.average)?, family, data)?;
        record(&mut rows, &state, h, avg, theta_ref, 0.0);
        optim::step(&mut state, &op, &grad, &schedule, &AveragingMode::Uniform)?;
        if state.diverged {
            break;
        }
    }
    Ok(TrainRun {
        monotone_after_burn_in: monotone_after(&rows, 5),
        name: "gd".into(),
        rows,
    })
}

fn train_ng_lm(
    student: &MlpModel,
    family: &PredictiveFamily,
    data: &Dataset,
    theta_ref: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let mut state = OptimizerState::new(student.params()).with_damping(cfg.lambda0);
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let mut model = student.clone();
    for _ in 0..cfg.steps {
        model.set_params(&state.theta)?;
        let (h, grad) = objective_and_grad(&model, family, data)?;
        let avg = crate::model::objective(&model.with_params(&state.average)?, family, data)?;
        record(&mut rows, &state, h, avg, theta_ref, state.damping);

        let fisher = curvature::fisher_dense(&model, family, data)?;
        let op = CurvatureOperator::new(CurvatureKind::Fisher, fisher).damp(state.damping);
        let delta = -op.apply_inverse(&grad)?;
        let h_new = crate::model::objective(&model.with_params(&(&state.theta + &delta))?, family, data)?;
        // Reduction ratio of the damped quadratic model.
        let predicted = -(grad.dot(&delta)
            + 0.5 * delta.dot(&(op.dense() * &delta))
            + 0.5 * state.damping * delta.norm_squared());
        let rho = if predicted.abs() > 0.0 { (h - h_new) / predicted } else { 1.0 };
        state.damping = optim::lm_adapt(state.damping, rho).max(1e-12);
        if h_new <= h {
            state.theta += delta;
        }
        state.k += 1;
        let k = state.k;
        let theta = state.theta.clone();
        optim::average_update(&AveragingMode::Uniform, &mut state.average, &theta, k);
    }
    Ok(TrainRun {
        monotone_after_burn_in: monotone_after(&rows, 5),
        name: "natural_gradient_lm".into(),
        rows,
    })
}

fn train_diag(
    student: &MlpModel,
    family: &PredictiveFamily,
    data: &Dataset,
    theta_ref: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let n = student.param_count();
    let mut state = OptimizerState::new(student.params())
        .with_diag(DiagAccumulator::new(n, DiagMode::Rms { decay: cfg.rms_decay }));
    let schedule = LrSchedule::Constant(cfg.alpha);
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let mut model = student.clone();
    for _ in 0..cfg.steps {
        model.set_params(&state.theta)?;
        let (h, grad) = objective_and_grad(&model, family, data)?;
        let avg = crate::model::objective(&model.with_params(&state.average)?, family, data)?;
        record(&mut rows, &state, h, avg, theta_ref, cfg.diag_lambda);
        state.diag.as_mut().unwrap().update(&grad)?;
        optim::diag_step(
            &mut state,
            &grad,
            cfg.diag_lambda,
            cfg.xi,
            &schedule,
            &AveragingMode::Uniform,
        )?;
        if state.diverged {
            break;
        }
    }
    Ok(TrainRun {
        monotone_after_burn_in: monotone_after(&rows, 5),
        name: "diag_empfisher_rms".into(),
        rows,
    })
}
