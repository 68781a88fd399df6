//! The stochastic update engine: preconditioned steps with pluggable
//! curvature, learning-rate schedules, diagonal methods, Levenberg-Marquardt
//! damping adaptation, and iterate averaging.

use nalgebra::DVector;

use crate::curvature::{CurvatureOperator, DiagAccumulator};
use crate::error::{Error, Result};

/// A run is flagged as diverged once the iterate norm passes this cutoff.
pub const DIVERGENCE_CUTOFF: f64 = 1e12;

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `α_k = 1/(k+1)`, the schedule of the annealed convergence theory.
    Annealed,
    /// `α_k = c/(k + k₀)`; exposed for completeness, not used by the
    /// acceptance checks.
    Shifted { c: f64, k0: f64 },
}

impl LrSchedule {
    pub fn rate(&self, k: usize) -> f64 {
        match *self {
            LrSchedule::Constant(a) => a,
            LrSchedule::Annealed => 1.0 / (k as f64 + 1.0),
            LrSchedule::Shifted { c, k0 } => c / (k as f64 + k0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant(a) => a > 0.0,
            LrSchedule::Annealed => true,
            LrSchedule::Shifted { c, k0 } => c > 0.0 && k0 > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("learning rates must be positive".into()))
        }
    }
}

/// Iterate-averaging mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AveragingMode {
    None,
    /// `θ̄_k = (1/(k+1)) Σ_{i=0}^k θ_i`, maintained incrementally.
    Uniform,
    /// `θ̄_k = (1−β_k)θ_k + β_k θ̄_{k−1}` with `β_k = min{1−1/k, β_max}`;
    /// early iterates are forgotten geometrically.
    Forgetful { beta_max: f64 },
}

/// State of one optimization run.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub theta: DVector<f64>,
    pub k: usize,
    pub average: DVector<f64>,
    pub diag: Option<DiagAccumulator>,
    pub damping: f64,
    pub diverged: bool,
}

impl OptimizerState {
    pub fn new(theta0: DVector<f64>) -> Self {
        let average = theta0.clone();
        Self {
            theta: theta0,
            k: 0,
            average,
            diag: None,
            damping: 0.0,
            diverged: false,
        }
    }

    pub fn with_diag(mut self, acc: DiagAccumulator) -> Self {
        self.diag = Some(acc);
        self
    }

    pub fn with_damping(mut self, lambda: f64) -> Self {
        self.damping = lambda;
        self
    }

    fn finish_step(&mut self, mode: &AveragingMode) {
        self.k += 1;
        average_update(mode, &mut self.average, &self.theta, self.k);
        if !self.theta.iter().all(|v| v.is_finite())
            || self.theta.amax() > DIVERGENCE_CUTOFF
        {
            self.diverged = true;
        }
    }
}

/// One preconditioned step `θ_{k+1} = θ_k − α_k (B + λI)^{−ξ} g`.
pub fn step(
    state: &mut OptimizerState,
    op: &CurvatureOperator,
    g: &DVector<f64>,
    schedule: &LrSchedule,
    averaging: &AveragingMode,
) -> Result<()> {
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("stochastic gradient"));
    }
    let alpha = schedule.rate(state.k);
    let direction = op.apply_inverse(g)?;
    state.theta -= direction * alpha;
    state.finish_step(averaging);
    Ok(())
}

/// One diagonal-method step `θ_{k+1} = θ_k − α_k (diag(p) + λI)^{−ξ} g`.
///
/// `p` is read from the state's accumulator; callers fold gradients into it
/// separately so that estimate and step can use different gradients.
pub fn diag_step(
    state: &mut OptimizerState,
    g: &DVector<f64>,
    lambda: f64,
    xi: f64,
    schedule: &LrSchedule,
    averaging: &AveragingMode,
) -> Result<()> {
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("stochastic gradient"));
    }
    let p = state
        .diag
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("diag_step needs a diagonal accumulator".into()))?
        .values()
        .clone();
    if p.len() != g.len() {
        return Err(Error::dim("diag_step", p.len(), g.len()));
    }
    let alpha = schedule.rate(state.k);
    let mut delta = DVector::zeros(g.len());
    for i in 0..g.len() {
        let pivot = p[i] + lambda;
        if pivot <= 0.0 {
            return Err(Error::Singular("diagonal preconditioner pivot"));
        }
        delta[i] = alpha * pivot.powf(-xi) * g[i];
    }
    state.theta -= delta;
    state.finish_step(averaging);
    Ok(())
}

/// Levenberg-Marquardt damping adaptation from the reduction ratio `ρ`:
/// shrink by 2/3 when the quadratic model is trustworthy (`ρ > 3/4`), grow
/// by 3/2 when it is not (`ρ < 1/4`).
pub fn lm_adapt(lambda: f64, rho: f64) -> f64 {
    if rho > 0.75 {
        lambda * (2.0 / 3.0)
    } else if rho < 0.25 {
        lambda * 1.5
    } else {
        lambda
    }
}

/// Fold `θ_k` (the iterate at index `k ≥ 1`) into the running average.
pub fn average_update(mode: &AveragingMode, average: &mut DVector<f64>, theta: &DVector<f64>, k: usize) {
    match *mode {
        AveragingMode::None => average.copy_from(theta),
        AveragingMode::Uniform => {
            let w = 1.0 / (k as f64 + 1.0);
            *average += (theta - &*average) * w;
        }
        AveragingMode::Forgetful { beta_max } => {
            let beta = (1.0 - 1.0 / k as f64).min(beta_max);
            *average = theta * (1.0 - beta) + &*average * beta;
        }
    }
}

/// Per-iteration record for trajectory logs.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRow {
    pub k: usize,
    pub loss: f64,
    pub loss_avg: f64,
    pub dist_to_opt: f64,
    pub lambda: f64,
}

/// Render trajectory rows as CSV with the fixed header
/// `k,loss,loss_avg,dist_to_opt,lambda`.
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("k,loss,loss_avg,dist_to_opt,lambda\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.k, r.loss, r.loss_avg, r.dist_to_opt, r.lambda
        ));
    }
    out
}
