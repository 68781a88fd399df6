//! Reparameterization machinery and invariance checks.
//!
//! For a smooth invertible `ζ` with `θ = ζ(γ)`, a curvature matrix
//! transforms by congruence when it has the form `E[J_fᵀAJ_f]`; then
//! `J_ζᵀB_θJ_ζ = B_γ` and preconditioned steps taken in either coordinate
//! system agree up to the second-order Taylor remainder of `ζ`. The
//! Hessian has an extra `Σ_j [∇h]_j H_{[ζ]_j}` term and generically does
//! not satisfy the condition.
//!
//! γ-space curvature is assembled from the composed predictor `f ∘ ζ`
//! (chain-rule Jacobians for the Gauss-Newton family, finite differences
//! of the γ-gradient for the Hessian), never by pulling back the θ-space
//! matrix — that identity is what the checks here measure.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::curvature::{self, CurvatureKind};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{loglik_grad, objective_and_grad, Dataset, Model, PredictiveFamily};

/// A smooth invertible reparameterization `θ = ζ(γ)`.
#[derive(Debug, Clone)]
pub enum Reparameterization {
    /// `ζ(γ) = Aγ + b` with invertible `A`; component Hessians vanish.
    Affine { a: DMatrix<f64>, b: DVector<f64> },
    /// Componentwise `ζ_j(γ) = γ_j³ + γ_j`; strictly monotone with
    /// `J_ζ = diag(3γ_j² + 1) ≥ I`.
    Cubic { dim: usize },
}

impl Reparameterization {
    pub fn identity(dim: usize) -> Self {
        Reparameterization::Affine {
            a: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
        }
    }

    pub fn affine(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.clone().lu().is_invertible() {
            return Err(Error::Singular("affine reparameterization"));
        }
        Ok(Reparameterization::Affine { a, b })
    }

    /// A well-conditioned random affine map: orthogonal rotation times a
    /// per-axis scale in [0.6, 1.6], plus a small offset.
    pub fn random_affine<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let gauss = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = gauss.qr().q();
        let scales = DVector::from_fn(dim, |_, _| 0.6 + rng.random::<f64>());
        let a = &q * DMatrix::from_diagonal(&scales);
        let b = DVector::from_fn(dim, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
        Reparameterization::Affine { a, b }
    }

    pub fn cubic(dim: usize) -> Self {
        Reparameterization::Cubic { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            Reparameterization::Affine { a, .. } => a.nrows(),
            Reparameterization::Cubic { dim } => *dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Reparameterization::Affine { .. } => "affine",
            Reparameterization::Cubic { .. } => "cubic",
        }
    }

    /// `θ = ζ(γ)`.
    pub fn apply(&self, gamma: &DVector<f64>) -> DVector<f64> {
        match self {
            Reparameterization::Affine { a, b } => a * gamma + b,
            Reparameterization::Cubic { .. } => gamma.map(|g| g * g * g + g),
        }
    }

    /// `γ = ζ⁻¹(θ)`. The cubic inverse is found per component by a
    /// safeguarded Newton iteration on `y³ + y = t`, converged to 1e−14.
    pub fn invert(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Reparameterization::Affine { a, b } => {
                linalg::lu_solve(a, &(theta - b), "affine inverse")
            }
            Reparameterization::Cubic { .. } => Ok(theta.map(invert_cubic_scalar)),
        }
    }

    /// `J_ζ(γ)`.
    pub fn jacobian(&self, gamma: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Reparameterization::Affine { a, .. } => a.clone(),
            Reparameterization::Cubic { .. } => {
                DMatrix::from_diagonal(&gamma.map(|g| 3.0 * g * g + 1.0))
            }
        }
    }

    /// Hessian of the `j`-th component, `H_{[ζ]_j}(γ)`.
    pub fn component_hessian(&self, j: usize, gamma: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        if let Reparameterization::Cubic { .. } = self {
            h[(j, j)] = 6.0 * gamma[j];
        }
        h
    }

    /// `dᵀ H_{[ζ]_j}(γ) d` without materializing the Hessian.
    pub fn hessian_quad_form(&self, j: usize, gamma: &DVector<f64>, d: &DVector<f64>) -> f64 {
        match self {
            Reparameterization::Affine { .. } => 0.0,
            Reparameterization::Cubic { .. } => 6.0 * gamma[j] * d[j] * d[j],
        }
    }
}

fn invert_cubic_scalar(t: f64) -> f64 {
    // y³ + y = t is strictly increasing; bracket by [0, t] (or [t, 0]).
    let (mut lo, mut hi) = if t >= 0.0 { (0.0, t) } else { (t, 0.0) };
    let mut y = t / (1.0 + t * t).cbrt();
    for _ in 0..200 {
        let f = y * y * y + y - t;
        if f.abs() <= 1e-14 * (1.0 + t.abs()) {
            return y;
        }
        if f > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let step = f / (3.0 * y * y + 1.0);
        y -= step;
        if !(lo..=hi).contains(&y) {
            y = 0.5 * (lo + hi);
        }
    }
    y
}

/// `J_ζᵀ B_θ J_ζ`.
pub fn pullback_curvature(b_theta: &DMatrix<f64>, j_zeta: &DMatrix<f64>) -> DMatrix<f64> {
    j_zeta.transpose() * b_theta * j_zeta
}

/// Assemble the θ-space curvature of `kind` at the model's current
/// parameters. Supports the four kinds of the invariance analysis.
pub fn theta_curvature<M: Model>(
    kind: CurvatureKind,
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
) -> Result<DMatrix<f64>> {
    match kind {
        CurvatureKind::Fisher => curvature::fisher_dense(model, family, data),
        CurvatureKind::Ggn => curvature::ggn_dense(model, family, data),
        CurvatureKind::EmpiricalFisher => curvature::empirical_fisher_dense(model, family, data),
        CurvatureKind::Hessian => curvature::hessian_dense(model, family, data),
        other => Err(Error::Unsupported(format!(
            "invariance analysis does not cover {other:?}"
        ))),
    }
}

/// Assemble the γ-space curvature of `kind` for the composed predictor
/// `f ∘ ζ` at `γ`.
pub fn gamma_curvature<M: Model>(
    kind: CurvatureKind,
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    reparam: &Reparameterization,
    gamma: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let theta = reparam.apply(gamma);
    let at_theta = model.with_params(&theta)?;
    let j_zeta = reparam.jacobian(gamma);
    let n = model.param_count();
    match kind {
        CurvatureKind::Fisher | CurvatureKind::Ggn => {
            let mut b = DMatrix::zeros(n, n);
            for (x, y) in data.cases() {
                let z = at_theta.forward(x)?;
                let inner = match kind {
                    CurvatureKind::Fisher => family.fisher(&z)?,
                    _ => family.loss_hessian(&z, y)?,
                };
                let jc = curvature::jacobian(&at_theta, x)? * &j_zeta;
                b += jc.transpose() * inner * jc;
            }
            Ok(linalg::symmetrize(&(b / data.len() as f64)))
        }
        CurvatureKind::EmpiricalFisher => {
            let mut b = DMatrix::zeros(n, n);
            for (x, y) in data.cases() {
                let g = j_zeta.transpose() * loglik_grad(&at_theta, family, x, y)?;
                b.ger(1.0, &g, &g, 1.0);
            }
            Ok(linalg::symmetrize(&(b / data.len() as f64)))
        }
        CurvatureKind::Hessian => {
            // Central finite differences of the γ-gradient of h(ζ(γ)).
            let step = 1e-5;
            let mut hess = DMatrix::zeros(n, n);
            for jcol in 0..n {
                let mut gp = gamma.clone();
                gp[jcol] += step;
                let mut gm = gamma.clone();
                gm[jcol] -= step;
                let col = (gamma_gradient(model, family, data, reparam, &gp)?
                    - gamma_gradient(model, family, data, reparam, &gm)?)
                    / (2.0 * step);
                hess.column_mut(jcol).copy_from(&col);
            }
            Ok(linalg::symmetrize(&hess))
        }
        other => Err(Error::Unsupported(format!(
            "invariance analysis does not cover {other:?}"
        ))),
    }
}

/// `∇_γ h(ζ(γ)) = J_ζ(γ)ᵀ ∇_θ h(ζ(γ))`.
pub fn gamma_gradient<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    reparam: &Reparameterization,
    gamma: &DVector<f64>,
) -> Result<DVector<f64>> {
    let at_theta = model.with_params(&reparam.apply(gamma))?;
    let (_, grad) = objective_and_grad(&at_theta, family, data)?;
    Ok(reparam.jacobian(gamma).transpose() * grad)
}

/// Relative residual `‖J_ζᵀB_θJ_ζ − B_γ‖_F / ‖B_γ‖_F` of the sufficient
/// invariance condition at `γ`.
pub fn condition_residual<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    reparam: &Reparameterization,
    gamma: &DVector<f64>,
    kind: CurvatureKind,
) -> Result<f64> {
    let theta = reparam.apply(gamma);
    let at_theta = model.with_params(&theta)?;
    let b_theta = theta_curvature(kind, &at_theta, family, data)?;
    let b_gamma = gamma_curvature(kind, model, family, data, reparam, gamma)?;
    let pulled = pullback_curvature(&b_theta, &reparam.jacobian(gamma));
    Ok(linalg::rel_err(&pulled, &b_gamma))
}

fn sym_solve(b: &DMatrix<f64>, rhs: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    let (vals, q) = linalg::sym_eigen(b);
    let max = vals.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max == 0.0 || vals.iter().any(|&v| v.abs() <= 1e-12 * max) {
        return Err(Error::Singular(context));
    }
    let coeffs = q.transpose() * rhs;
    let scaled = DVector::from_iterator(
        vals.len(),
        coeffs.iter().zip(vals.iter()).map(|(&c, &v)| c / v),
    );
    Ok(&q * scaled)
}

/// One preconditioned step taken in both coordinate systems.
///
/// Returns `(‖ζ(γ+d_γ) − (θ+d_θ)‖, taylor_bound)` where the bound is the
/// second-order remainder `½‖[d_γᵀH_{[ζ]_j}(γ + c·d_γ)d_γ]_j‖` maximized
/// per component over the sampled grid `c ∈ {0, 0.1, …, 1}`.
pub fn step_equivalence_error<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    reparam: &Reparameterization,
    gamma: &DVector<f64>,
    kind: CurvatureKind,
    alpha: f64,
) -> Result<(f64, f64)> {
    let theta = reparam.apply(gamma);
    let at_theta = model.with_params(&theta)?;
    let (_, grad_theta) = objective_and_grad(&at_theta, family, data)?;
    let b_theta = theta_curvature(kind, &at_theta, family, data)?;
    let d_theta = -alpha * sym_solve(&b_theta, &grad_theta, "θ-space curvature")?;

    let b_gamma = gamma_curvature(kind, model, family, data, reparam, gamma)?;
    let grad_gamma = reparam.jacobian(gamma).transpose() * &grad_theta;
    let d_gamma = -alpha * sym_solve(&b_gamma, &grad_gamma, "γ-space curvature")?;

    let error = (reparam.apply(&(gamma + &d_gamma)) - (&theta + d_theta)).norm();
    Ok((error, taylor_remainder_bound(reparam, gamma, &d_gamma)))
}

/// `½‖[max_c |d_γᵀH_{[ζ]_j}(γ + c·d_γ)d_γ|]_j‖` over `c ∈ {0, 0.1, …, 1}`.
fn taylor_remainder_bound(
    reparam: &Reparameterization,
    gamma: &DVector<f64>,
    d_gamma: &DVector<f64>,
) -> f64 {
    let n = reparam.dim();
    let mut worst = DVector::zeros(n);
    for j in 0..n {
        let mut best = 0.0f64;
        for step in 0..=10 {
            let c = step as f64 / 10.0;
            let point = gamma + d_gamma * c;
            best = best.max(reparam.hessian_quad_form(j, &point, d_gamma).abs());
        }
        worst[j] = best;
    }
    0.5 * worst.norm()
}

/// Result of running the same preconditioned optimizer in both coordinate
/// systems for `steps` iterations.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryComparison {
    /// `max_k ‖ζ(γ_k) − θ_k‖`.
    pub max_deviation: f64,
    /// Sum of the per-step Taylor bounds along the γ-trajectory.
    pub taylor_bound_sum: f64,
}

/// Run full-batch preconditioned descent in θ-space and in γ-space from
/// equivalent starting points (`γ₀ = ζ⁻¹(θ₀)`), recomputing the curvature
/// every step, and compare the paths through `ζ`.
pub fn trajectory_compare<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    reparam: &Reparameterization,
    kind: CurvatureKind,
    alpha: f64,
    steps: usize,
) -> Result<TrajectoryComparison> {
    let mut theta = model.params();
    let mut gamma = reparam.invert(&theta)?;
    let mut max_dev = 0.0f64;
    let mut bound_sum = 0.0f64;
    for _ in 0..steps {
        // θ-space step.
        let at_theta = model.with_params(&theta)?;
        let (_, grad) = objective_and_grad(&at_theta, family, data)?;
        let b_theta = theta_curvature(kind, &at_theta, family, data)?;
        theta += -alpha * sym_solve(&b_theta, &grad, "θ-space curvature")?;

        // γ-space step on the composed objective.
        let b_gamma = gamma_curvature(kind, model, family, data, reparam, &gamma)?;
        let grad_gamma = gamma_gradient(model, family, data, reparam, &gamma)?;
        let d_gamma = -alpha * sym_solve(&b_gamma, &grad_gamma, "γ-space curvature")?;
        bound_sum += taylor_remainder_bound(reparam, &gamma, &d_gamma);
        gamma += d_gamma;

        if !theta.iter().all(|v| v.is_finite()) || !gamma.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("trajectory comparison"));
        }
        max_dev = max_dev.max((reparam.apply(&gamma) - &theta).norm());
    }
    Ok(TrajectoryComparison { max_deviation: max_dev, taylor_bound_sum: bound_sum })
}

/// One row of the invariance report.
#[derive(Debug, Clone)]
pub struct InvarianceRecord {
    pub reparam: String,
    pub kind: String,
    pub condition_residual: f64,
    pub step_error: f64,
    pub taylor_bound: f64,
    pub trajectory_deviation: f64,
}

/// Render invariance records as CSV with the fixed header
/// `reparam,curvature,condition_residual,step_error,taylor_bound,trajectory_deviation`.
pub fn invariance_csv(rows: &[InvarianceRecord]) -> String {
    let mut out = String::from(
        "reparam,curvature,condition_residual,step_error,taylor_bound,trajectory_deviation\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.reparam, r.kind, r.condition_residual, r.step_error, r.taylor_bound,
            r.trajectory_deviation
        ));
    }
    out
}
