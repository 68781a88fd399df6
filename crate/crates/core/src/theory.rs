//! Exact convergence theory for stochastic preconditioned iterations on
//! quadratic objectives.
//!
//! Everything in this module concerns the iteration
//! `θ_{k+1} = θ_k − α_k B⁻¹ g_k(θ_k)` applied to
//! `h(θ) = ½(θ−θ*)ᵀH*(θ−θ*)` with unbiased gradient noise of constant
//! covariance `Σ_g`. The mean and variance of `θ_k` then admit closed
//! forms, expected losses reduce to traces, and the stationary variance is
//! the solution of a Lyapunov-type equation solved here by the vectorized
//! `n²×n²` linear system.
//!
//! Two variance conventions coexist deliberately, along two axes.
//!
//! Seeding: the exact recursion seeds `V₀ = 0` (a deterministic start has
//! no variance); the closed-form expression behind the constant-rate
//! bounds seeds `V₀ = (θ₀−θ*)(θ₀−θ*)ᵀ`. Each formula is paired with its
//! own seeding wherever they are compared.
//!
//! Propagation: the closed-form theory (stationary variance, bounds,
//! annealed coefficients) linearizes the per-step variance map to
//! `V ↦ (I − Ξ_{αB⁻¹H*})(V)`, dropping the `α²Ω_{B⁻¹H*}(V)` term of the
//! exact congruence `V ↦ MVMᵀ` with `M = I − αB⁻¹H*`. The two laws differ
//! at `O(α²)` per step, which a Monte-Carlo run with 10⁴ trials resolves
//! easily at a constant rate. The `loss_exact`/`averaged_loss_exact`
//! family therefore propagates by the exact congruence, while
//! [`variance_recursion`] realizes the operator model the closed forms
//! live in; both are exposed and tested against each other's oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::optim::LrSchedule;

/// The stochastic quadratic setting: SPD curvature `H*`, optimum `θ*`,
/// constant gradient-noise covariance `Σ_g`, and a start `θ₀`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    hessian: DMatrix<f64>,
    theta_star: DVector<f64>,
    noise_cov: DMatrix<f64>,
    theta0: DVector<f64>,
}

impl QuadraticProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        theta_star: DVector<f64>,
        noise_cov: DMatrix<f64>,
        theta0: DVector<f64>,
    ) -> Result<Self> {
        let n = hessian.nrows();
        if hessian.ncols() != n
            || theta_star.len() != n
            || theta0.len() != n
            || noise_cov.nrows() != n
            || noise_cov.ncols() != n
        {
            return Err(Error::dim("QuadraticProblem", n, noise_cov.nrows()));
        }
        let hessian = linalg::symmetrize(&hessian);
        let noise_cov = linalg::symmetrize(&noise_cov);
        if linalg::min_eig(&hessian) <= 0.0 {
            return Err(Error::NotPositiveDefinite("QuadraticProblem H*"));
        }
        if linalg::min_eig(&noise_cov) < -1e-10 * noise_cov.norm().max(1.0) {
            return Err(Error::InvalidArgument("Σ_g must be positive semi-definite".into()));
        }
        Ok(Self { hessian, theta_star, noise_cov, theta0 })
    }

    /// Realizable setting: the gradient-noise covariance equals `H*`.
    pub fn realizable(
        hessian: DMatrix<f64>,
        theta_star: DVector<f64>,
        theta0: DVector<f64>,
    ) -> Result<Self> {
        let cov = hessian.clone();
        Self::new(hessian, theta_star, cov, theta0)
    }

    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn theta0(&self) -> &DVector<f64> {
        &self.theta0
    }

    pub fn is_realizable(&self) -> bool {
        linalg::rel_err(&self.noise_cov, &self.hessian) <= 1e-12
    }

    /// `h(θ) = ½(θ−θ*)ᵀH*(θ−θ*)`.
    pub fn loss(&self, theta: &DVector<f64>) -> f64 {
        let d = theta - &self.theta_star;
        0.5 * d.dot(&(&self.hessian * &d))
    }

    pub fn initial_loss(&self) -> f64 {
        self.loss(&self.theta0)
    }
}

/// A fixed symmetric invertible preconditioner together with the schedule.
#[derive(Debug, Clone)]
pub struct IterationSpec {
    precond: DMatrix<f64>,
    pub schedule: LrSchedule,
}

impl IterationSpec {
    pub fn new(precond: DMatrix<f64>, schedule: LrSchedule) -> Result<Self> {
        schedule.validate()?;
        let precond = linalg::symmetrize(&precond);
        if !precond.clone().lu().is_invertible() {
            return Err(Error::Singular("IterationSpec preconditioner"));
        }
        Ok(Self { precond, schedule })
    }

    pub fn precond(&self) -> &DMatrix<f64> {
        &self.precond
    }

    pub fn precond_inv(&self) -> Result<DMatrix<f64>> {
        let n = self.precond.nrows();
        linalg::lu_solve_mat(&self.precond, &DMatrix::identity(n, n), "B⁻¹")
    }

    pub fn constant_rate(&self) -> Result<f64> {
        match self.schedule {
            LrSchedule::Constant(a) => Ok(a),
            _ => Err(Error::HypothesisViolated(
                "this quantity is defined only for a constant learning rate".into(),
            )),
        }
    }

    fn is_annealed(&self) -> bool {
        matches!(self.schedule, LrSchedule::Annealed)
    }
}

/// Eigenvalues of `B⁻¹H*` sorted descending (λ₁ ≥ … ≥ λ_n).
pub fn preconditioned_eigs(problem: &QuadraticProblem, spec: &IterationSpec) -> Result<Vec<f64>> {
    linalg::preconditioned_spectrum(spec.precond(), problem.hessian())
}

/// `Ξ_A(X) = AX + (AX)ᵀ`.
pub fn xi_apply(a: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let ax = a * x;
    &ax + ax.transpose()
}

/// `Ω_A(X) = AXAᵀ`. The second-order operator of the exact variance
/// congruence; the linearized closed forms drop it.
pub fn omega_apply(a: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    a * x * a.transpose()
}

fn binv_h(problem: &QuadraticProblem, spec: &IterationSpec) -> Result<DMatrix<f64>> {
    Ok(spec.precond_inv()? * problem.hessian())
}

fn noise_pushforward(problem: &QuadraticProblem, spec: &IterationSpec) -> Result<DMatrix<f64>> {
    let b_inv = spec.precond_inv()?;
    Ok(&b_inv * problem.noise_cov() * &b_inv)
}

/// Closed-form `E[θ_k]`: the deterministic iteration applied to the start.
///
/// Constant rate: `θ* + (I − αB⁻¹H*)^k (θ₀ − θ*)`. Annealed rate: the
/// ordered product `∏_{j=0}^{k−1}(I − α_j B⁻¹H*)` applied to `θ₀ − θ*`.
pub fn mean_iterate(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    k: usize,
) -> Result<DVector<f64>> {
    let a = binv_h(problem, spec)?;
    let mut e = problem.theta0() - problem.theta_star();
    for j in 0..k {
        let alpha = spec.schedule.rate(j);
        e -= &a * &e * alpha;
    }
    Ok(problem.theta_star() + e)
}

/// The operator-model variance recursion with `V₀ = 0`:
/// `V_{k+1} = (I − Ξ_{α_k B⁻¹H*})(V_k) + α_k² B⁻¹Σ_gB⁻¹`.
/// Returns the full sequence `V_0 … V_k`.
///
/// This is the linearized propagation the closed-form theory (stationary
/// variance, the constant-rate bounds, the annealed coefficients) is built
/// on. It drops the second-order congruence term `α_k²Ω_A(V_k)` of the
/// exact propagation — see [`process_variance_recursion`] for the law the
/// simulated iteration actually obeys; the two differ at `O(α²)` per step.
pub fn variance_recursion(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    k: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let n = problem.dim();
    let a = binv_h(problem, spec)?;
    let q = noise_pushforward(problem, spec)?;
    let mut seq = Vec::with_capacity(k + 1);
    let mut v = DMatrix::zeros(n, n);
    seq.push(v.clone());
    for j in 0..k {
        let alpha = spec.schedule.rate(j);
        v = &v - xi_apply(&(&a * alpha), &v) + &q * (alpha * alpha);
        v = linalg::symmetrize(&v);
        seq.push(v.clone());
    }
    Ok(seq)
}

/// The exact variance propagation of the stochastic iteration with
/// `V₀ = 0`: `V_{k+1} = M_k V_k M_kᵀ + α_k² B⁻¹Σ_gB⁻¹` where
/// `M_k = I − α_k B⁻¹H*`. Expanding the congruence shows it equals the
/// operator recursion plus the `α_k²Ω_{B⁻¹H*}(V_k)` term.
pub fn process_variance_recursion(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    k: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let n = problem.dim();
    let a = binv_h(problem, spec)?;
    let q = noise_pushforward(problem, spec)?;
    let mut seq = Vec::with_capacity(k + 1);
    let mut v: DMatrix<f64> = DMatrix::zeros(n, n);
    seq.push(v.clone());
    for j in 0..k {
        let alpha = spec.schedule.rate(j);
        let half = &v - (&a * &v) * alpha; // (I − αA)V
        v = linalg::symmetrize(&(&half - (half.clone() * a.transpose()) * alpha + &q * (alpha * alpha)));
        seq.push(v.clone());
    }
    Ok(seq)
}

/// Stationary variance for a constant rate:
/// `V_∞ = α (Ξ_{B⁻¹H*})⁻¹ (B⁻¹Σ_g B⁻¹)`, solved through the vectorized
/// Lyapunov system `B⁻¹H*V + VH*B⁻¹ = αB⁻¹Σ_gB⁻¹`.
pub fn stationary_variance(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
) -> Result<DMatrix<f64>> {
    let alpha = spec.constant_rate()?;
    let a = binv_h(problem, spec)?;
    let rhs = noise_pushforward(problem, spec)? * alpha;
    let v = linalg::solve_shifted_lyapunov(&a, 0.0, &rhs, "stationary variance")?;
    Ok(linalg::symmetrize(&v))
}

/// Start-seeded closed-form variance for a constant rate:
/// `V_k = (I − (I−Ξ_α)^k)(V_∞) + (I−Ξ_α)^k(D₀)` with
/// `D₀ = (θ₀−θ*)(θ₀−θ*)ᵀ`.
pub fn closed_form_variance(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    k: usize,
) -> Result<DMatrix<f64>> {
    let alpha = spec.constant_rate()?;
    let a = binv_h(problem, spec)? * alpha;
    let v_inf = stationary_variance(problem, spec)?;
    let d0 = {
        let d = problem.theta0() - problem.theta_star();
        &d * d.transpose()
    };
    let mut decayed_vinf = v_inf.clone();
    let mut decayed_d0 = d0;
    for _ in 0..k {
        decayed_vinf = linalg::symmetrize(&(&decayed_vinf - xi_apply(&a, &decayed_vinf)));
        decayed_d0 = linalg::symmetrize(&(&decayed_d0 - xi_apply(&a, &decayed_d0)));
    }
    Ok(v_inf - decayed_vinf + decayed_d0)
}

fn loss_from_parts(problem: &QuadraticProblem, v: &DMatrix<f64>, mean: &DVector<f64>) -> f64 {
    let h = problem.hessian();
    let e = mean - problem.theta_star();
    0.5 * ((h * v).trace() + e.dot(&(h * &e)))
}

/// Exact `E[h(θ_k)] − h(θ*)`: the mean iterate plus the process variance
/// (`V₀ = 0`, congruence propagation). This is the exact expectation of
/// the simulated stochastic iteration, and the quantity Monte-Carlo
/// estimates converge to.
pub fn loss_exact(problem: &QuadraticProblem, spec: &IterationSpec, k: usize) -> Result<f64> {
    Ok(loss_exact_grid(problem, spec, &[k])?[0])
}

/// [`loss_exact`] evaluated at several `k` in one sweep of the recursion.
/// `ks` must be strictly increasing.
pub fn loss_exact_grid(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    ks: &[usize],
) -> Result<Vec<f64>> {
    ensure_increasing(ks)?;
    let a = binv_h(problem, spec)?;
    let q = noise_pushforward(problem, spec)?;
    let n = problem.dim();
    let mut v: DMatrix<f64> = DMatrix::zeros(n, n);
    let mut mean = problem.theta0().clone();
    let mut out = Vec::with_capacity(ks.len());
    let mut next = 0;
    let last = *ks.last().unwrap_or(&0);
    for k in 0..=last {
        while next < ks.len() && ks[next] == k {
            out.push(loss_from_parts(problem, &v, &mean));
            next += 1;
        }
        if k == last {
            break;
        }
        let alpha = spec.schedule.rate(k);
        let half = &v - (&a * &v) * alpha;
        v = linalg::symmetrize(
            &(&half - (half.clone() * a.transpose()) * alpha + &q * (alpha * alpha)),
        );
        let e = &mean - problem.theta_star();
        mean -= &a * e * alpha;
    }
    Ok(out)
}

/// `E[h(θ_k)] − h(θ*)` assembled from the start-seeded closed form
/// ([`closed_form_variance`]) plus the mean term; constant rate only.
/// This is the quantity bracketed by [`loss_bounds_constant`].
pub fn loss_closed_form(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    k: usize,
) -> Result<f64> {
    let v = closed_form_variance(problem, spec, k)?;
    let mean = mean_iterate(problem, spec, k)?;
    Ok(loss_from_parts(problem, &v, &mean))
}

/// Closed-form operator-model losses on a grid, from one operator sweep.
#[derive(Debug, Clone)]
pub struct ClosedFormLosses {
    /// With the start seeding `V₀ = (θ₀−θ*)(θ₀−θ*)ᵀ` — the quantity the
    /// constant-rate bounds bracket.
    pub seeded: Vec<f64>,
    /// With `V₀ = 0`, i.e. the value of [`variance_recursion`]'s operator
    /// model plus the mean term.
    pub zero_start: Vec<f64>,
}

/// [`loss_closed_form`] on a strictly increasing grid, one operator sweep,
/// under both variance seedings.
pub fn loss_closed_form_grid(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    ks: &[usize],
) -> Result<ClosedFormLosses> {
    ensure_increasing(ks)?;
    let alpha = spec.constant_rate()?;
    let a = binv_h(problem, spec)? * alpha;
    let v_inf = stationary_variance(problem, spec)?;
    let d = problem.theta0() - problem.theta_star();
    let mut decayed_vinf = v_inf.clone();
    let mut decayed_d0 = &d * d.transpose();
    let mut mean = problem.theta0().clone();
    let mut seeded = Vec::with_capacity(ks.len());
    let mut zero_start = Vec::with_capacity(ks.len());
    let mut next = 0;
    let last = *ks.last().unwrap_or(&0);
    for k in 0..=last {
        while next < ks.len() && ks[next] == k {
            let v0 = &v_inf - &decayed_vinf;
            zero_start.push(loss_from_parts(problem, &v0, &mean));
            seeded.push(loss_from_parts(problem, &(v0 + &decayed_d0), &mean));
            next += 1;
        }
        if k == last {
            break;
        }
        decayed_vinf = linalg::symmetrize(&(&decayed_vinf - xi_apply(&a, &decayed_vinf)));
        decayed_d0 = linalg::symmetrize(&(&decayed_d0 - xi_apply(&a, &decayed_d0)));
        let e = &mean - problem.theta_star();
        mean -= &a * e;
    }
    Ok(ClosedFormLosses { seeded, zero_start })
}

fn ensure_increasing(ks: &[usize]) -> Result<()> {
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("k grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Trace of any solution `P` of the pseudo-CALE `AP + PᵀA + Q = 0`:
/// `tr(P) = −½tr(A⁻¹Q)`.
pub fn pseudo_cale_trace(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let x = linalg::lu_solve_mat(a, q, "pseudo-CALE trace")?;
    Ok(-0.5 * x.trace())
}

/// Lower/upper trace bounds for the CALE `AᵀP + PA + Q = 0`.
#[derive(Debug, Clone, Copy)]
pub struct TraceBounds {
    /// `tr(Q) / (−λ_n(A+Aᵀ))`
    pub wang_lo: f64,
    /// `tr(Q) / (−λ₁(A+Aᵀ))`
    pub wang_hi: f64,
    /// `Σ_i λ_i(Q) / (−λ_i(A+Aᵀ))`, eigenvalues sorted descending
    pub komaroff_hi: f64,
    /// `(Σ_i λ_i(Q)^{1/2})² / (−tr(A+Aᵀ))`
    pub komaroff_lo: f64,
}

/// Trace bounds on `tr(P)` for the CALE `AᵀP + PA + Q = 0`.
/// Requires `A + Aᵀ` negative definite and `Q` PSD.
pub fn trace_bounds(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<TraceBounds> {
    let sym_a = a + a.transpose();
    let eig_a = linalg::sorted_eigenvalues_desc(&sym_a);
    if *eig_a.first().unwrap() >= 0.0 {
        return Err(Error::NotPositiveDefinite("trace_bounds: −(A+Aᵀ)"));
    }
    let eig_q = linalg::sorted_eigenvalues_desc(q);
    if *eig_q.last().unwrap() < -1e-10 * q.norm().max(1.0) {
        return Err(Error::InvalidArgument("trace_bounds: Q must be PSD".into()));
    }
    let tr_q = q.trace();
    let wang_lo = tr_q / -eig_a.last().unwrap();
    let wang_hi = tr_q / -eig_a.first().unwrap();
    let komaroff_hi = eig_q
        .iter()
        .zip(&eig_a)
        .map(|(&lq, &la)| lq / -la)
        .sum::<f64>();
    let sqrt_sum: f64 = eig_q.iter().map(|&lq| lq.max(0.0).sqrt()).sum();
    let komaroff_lo = sqrt_sum * sqrt_sum / -sym_a.trace();
    Ok(TraceBounds { wang_lo, wang_hi, komaroff_hi, komaroff_lo })
}

/// The constant-rate convergence bounds `L(k) ≤ E[h(θ_k)] − h(θ*) ≤ U(k)`
/// with `ε₁ = αλ₁(B⁻¹H*)`, `ε₂ = αλ_n(B⁻¹H*)`:
///
/// `U(k) = [1−(1−2ε₁)^k]·(α/4)tr(B⁻¹Σ_g) + (1−2ε₂)^k h(θ₀) + (1−ε₂)^{2k} h(θ₀)`
///
/// and `L(k)` with the roles of `ε₁`, `ε₂` swapped. Requires the stability
/// hypothesis `2αλ₁(B⁻¹H*) < 1`.
pub fn loss_bounds_constant(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    k: usize,
) -> Result<(f64, f64)> {
    let alpha = spec.constant_rate()?;
    let eigs = preconditioned_eigs(problem, spec)?;
    let (l1, ln) = (eigs[0], *eigs.last().unwrap());
    if 2.0 * alpha * l1 >= 1.0 {
        return Err(Error::HypothesisViolated(format!(
            "2αλ₁(B⁻¹H*) = {} must be < 1",
            2.0 * alpha * l1
        )));
    }
    let e1 = alpha * l1;
    let e2 = alpha * ln;
    let noise = 0.25 * alpha * (spec.precond_inv()? * problem.noise_cov()).trace();
    let h0 = problem.initial_loss();
    let ki = k as i32;
    let upper = (1.0 - (1.0 - 2.0 * e1).powi(ki)) * noise
        + (1.0 - 2.0 * e2).powi(ki) * h0
        + (1.0 - e2).powi(2 * ki) * h0;
    let lower = (1.0 - (1.0 - 2.0 * e2).powi(ki)) * noise
        + (1.0 - 2.0 * e1).powi(ki) * h0
        + (1.0 - e1).powi(2 * ki) * h0;
    Ok((lower, upper))
}

/// Leading coefficients of the annealed (`α_k = 1/(k+1)`) expansion
/// `V_k = C₁/k + C₂/k² + O(1/k³)`, together with the trace evaluations
/// entering `E[h(θ_k)]`.
///
/// The `C₂` solve needs `Ξ_{B⁻¹H*} − 2I` invertible, which fails exactly
/// when some `λ_i + λ_j = 2` — notably whenever `B = H*`, where the true
/// second-order behavior is resonant and carries a `log k` factor. In that
/// case `c2`/`tr_h_c2` are `None`.
#[derive(Debug, Clone)]
pub struct AnnealedCoeffs {
    pub c1: DMatrix<f64>,
    pub c2: Option<DMatrix<f64>>,
    /// `tr(H*C₁)`, from the linear solve.
    pub tr_h_c1: f64,
    /// `tr(H*C₂)`, from the linear solve.
    pub tr_h_c2: Option<f64>,
    /// `½ tr((I − ½B^{1/2}H*⁻¹B^{1/2})⁻¹ B^{−1/2}Σ_gB^{−1/2})`.
    pub tr_h_c1_formula: f64,
    /// `−½ tr((I − B^{1/2}H*⁻¹B^{1/2})⁻¹ B^{−1/2}Σ_gB^{−1/2})`, defined
    /// when no eigenvalue of `B⁻¹H*` equals 1. Derived the same way as the
    /// `C₁` trace after rewriting `Ξ − 2I = 2(Ξ_{B⁻¹(H*/2)} − I)`.
    pub tr_h_c2_formula: Option<f64>,
}

impl AnnealedCoeffs {
    /// One-term prediction `tr(H*C₁)/(2k)`.
    pub fn leading(&self, k: usize) -> f64 {
        0.5 * self.tr_h_c1 / k as f64
    }

    /// Two-term prediction `tr(H*C₁)/(2k) + tr(H*C₂)/(2k²)`; `None` in the
    /// resonant case where no `1/k²` coefficient exists.
    pub fn two_term(&self, k: usize) -> Option<f64> {
        let kf = k as f64;
        self.tr_h_c2
            .map(|c2| 0.5 * self.tr_h_c1 / kf + 0.5 * c2 / (kf * kf))
    }

    pub fn c2_resonant(&self) -> bool {
        self.tr_h_c2.is_none()
    }
}

/// Solve for `C₁ = (Ξ_{B⁻¹H*} − I)⁻¹(B⁻¹Σ_gB⁻¹)` and
/// `C₂ = −(Ξ_{B⁻¹H*} − 2I)⁻¹(B⁻¹Σ_gB⁻¹)`, verifying both traces against
/// their closed forms to 1e−10.
///
/// Requires `λ_n(B⁻¹H*) > ½` (for `C₁`) and an SPD preconditioner. A
/// singular `Ξ − 2I` is signalled by leaving the `C₂` fields empty rather
/// than by failing the whole call, since `C₁` remains well-defined there.
pub fn annealed_coeffs(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
) -> Result<AnnealedCoeffs> {
    let eigs = preconditioned_eigs(problem, spec)?;
    let ln = *eigs.last().unwrap();
    if ln <= 0.5 {
        return Err(Error::HypothesisViolated(format!(
            "λ_n(B⁻¹H*) = {ln} must be > 1/2 for the annealed expansion"
        )));
    }
    let mut c2_singular = false;
    for (i, &li) in eigs.iter().enumerate() {
        for &lj in &eigs[i..] {
            if (li + lj - 2.0).abs() < 1e-10 {
                c2_singular = true;
            }
        }
    }
    let a = binv_h(problem, spec)?;
    let q = noise_pushforward(problem, spec)?;
    let c1 = linalg::solve_shifted_lyapunov(&a, 1.0, &q, "annealed C₁")?;
    let c2 = if c2_singular {
        None
    } else {
        Some(-linalg::solve_shifted_lyapunov(&a, 2.0, &q, "annealed C₂")?)
    };
    let h = problem.hessian();
    let tr_h_c1 = (h * &c1).trace();
    let tr_h_c2 = c2.as_ref().map(|m| (h * m).trace());

    // Closed-form route through B^{1/2}; requires B SPD.
    let b = spec.precond();
    if linalg::min_eig(b) <= 0.0 {
        return Err(Error::NotPositiveDefinite("annealed_coeffs preconditioner"));
    }
    let b_sqrt = linalg::sym_sqrt(b);
    let b_isqrt = linalg::sym_shifted_power(b, 0.0, -0.5, 1e-300)?;
    let h_inv = linalg::lu_solve_mat(h, &DMatrix::identity(h.nrows(), h.ncols()), "H*⁻¹")?;
    let core = &b_sqrt * &h_inv * &b_sqrt;
    let sigma_tilde = &b_isqrt * problem.noise_cov() * &b_isqrt;
    let n = h.nrows();
    let m1 = DMatrix::identity(n, n) - &core * 0.5;
    let tr_h_c1_formula = 0.5 * linalg::lu_solve_mat(&m1, &sigma_tilde, "trHC₁ formula")?.trace();
    let tr_h_c2_formula = if c2_singular {
        None
    } else {
        let m2 = DMatrix::identity(n, n) - &core;
        Some(-0.5 * linalg::lu_solve_mat(&m2, &sigma_tilde, "trHC₂ formula")?.trace())
    };

    let scale = tr_h_c1_formula.abs().max(1.0);
    if (tr_h_c1 - tr_h_c1_formula).abs() > 1e-10 * scale {
        return Err(Error::HypothesisViolated(
            "annealed C₁ trace identity failed to verify".into(),
        ));
    }
    if let (Some(t2), Some(f2)) = (tr_h_c2, tr_h_c2_formula) {
        if (t2 - f2).abs() > 1e-10 * f2.abs().max(1.0) {
            return Err(Error::HypothesisViolated(
                "annealed C₂ trace identity failed to verify".into(),
            ));
        }
    }
    Ok(AnnealedCoeffs { c1, c2, tr_h_c1, tr_h_c2, tr_h_c1_formula, tr_h_c2_formula })
}

/// `ψ_k(x) = ∏_{j=0}^{k−1} (1 − x/(j+1))`, the decay polynomial of the
/// annealed mean term; `ψ_k(x) = O(1/k^x)` and `ψ₀ = 1`.
pub fn psi_poly(k: usize, x: f64) -> f64 {
    let mut p = 1.0;
    for j in 0..k {
        p *= 1.0 - x / (j as f64 + 1.0);
    }
    p
}

/// The averaging bound of the constant-rate theory:
///
/// `E[h(θ̄_k)] − h(θ*) ≤ min{tr(H*⁻¹Σ_g)/(k+1), (α/2)tr(B⁻¹Σ_g)}
///   + min{‖H*^{−1/2}B(θ₀−θ*)‖²/((k+1)²α²), ‖B^{1/2}(θ₀−θ*)‖²/((k+1)α), 3h(θ₀)}`.
///
/// Requires `2αλ₁(B⁻¹H*) < 1` and an SPD preconditioner.
pub fn averaging_bound(problem: &QuadraticProblem, spec: &IterationSpec, k: usize) -> Result<f64> {
    let alpha = spec.constant_rate()?;
    let eigs = preconditioned_eigs(problem, spec)?;
    if 2.0 * alpha * eigs[0] >= 1.0 {
        return Err(Error::HypothesisViolated(format!(
            "2αλ₁(B⁻¹H*) = {} must be < 1",
            2.0 * alpha * eigs[0]
        )));
    }
    let b = spec.precond();
    if linalg::min_eig(b) <= 0.0 {
        return Err(Error::NotPositiveDefinite("averaging_bound preconditioner"));
    }
    let h = problem.hessian();
    let kp1 = k as f64 + 1.0;
    let tr_hinv_sigma = linalg::lu_solve_mat(h, problem.noise_cov(), "H*⁻¹Σ_g")?.trace();
    let tr_binv_sigma = (spec.precond_inv()? * problem.noise_cov()).trace();
    let noise = (tr_hinv_sigma / kp1).min(0.5 * alpha * tr_binv_sigma);

    let d0 = problem.theta0() - problem.theta_star();
    let h_isqrt = linalg::sym_shifted_power(h, 0.0, -0.5, 1e-300)?;
    let b_sqrt = linalg::sym_sqrt(b);
    let m1 = (&h_isqrt * b * &d0).norm_squared() / (kp1 * kp1 * alpha * alpha);
    let m2 = (&b_sqrt * &d0).norm_squared() / (kp1 * alpha);
    let m3 = 3.0 * problem.initial_loss();
    Ok(noise + m1.min(m2).min(m3))
}

/// Exact `E[h(θ̄_k)] − h(θ*)` for the uniformly averaged iterate under a
/// constant rate, from the covariance chain
/// `cov(θ_i, θ_j) = V_i ((I − αB⁻¹H*)^{j−i})ᵀ` for `j ≥ i` with `V_i` the
/// process variance. Like [`loss_exact`], this is what the simulated
/// averaged iterate converges to.
pub fn averaged_loss_exact(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    k: usize,
) -> Result<f64> {
    Ok(averaged_loss_exact_grid(problem, spec, &[k])?[0])
}

/// [`averaged_loss_exact`] at several `k` in one incremental sweep.
pub fn averaged_loss_exact_grid(
    problem: &QuadraticProblem,
    spec: &IterationSpec,
    ks: &[usize],
) -> Result<Vec<f64>> {
    ensure_increasing(ks)?;
    let alpha = spec.constant_rate()?;
    let n = problem.dim();
    let a = binv_h(problem, spec)? * alpha;
    let step = DMatrix::identity(n, n) - &a; // M = I − αB⁻¹H*
    let q = noise_pushforward(problem, spec)? * (alpha * alpha);

    // Running state: V_k (process variance), e_k = E[θ_k] − θ*,
    // R_k = Σ_{i<k} cov(θ_i, θ_k), T_k = Σ_{i,j≤k} cov(θ_i, θ_j),
    // s_k = Σ_{i≤k} e_i.
    let mut v = DMatrix::<f64>::zeros(n, n);
    let mut e = problem.theta0() - problem.theta_star();
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut t = DMatrix::<f64>::zeros(n, n);
    let mut s = e.clone();

    let h = problem.hessian();
    let mut out = Vec::with_capacity(ks.len());
    let mut next = 0;
    let last = *ks.last().unwrap_or(&0);
    for k in 0..=last {
        while next < ks.len() && ks[next] == k {
            let kp1 = (k + 1) as f64;
            let v_bar = &t / (kp1 * kp1);
            let mean_bar = &s / kp1;
            out.push(0.5 * ((h * v_bar).trace() + mean_bar.dot(&(h * &mean_bar))));
            next += 1;
        }
        if k == last {
            break;
        }
        // Advance to index k+1.
        r = (&r + &v) * step.transpose();
        v = linalg::symmetrize(&(&step * v * step.transpose() + &q));
        t = &t + &v + &r + r.transpose();
        e = &step * e;
        s += &e;
    }
    Ok(out)
}

/// The `1/k`-coefficient comparison of the realizable consequence analysis:
/// `B = H*` gives `n/2`, while `B = λ_n(H*)·I` gives
/// `¼ Σ_i r_i/(1 − 1/(2r_i))` with `r_i = λ_i(H*)/λ_n(H*)`, bracketed by
/// `κ(H*)/4 ≤ ¼Σr_i ≤ term ≤ ½Σr_i`.
#[derive(Debug, Clone)]
pub struct ConsequenceReport {
    /// `n/2`, the `B = H*` noise coefficient.
    pub term_b_hstar: f64,
    /// `¼ Σ r_i/(1 − 1/(2r_i))`, the `B = λ_n(H*)I` noise coefficient.
    pub term_b_lambda_n: f64,
    pub eigenvalue_ratios: Vec<f64>,
    pub condition_number: f64,
    /// `κ/4`.
    pub bracket_lo: f64,
    /// `¼ Σ r_i`.
    pub bracket_mid: f64,
    /// `½ Σ r_i`.
    pub bracket_hi: f64,
}

/// Compare the asymptotic noise terms of second-order (`B = H*`) and
/// first-order (`B = λ_n(H*)I`) annealed optimization in the realizable
/// setting. Errors unless `Σ_g = H*`.
pub fn consequence_terms(problem: &QuadraticProblem) -> Result<ConsequenceReport> {
    if !problem.is_realizable() {
        return Err(Error::InvalidArgument(
            "consequence_terms requires the realizable setting Σ_g = H*".into(),
        ));
    }
    let eigs = linalg::sorted_eigenvalues_desc(problem.hessian());
    let lambda_n = *eigs.last().unwrap();
    let ratios: Vec<f64> = eigs.iter().map(|&l| l / lambda_n).collect();
    let term = 0.25
        * ratios
            .iter()
            .map(|&r| r / (1.0 - 1.0 / (2.0 * r)))
            .sum::<f64>();
    let sum_r: f64 = ratios.iter().sum();
    Ok(ConsequenceReport {
        term_b_hstar: problem.dim() as f64 / 2.0,
        term_b_lambda_n: term,
        condition_number: ratios[0],
        bracket_lo: ratios[0] / 4.0,
        bracket_mid: 0.25 * sum_r,
        bracket_hi: 0.5 * sum_r,
        eigenvalue_ratios: ratios,
    })
}

/// Per-iteration closed-form predictions on a `k` grid, exportable as CSV.
///
/// Columns that a schedule does not define (bounds under annealing, the
/// annealed expansion under a constant rate) hold NaN.
#[derive(Debug, Clone)]
pub struct TheoryCurve {
    pub ks: Vec<usize>,
    pub loss_exact: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub averaging_bound: Vec<f64>,
    pub annealed_leading: Vec<f64>,
    pub annealed_two_term: Vec<f64>,
}

impl TheoryCurve {
    pub fn compute(
        problem: &QuadraticProblem,
        spec: &IterationSpec,
        ks: &[usize],
    ) -> Result<Self> {
        ensure_increasing(ks)?;
        let loss = loss_exact_grid(problem, spec, ks)?;
        let mut lower = vec![f64::NAN; ks.len()];
        let mut upper = vec![f64::NAN; ks.len()];
        let mut avg = vec![f64::NAN; ks.len()];
        let mut lead = vec![f64::NAN; ks.len()];
        let mut two = vec![f64::NAN; ks.len()];
        if spec.constant_rate().is_ok() {
            for (i, &k) in ks.iter().enumerate() {
                if let Ok((l, u)) = loss_bounds_constant(problem, spec, k) {
                    lower[i] = l;
                    upper[i] = u;
                }
                if let Ok(b) = averaging_bound(problem, spec, k) {
                    avg[i] = b;
                }
            }
        }
        if spec.is_annealed() {
            if let Ok(coeffs) = annealed_coeffs(problem, spec) {
                for (i, &k) in ks.iter().enumerate() {
                    if k > 0 {
                        lead[i] = coeffs.leading(k);
                        two[i] = coeffs.two_term(k).unwrap_or(f64::NAN);
                    }
                }
            }
        }
        Ok(Self {
            ks: ks.to_vec(),
            loss_exact: loss,
            lower,
            upper,
            averaging_bound: avg,
            annealed_leading: lead,
            annealed_two_term: two,
        })
    }

    /// Fixed-header CSV:
    /// `k,loss_exact,L,U,averaging_bound,annealed_leading,annealed_two_term`.
    pub fn csv(&self) -> String {
        let mut out =
            String::from("k,loss_exact,L,U,averaging_bound,annealed_leading,annealed_two_term\n");
        for i in 0..self.ks.len() {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                self.ks[i],
                self.loss_exact[i],
                self.lower[i],
                self.upper[i],
                self.averaging_bound[i],
                self.annealed_leading[i],
                self.annealed_two_term[i],
            ));
        }
        out
    }
}
