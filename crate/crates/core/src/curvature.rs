//! Dense curvature matrices and the quadratic-model machinery built on them.
//!
//! All operators are realized as explicit symmetric `n×n` matrices at desk
//! scale. The matvec path (`jvp → F_R → vjp`) exists alongside the dense
//! assembly and is tested against it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    loglik_grad, objective, objective_and_grad, Dataset, Model, PredictiveFamily,
};

/// Hard cap on the parameter count for finite-difference Hessian assembly.
const HESSIAN_DIM_CAP: usize = 200;

/// How a diagonal empirical-Fisher accumulator folds in new gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiagMode {
    /// Equally weighted average of all past squared gradients.
    AdaGrad,
    /// Exponentially decayed running average with the given decay ρ.
    Rms { decay: f64 },
}

/// The closed set of curvature-matrix kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurvatureKind {
    Fisher,
    MonteCarloFisher(usize),
    EmpiricalFisher,
    Ggn,
    Hessian,
    Identity,
    DiagEmpFisher(DiagMode),
}

/// A dense symmetric curvature operator with Tikhonov damping `λ` and a
/// fractional exponent `ξ`; updates use `(B + λI)^{−ξ}`.
#[derive(Debug, Clone)]
pub struct CurvatureOperator {
    pub kind: CurvatureKind,
    dense: DMatrix<f64>,
    pub damping: f64,
    pub exponent: f64,
}

impl CurvatureOperator {
    pub fn new(kind: CurvatureKind, dense: DMatrix<f64>) -> Self {
        Self {
            kind,
            dense: linalg::symmetrize(&dense),
            damping: 0.0,
            exponent: 1.0,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(CurvatureKind::Identity, DMatrix::identity(n, n))
    }

    /// Assemble the dense matrix for `kind` on the given model and data.
    /// The RNG is consumed only by the Monte-Carlo Fisher.
    pub fn assemble<M: Model, R: Rng>(
        kind: CurvatureKind,
        model: &M,
        family: &PredictiveFamily,
        data: &Dataset,
        rng: &mut R,
    ) -> Result<Self> {
        let dense = match kind {
            CurvatureKind::Fisher => fisher_dense(model, family, data)?,
            CurvatureKind::MonteCarloFisher(samples) => {
                mc_fisher_dense(model, family, data, samples, rng)?
            }
            CurvatureKind::EmpiricalFisher => empirical_fisher_dense(model, family, data)?,
            CurvatureKind::Ggn => ggn_dense(model, family, data)?,
            CurvatureKind::Hessian => hessian_dense(model, family, data)?,
            CurvatureKind::Identity => DMatrix::identity(model.param_count(), model.param_count()),
            CurvatureKind::DiagEmpFisher(_) => {
                let f = empirical_fisher_dense(model, family, data)?;
                DMatrix::from_diagonal(&f.diagonal())
            }
        };
        Ok(Self::new(kind, dense))
    }

    pub fn dense(&self) -> &DMatrix<f64> {
        &self.dense
    }

    pub fn dim(&self) -> usize {
        self.dense.nrows()
    }

    pub fn damp(mut self, lambda: f64) -> Self {
        self.damping = lambda.max(0.0);
        self
    }

    pub fn with_exponent(mut self, xi: f64) -> Self {
        self.exponent = xi;
        self
    }

    /// `(B + λI)^ξ` with eigenvalues clamped at zero before the shift.
    pub fn effective_matrix(&self) -> Result<DMatrix<f64>> {
        linalg::sym_shifted_power(&self.dense, self.damping, self.exponent, 0.0)
    }

    /// Solve `(B + λI)^ξ δ = v`. Fails with a singularity error when the
    /// damped spectrum is not safely positive.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::dim("CurvatureOperator::apply_inverse", self.dim(), v.len()));
        }
        let (vals, q) = linalg::sym_eigen(&self.dense);
        let shifted: Vec<f64> = vals.iter().map(|&e| e.max(0.0) + self.damping).collect();
        let max = shifted.iter().copied().fold(0.0f64, f64::max);
        let min = shifted.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 1e-14 * max && min > 0.0) {
            return Err(Error::Singular("damped curvature operator"));
        }
        let coeffs = q.transpose() * v;
        let scaled = DVector::from_iterator(
            shifted.len(),
            coeffs
                .iter()
                .zip(&shifted)
                .map(|(&c, &s)| c * s.powf(-self.exponent)),
        );
        Ok(&q * scaled)
    }
}

/// Jacobian `J_f` of the model output at `x` (`m×n`), assembled row by row
/// with VJPs.
pub fn jacobian<M: Model>(model: &M, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = (model.output_dim(), model.param_count());
    let mut j = DMatrix::zeros(m, n);
    let mut e = DVector::zeros(m);
    for row in 0..m {
        e[row] = 1.0;
        j.row_mut(row).copy_from(&model.vjp(x, &e)?.transpose());
        e[row] = 0.0;
    }
    Ok(j)
}

/// Exact Fisher `F = (1/|S|) Σ_x J_fᵀ F_R J_f` over the training inputs.
pub fn fisher_dense<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
) -> Result<DMatrix<f64>> {
    let n = model.param_count();
    let mut f = DMatrix::zeros(n, n);
    for (x, _) in data.cases() {
        let z = model.forward(x)?;
        let fr = family.fisher(&z)?;
        let j = jacobian(model, x)?;
        f += j.transpose() * fr * j;
    }
    f /= data.len() as f64;
    Ok(linalg::symmetrize(&f))
}

/// Monte-Carlo Fisher: the outer-product form with `samples` targets drawn
/// from the model's own predictive distribution per case.
pub fn mc_fisher_dense<M: Model, R: Rng>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    samples: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("Monte-Carlo Fisher needs at least one sample".into()));
    }
    let n = model.param_count();
    let m = family.output_dim();
    let mut f = DMatrix::zeros(n, n);
    for (x, _) in data.cases() {
        let z = model.forward(x)?;
        // Accumulate the z-space second moment, then push through Jᵀ·J once.
        let mut second = DMatrix::zeros(m, m);
        for _ in 0..samples {
            let y = family.sample(&z, rng)?;
            let g = family.grad_log_density(&z, &y)?;
            second.ger(1.0, &g, &g, 1.0);
        }
        second /= samples as f64;
        let j = jacobian(model, x)?;
        f += j.transpose() * second * j;
    }
    f /= data.len() as f64;
    Ok(linalg::symmetrize(&f))
}

/// Empirical Fisher `F̄ = (1/|S|) Σ ∇log p ∇log pᵀ` over training targets.
pub fn empirical_fisher_dense<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
) -> Result<DMatrix<f64>> {
    let n = model.param_count();
    let mut f = DMatrix::zeros(n, n);
    for (x, y) in data.cases() {
        let g = loglik_grad(model, family, x, y)?;
        f.ger(1.0, &g, &g, 1.0);
    }
    f /= data.len() as f64;
    Ok(linalg::symmetrize(&f))
}

/// Generalized Gauss-Newton `G = (1/|S|) Σ J_fᵀ H_L J_f`.
///
/// Signals a convexity violation if any per-case `H_L` has an eigenvalue
/// below `−1e−8`.
pub fn ggn_dense<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
) -> Result<DMatrix<f64>> {
    let n = model.param_count();
    let mut g = DMatrix::zeros(n, n);
    for (x, y) in data.cases() {
        let z = model.forward(x)?;
        let hl = family.loss_hessian(&z, y)?;
        let min_eig = linalg::min_eig(&hl);
        if min_eig < -1e-8 {
            return Err(Error::ConvexityViolation { min_eig });
        }
        let j = jacobian(model, x)?;
        g += j.transpose() * hl * j;
    }
    g /= data.len() as f64;
    Ok(linalg::symmetrize(&g))
}

/// Hessian of the training objective by central finite differences of the
/// analytic gradient (step `1e−5`), symmetrized.
pub fn hessian_dense<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
) -> Result<DMatrix<f64>> {
    let n = model.param_count();
    if n > HESSIAN_DIM_CAP {
        return Err(Error::TooLarge { n, cap: HESSIAN_DIM_CAP });
    }
    let h = 1e-5;
    let p = model.params();
    let mut hess = DMatrix::zeros(n, n);
    for jcol in 0..n {
        let mut dp = p.clone();
        dp[jcol] += h;
        let (_, gp) = objective_and_grad(&model.with_params(&dp)?, family, data)?;
        dp[jcol] = p[jcol] - h;
        let (_, gm) = objective_and_grad(&model.with_params(&dp)?, family, data)?;
        let col = (gp - gm) / (2.0 * h);
        if !col.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("finite-difference Hessian"));
        }
        hess.column_mut(jcol).copy_from(&col);
    }
    Ok(linalg::symmetrize(&hess))
}

/// Fisher-vector product along the `jvp → F_R → vjp` path, without forming
/// the dense matrix.
pub fn fisher_matvec<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(model.param_count());
    for (x, _) in data.cases() {
        let z = model.forward(x)?;
        let fr = family.fisher(&z)?;
        let jv = model.jvp(x, v)?;
        out += model.vjp(x, &(fr * jv))?;
    }
    Ok(out / data.len() as f64)
}

/// Online diagonal empirical-Fisher accumulator for the `diag(p_k)` methods.
#[derive(Debug, Clone)]
pub struct DiagAccumulator {
    p: DVector<f64>,
    count: usize,
    mode: DiagMode,
}

impl DiagAccumulator {
    pub fn new(dim: usize, mode: DiagMode) -> Self {
        Self { p: DVector::zeros(dim), count: 0, mode }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.p
    }

    /// Fold in one gradient: equally weighted average of all past `g⊙g`
    /// (AdaGrad) or an exponentially decayed running average (RMS).
    pub fn update(&mut self, g: &DVector<f64>) -> Result<()> {
        if g.len() != self.p.len() {
            return Err(Error::dim("DiagAccumulator::update", self.p.len(), g.len()));
        }
        let sq = g.component_mul(g);
        match self.mode {
            DiagMode::AdaGrad => {
                let k = self.count as f64;
                self.p = (&self.p * k + sq) / (k + 1.0);
            }
            DiagMode::Rms { decay } => {
                self.p = &self.p * decay + sq * (1.0 - decay);
            }
        }
        self.count += 1;
        Ok(())
    }
}

/// `|KL_avg(θ+d ‖ θ) − ½dᵀFd|`: the cubic remainder of the KL quadratic
/// approximation defined by the Fisher.
pub fn kl_quadratic_residual<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    d: &DVector<f64>,
) -> Result<f64> {
    let perturbed = model.with_params(&(model.params() + d))?;
    let mut kl = 0.0;
    for (x, _) in data.cases() {
        kl += family.kl(&perturbed.forward(x)?, &model.forward(x)?)?;
    }
    kl /= data.len() as f64;
    let f = fisher_dense(model, family, data)?;
    let quad = 0.5 * d.dot(&(&f * d));
    Ok((kl - quad).abs())
}

/// The quadratic model `M(δ) = ½δᵀFδ + ∇hᵀδ + h(θ)`.
pub fn quadratic_model_eval<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    delta: &DVector<f64>,
) -> Result<f64> {
    let f = fisher_dense(model, family, data)?;
    let (h, grad) = objective_and_grad(model, family, data)?;
    Ok(0.5 * delta.dot(&(&f * delta)) + grad.dot(delta) + h)
}

/// Solve `F_R w = rhs`, adding a `1e−12` ridge when `F_R` is singular
/// (the softmax Fisher always is; its gradients lie in the range).
fn family_fisher_solve(
    family: &PredictiveFamily,
    z: &DVector<f64>,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let fr = family.fisher(z)?;
    if let Some(chol) = fr.clone().cholesky() {
        let (vals, _) = linalg::sym_eigen(&fr);
        let max = vals.iter().copied().fold(0.0f64, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        if min > 1e-12 * max {
            return Ok(chol.solve(rhs));
        }
    }
    let n = fr.nrows();
    let ridged = fr + DMatrix::identity(n, n) * 1e-12;
    ridged
        .cholesky()
        .map(|c| c.solve(rhs))
        .ok_or(Error::Singular("ridged family Fisher"))
}

/// The z-space decomposition of the quadratic model:
/// `M(δ) = (1/|S|) Σ ½‖J_f δ − F_R⁻¹∇_z log r‖²_{F_R} + c`.
///
/// Returns `(sum-of-squares term, constant c)`; their sum equals
/// [`quadratic_model_eval`].
pub fn zspace_decomposition<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
    delta: &DVector<f64>,
) -> Result<(f64, f64)> {
    let h = objective(model, family, data)?;
    let mut sos = 0.0;
    let mut corr = 0.0;
    for (x, y) in data.cases() {
        let z = model.forward(x)?;
        let fr = family.fisher(&z)?;
        let gz = family.grad_log_density(&z, y)?;
        let target = family_fisher_solve(family, &z, &gz)?;
        let resid = model.jvp(x, delta)? - &target;
        sos += 0.5 * resid.dot(&(&fr * &resid));
        corr += 0.5 * gz.dot(&target);
    }
    let scale = 1.0 / data.len() as f64;
    Ok((sos * scale, h - corr * scale))
}

/// Largest possible improvement of the quadratic model:
/// `−(1/(2|S|)) Σ ∇_z log rᵀ F_R⁻¹ ∇_z log r`, a lower bound on
/// `M(δ) − h(θ)` for every `δ`.
pub fn improvement_bound<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in data.cases() {
        let z = model.forward(x)?;
        let gz = family.grad_log_density(&z, y)?;
        let sol = family_fisher_solve(family, &z, &gz)?;
        total += gz.dot(&sol);
    }
    Ok(-0.5 * total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IdentityModel, MlpModel, Target};
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_setup(theta: f64) -> (IdentityModel, PredictiveFamily, Dataset) {
        (
            IdentityModel::new(dvector![theta]),
            PredictiveFamily::gaussian_mean(1, 1.0),
            Dataset::scalar_origin(),
        )
    }

    #[test]
    fn fisher_is_one_for_scalar_setup() {
        let (m, fam, data) = scalar_setup(0.8);
        let f = fisher_dense(&m, &fam, &data).unwrap();
        assert!((f[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_fisher_is_theta_squared() {
        let (m, fam, data) = scalar_setup(0.8);
        let f = empirical_fisher_dense(&m, &fam, &data).unwrap();
        assert!((f[(0, 0)] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn gaussian_fisher_equals_classical_gauss_newton() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = MlpModel::random(&[2, 4, 2], &mut rng).unwrap();
        let fam = PredictiveFamily::gaussian_mean(2, 1.0);
        let data = Dataset::sampled_from_model(&model, &fam, 4, &mut rng).unwrap();
        let f = fisher_dense(&model, &fam, &data).unwrap();
        let mut gn = DMatrix::zeros(model.param_count(), model.param_count());
        for (x, _) in data.cases() {
            let j = jacobian(&model, x).unwrap();
            gn += j.transpose() * j;
        }
        gn /= data.len() as f64;
        assert!(linalg::rel_err(&f, &gn) < 1e-13);
    }

    #[test]
    fn mc_fisher_scalar_setup_mean_tends_to_one() {
        let (m, fam, data) = scalar_setup(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let f = mc_fisher_dense(&m, &fam, &data, 200_000, &mut rng).unwrap();
        assert!((f[(0, 0)] - 1.0).abs() < 0.02, "got {}", f[(0, 0)]);
    }

    #[test]
    fn mc_fisher_single_sample_is_low_rank_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let fam = PredictiveFamily::softmax(2);
        let data = Dataset::sampled_from_model(&model, &fam, 2, &mut rng).unwrap();
        let f = mc_fisher_dense(&model, &fam, &data, 1, &mut rng).unwrap();
        assert!(linalg::min_eig(&f) >= -1e-10 * f.norm());
        let rank = f.clone().svd(false, false).rank(1e-10 * f.norm());
        assert!(rank <= data.len());
    }

    #[test]
    fn empirical_fisher_rank_bounded_by_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let model = MlpModel::random(&[2, 2, 1], &mut rng).unwrap(); // n = 9 > 3
        let fam = PredictiveFamily::gaussian_mean(1, 1.0);
        let data = Dataset::sampled_from_model(&model, &fam, 3, &mut rng).unwrap();
        let f = empirical_fisher_dense(&model, &fam, &data).unwrap();
        assert!(model.param_count() > 3);
        let rank = f.clone().svd(false, false).rank(1e-12 * f.norm());
        assert!(rank <= 3);
    }

    #[test]
    fn empirical_fisher_vanishes_at_per_case_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let model = MlpModel::random(&[2, 3, 1], &mut rng).unwrap();
        let data = Dataset::noiseless_from_model(&model, 3, &mut rng).unwrap();
        let fam = PredictiveFamily::gaussian_mean(1, 1.0);
        let f = empirical_fisher_dense(&model, &fam, &data).unwrap();
        assert!(f.norm() < 1e-24);
    }

    #[derive(Clone)]
    struct ConstModel {
        out: DVector<f64>,
        n: usize,
    }

    impl Model for ConstModel {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            self.out.len()
        }
        fn param_count(&self) -> usize {
            self.n
        }
        fn params(&self) -> DVector<f64> {
            DVector::zeros(self.n)
        }
        fn set_params(&mut self, _p: &DVector<f64>) -> Result<()> {
            Ok(())
        }
        fn forward(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(self.out.clone())
        }
        fn jvp(&self, _x: &DVector<f64>, _v: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(DVector::zeros(self.out.len()))
        }
        fn vjp(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(DVector::zeros(self.n))
        }
    }

    #[test]
    fn ggn_zero_jacobian_gives_zero() {
        let model = ConstModel { out: dvector![0.4, -0.1], n: 3 };
        let fam = PredictiveFamily::gaussian_mean(2, 1.0);
        let data = Dataset::new(vec![(dvector![0.0], Target::Real(dvector![1.0, 1.0]))]).unwrap();
        let g = ggn_dense(&model, &fam, &data).unwrap();
        assert_eq!(g, DMatrix::zeros(3, 3));
    }

    #[test]
    fn hessian_equals_ggn_for_linear_gaussian() {
        // Linear f makes the curvature term vanish: H = G = F exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut model = MlpModel::zeros(&[2, 2], &[crate::model::Activation::Identity]).unwrap();
        model
            .set_params(&DVector::from_fn(model.param_count(), |i, _| {
                0.3 * ((i + 1) as f64).sin()
            }))
            .unwrap();
        let fam = PredictiveFamily::gaussian_mean(2, 1.0);
        let data = Dataset::sampled_from_model(&model, &fam, 3, &mut rng).unwrap();
        let h = hessian_dense(&model, &fam, &data).unwrap();
        let g = ggn_dense(&model, &fam, &data).unwrap();
        let f = fisher_dense(&model, &fam, &data).unwrap();
        assert!(linalg::rel_err(&h, &g) < 1e-9);
        assert!(linalg::rel_err(&g, &f) < 1e-13);
    }

    #[test]
    fn hessian_minus_ggn_is_curvature_term() {
        // On a 1-hidden-unit net, H − G must equal the mean of
        // Σ_j [∇_z L]_j H_{[f]_j} with each output-component Hessian taken
        // by finite differences of the forward map.
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let model = MlpModel::random(&[1, 1, 1], &mut rng).unwrap();
        let fam = PredictiveFamily::gaussian_mean(1, 1.0);
        let data = Dataset::sampled_from_model(&model, &fam, 2, &mut rng).unwrap();
        let h = hessian_dense(&model, &fam, &data).unwrap();
        let g = ggn_dense(&model, &fam, &data).unwrap();

        let n = model.param_count();
        let fd = 1e-4;
        let p = model.params();
        let mut term = DMatrix::zeros(n, n);
        for (x, y) in data.cases() {
            let z = model.forward(x).unwrap();
            let grad_l = -fam.grad_log_density(&z, y).unwrap();
            // FD Hessian of the single output component.
            let mut hf = DMatrix::zeros(n, n);
            for a in 0..n {
                for b in 0..n {
                    let mut pp = p.clone();
                    pp[a] += fd;
                    pp[b] += fd;
                    let fpp = model.with_params(&pp).unwrap().forward(x).unwrap()[0];
                    let mut pm = p.clone();
                    pm[a] += fd;
                    pm[b] -= fd;
                    let fpm = model.with_params(&pm).unwrap().forward(x).unwrap()[0];
                    let mut mp = p.clone();
                    mp[a] -= fd;
                    mp[b] += fd;
                    let fmp = model.with_params(&mp).unwrap().forward(x).unwrap()[0];
                    let mut mm = p.clone();
                    mm[a] -= fd;
                    mm[b] -= fd;
                    let fmm = model.with_params(&mm).unwrap().forward(x).unwrap()[0];
                    hf[(a, b)] = (fpp - fpm - fmp + fmm) / (4.0 * fd * fd);
                }
            }
            term += hf * grad_l[0];
        }
        term /= data.len() as f64;
        let diff = h - g;
        assert!(linalg::rel_err(&diff, &term) < 1e-3);
    }

    #[test]
    fn apply_inverse_identity_is_identity() {
        let op = CurvatureOperator::identity(3);
        let v = dvector![1.0, -2.0, 0.5];
        assert!((op.apply_inverse(&v).unwrap() - &v).norm() < 1e-14);
    }

    #[test]
    fn apply_inverse_large_damping_is_gradient_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let model = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let fam = PredictiveFamily::softmax(2);
        let data = Dataset::sampled_from_model(&model, &fam, 3, &mut rng).unwrap();
        let lambda = 1e6;
        for xi in [1.0, 0.5] {
            let op = CurvatureOperator::assemble(CurvatureKind::Fisher, &model, &fam, &data, &mut rng)
                .unwrap()
                .damp(lambda)
                .with_exponent(xi);
            let v = DVector::from_fn(model.param_count(), |i, _| ((i as f64) * 0.7).cos());
            let out = op.apply_inverse(&v).unwrap();
            let expect = &v / lambda.powf(xi);
            assert!((&out - &expect).norm() <= 1e-3 * expect.norm());
        }
    }

    #[test]
    fn apply_inverse_scalar_natural_gradient() {
        let (m, fam, data) = scalar_setup(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let op =
            CurvatureOperator::assemble(CurvatureKind::Fisher, &m, &fam, &data, &mut rng).unwrap();
        let out = op.apply_inverse(&dvector![0.9]).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-14);
    }

    #[test]
    fn apply_inverse_singular_errors() {
        let op = CurvatureOperator::new(CurvatureKind::EmpiricalFisher, DMatrix::zeros(2, 2));
        assert!(matches!(op.apply_inverse(&dvector![1.0, 0.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn diag_accumulator_adagrad() {
        let mut acc = DiagAccumulator::new(2, DiagMode::AdaGrad);
        for _ in 0..5 {
            acc.update(&dvector![0.0, 0.0]).unwrap();
        }
        assert_eq!(acc.values(), &dvector![0.0, 0.0]);

        let mut acc = DiagAccumulator::new(1, DiagMode::AdaGrad);
        for _ in 0..7 {
            acc.update(&dvector![3.0]).unwrap();
            assert!((acc.values()[0] - 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diag_accumulator_rms_two_cycle() {
        // Alternating 0/1 gradients settle into the affine map's two-cycle
        // a = ρb, b = ρa + (1−ρ): b = (1−ρ)/(1−ρ²) ≈ 0.5263, a ≈ 0.4737.
        let mut acc = DiagAccumulator::new(1, DiagMode::Rms { decay: 0.9 });
        let mut after_one = 0.0;
        let mut after_zero = 0.0;
        for step in 0..400 {
            let g = if step % 2 == 0 { 1.0 } else { 0.0 };
            acc.update(&dvector![g]).unwrap();
            if step % 2 == 0 {
                after_one = acc.values()[0];
            } else {
                after_zero = acc.values()[0];
            }
        }
        assert!((after_one - 0.1 / 0.19).abs() < 1e-10);
        assert!((after_zero - 0.09 / 0.19).abs() < 1e-10);
    }

    #[test]
    fn kl_residual_zero_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let model = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let fam = PredictiveFamily::softmax(2);
        let data = Dataset::sampled_from_model(&model, &fam, 3, &mut rng).unwrap();
        let d = DVector::zeros(model.param_count());
        assert_eq!(kl_quadratic_residual(&model, &fam, &data, &d).unwrap(), 0.0);
    }

    #[test]
    fn kl_residual_is_cubic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let fam = PredictiveFamily::softmax(2);
        let data = Dataset::sampled_from_model(&model, &fam, 3, &mut rng).unwrap();
        let dir = DVector::from_fn(model.param_count(), |i, _| ((i as f64) + 0.5).sin());
        let dir = &dir / dir.norm();
        let r1 = kl_quadratic_residual(&model, &fam, &data, &(&dir * 1e-2)).unwrap();
        let r2 = kl_quadratic_residual(&model, &fam, &data, &(&dir * 5e-3)).unwrap();
        let order = (r1 / r2).log2();
        assert!((order - 3.0).abs() <= 0.5, "order {order}");
    }

    #[test]
    fn kl_residual_exactly_zero_for_identity_gaussian() {
        // f is linear and the Gaussian KL is quadratic: KL = ½‖d‖² exactly.
        let model = IdentityModel::new(dvector![0.1, -0.2]);
        let fam = PredictiveFamily::gaussian_mean(2, 1.0);
        let data = Dataset::new(vec![(
            DVector::zeros(2),
            Target::Real(DVector::zeros(2)),
        )])
        .unwrap();
        let d = dvector![0.3, 0.4];
        let r = kl_quadratic_residual(&model, &fam, &data, &d).unwrap();
        assert!(r < 1e-15);
    }

    #[test]
    fn quadratic_model_matches_zspace_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for fam in [PredictiveFamily::gaussian_mean(2, 1.0), PredictiveFamily::softmax(2)] {
            let model = MlpModel::random(&[2, 4, 2], &mut rng).unwrap();
            let data = Dataset::sampled_from_model(&model, &fam, 4, &mut rng).unwrap();
            for _ in 0..5 {
                let delta = DVector::from_fn(model.param_count(), |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let direct = quadratic_model_eval(&model, &fam, &data, &delta).unwrap();
                let (sos, c) = zspace_decomposition(&model, &fam, &data, &delta).unwrap();
                assert!(
                    (direct - (sos + c)).abs() <= 1e-9 * direct.abs().max(1.0),
                    "direct {direct} vs decomposed {}",
                    sos + c
                );
            }
        }
    }

    #[test]
    fn zspace_at_zero_is_objective_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let model = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let fam = PredictiveFamily::gaussian_mean(2, 1.0);
        let data = Dataset::sampled_from_model(&model, &fam, 3, &mut rng).unwrap();
        let h = objective(&model, &fam, &data).unwrap();
        let zero = DVector::zeros(model.param_count());
        let direct = quadratic_model_eval(&model, &fam, &data, &zero).unwrap();
        let (sos, c) = zspace_decomposition(&model, &fam, &data, &zero).unwrap();
        assert!((direct - h).abs() < 1e-12);
        assert!((sos + c - h).abs() <= 1e-9 * h.abs().max(1.0));
    }

    #[test]
    fn natural_gradient_step_attains_quadratic_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let model = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let fam = PredictiveFamily::gaussian_mean(2, 1.0);
        let data = Dataset::sampled_from_model(&model, &fam, 4, &mut rng).unwrap();
        let f = fisher_dense(&model, &fam, &data).unwrap();
        let (h, grad) = objective_and_grad(&model, &fam, &data).unwrap();
        let delta = -linalg::lu_solve(&f, &grad, "test").unwrap();
        let m_star = quadratic_model_eval(&model, &fam, &data, &delta).unwrap();
        let expect = -0.5 * grad.dot(&linalg::lu_solve(&f, &grad, "test").unwrap());
        assert!((m_star - h - expect).abs() <= 1e-10 * expect.abs().max(1.0));
    }

    #[test]
    fn improvement_bound_zero_at_fit_and_tight_for_identity_net() {
        // All residuals zero → bound 0.
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let model = MlpModel::random(&[2, 3, 1], &mut rng).unwrap();
        let data = Dataset::noiseless_from_model(&model, 3, &mut rng).unwrap();
        let fam = PredictiveFamily::gaussian_mean(1, 1.0);
        assert!(improvement_bound(&model, &fam, &data).unwrap().abs() < 1e-20);

        // Identity network, one case: the z-change is unconstrained, so the
        // natural-gradient step attains the bound exactly.
        let model = IdentityModel::new(dvector![0.4, -0.9]);
        let fam = PredictiveFamily::gaussian_mean(2, 1.0);
        let data =
            Dataset::new(vec![(DVector::zeros(2), Target::Real(dvector![1.0, 0.5]))]).unwrap();
        let bound = improvement_bound(&model, &fam, &data).unwrap();
        let f = fisher_dense(&model, &fam, &data).unwrap();
        let (h, grad) = objective_and_grad(&model, &fam, &data).unwrap();
        let delta = -linalg::lu_solve(&f, &grad, "test").unwrap();
        let m_star = quadratic_model_eval(&model, &fam, &data, &delta).unwrap();
        assert!((m_star - h - bound).abs() < 1e-12);
    }

    #[test]
    fn improvement_bound_lower_bounds_model_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let model = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let fam = PredictiveFamily::softmax(2);
        let data = Dataset::sampled_from_model(&model, &fam, 4, &mut rng).unwrap();
        let bound = improvement_bound(&model, &fam, &data).unwrap();
        let h = objective(&model, &fam, &data).unwrap();
        for _ in 0..50 {
            let delta = DVector::from_fn(model.param_count(), |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let m = quadratic_model_eval(&model, &fam, &data, &delta).unwrap();
            assert!(m - h >= bound - 1e-12);
        }
    }

    #[test]
    fn matvec_agrees_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let model = MlpModel::random(&[2, 4, 3], &mut rng).unwrap();
        let fam = PredictiveFamily::softmax(3);
        let data = Dataset::sampled_from_model(&model, &fam, 3, &mut rng).unwrap();
        let f = fisher_dense(&model, &fam, &data).unwrap();
        for _ in 0..5 {
            let v = DVector::from_fn(model.param_count(), |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let dense_v = &f * &v;
            let mat_v = fisher_matvec(&model, &fam, &data, &v).unwrap();
            assert!((&dense_v - &mat_v).norm() <= 1e-12 * dense_v.norm().max(1.0));
        }
    }
}
