//! The acceptance checks, runnable as named suites.
//!
//! Every check pins its tolerances here; nothing is deferred to later
//! calibration. Each criterion returns a [`CheckResult`] whose detail
//! carries the measured quantities, so a failing line documents exactly
//! what was observed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::curvature::{self, CurvatureKind};
use crate::error::{Error, Result};
use crate::harness::{self, CheckResult};
use crate::invariance::{self, Reparameterization};
use crate::linalg;
use crate::model::{
    objective, objective_and_grad, Dataset, IdentityModel, MlpModel, Model, PredictiveFamily,
    Target,
};
use crate::optim::LrSchedule;
use crate::theory::{self, IterationSpec, QuadraticProblem};

/// Seeded SPD matrix with eigenvalues uniform in `[lo, hi]` and a random
/// orthogonal eigenbasis.
pub fn random_spd<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> DMatrix<f64> {
    let q = harness::random_orthogonal(n, rng);
    let eigs = DVector::from_fn(n, |_, _| lo + (hi - lo) * rng.random::<f64>());
    &q * DMatrix::from_diagonal(&eigs) * q.transpose()
}

fn random_vector<R: Rng>(n: usize, scale: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

// ---------------------------------------------------------------------------
// Criterion 1 — Fisher ≡ GGN
// ---------------------------------------------------------------------------

pub fn criterion_01_fisher_ggn() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let shapes: [&[usize]; 4] = [&[4, 7, 3], &[3, 8, 4], &[5, 9, 3], &[2, 6, 6, 3]];
    let mut worst = 0.0f64;
    for i in 0..50 {
        let dims = shapes[i % shapes.len()];
        let model = MlpModel::random(dims, &mut rng)?;
        assert!(model.param_count() <= 100);
        let m = *dims.last().unwrap();
        let family = if i % 2 == 0 {
            PredictiveFamily::gaussian_mean(m, 1.0 + 0.1 * (i % 5) as f64)
        } else {
            PredictiveFamily::softmax(m)
        };
        let data = Dataset::sampled_from_model(&model, &family, 4, &mut rng)?;
        let f = curvature::fisher_dense(&model, &family, &data)?;
        let g = curvature::ggn_dense(&model, &family, &data)?;
        worst = worst.max(linalg::rel_err(&f, &g));
    }
    Ok(CheckResult::new(
        "criterion 1: Fisher ≡ GGN on 50 random nets",
        worst <= 1e-10,
        format!("max ‖F−G‖_F/‖F‖_F = {worst:.3e} (tolerance 1e-10)"),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 2 — the 1-d counterexample
// ---------------------------------------------------------------------------

pub fn criterion_02_counterexample() -> Result<CheckResult> {
    let mut ok = true;
    let mut detail = String::new();
    let mut worst_rel = 0.0f64;
    for alpha in [0.1, 0.5, 1.5] {
        let rep = harness::run_counterexample(1.0, alpha, 1.0, 10_000);
        worst_rel = worst_rel.max(rep.fisher_max_rel_err);
        ok &= rep.fisher_linear_ok;
    }
    detail.push_str(&format!("F-run max rel err {worst_rel:.3e} (tol 1e-12); "));

    let mut min_over_grid = f64::INFINITY;
    for theta0 in [0.7, 1.0, 1.5] {
        for alpha in [0.3, 0.5, 0.7] {
            let rep = harness::run_counterexample(theta0, alpha, 1.0, 10_000);
            min_over_grid = min_over_grid.min(rep.empfisher_min_abs);
            ok &= rep.empfisher_stalls;
        }
    }
    detail.push_str(&format!("F̄-run min |θ| over 9-point grid = {min_over_grid:.3e} (floor 1e-6)"));
    Ok(CheckResult::new("criterion 2: scalar counterexample", ok, detail))
}

// ---------------------------------------------------------------------------
// Criterion 3 — stationary-variance trace identities
// ---------------------------------------------------------------------------

pub fn criterion_03_stationary_traces() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst_h = 0.0f64;
    let mut worst_b = 0.0f64;
    let mut worst_res = 0.0f64;
    for i in 0..100 {
        let n = 2 + i % 19; // 2..=20
        let h = random_spd(n, 0.3, 3.0, &mut rng);
        let b = random_spd(n, 0.4, 2.5, &mut rng);
        let sigma = random_spd(n, 0.05, 2.0, &mut rng);
        let alpha = 0.05 + 0.001 * (i as f64);
        let problem =
            QuadraticProblem::new(h.clone(), DVector::zeros(n), sigma.clone(), random_vector(n, 1.0, &mut rng))?;
        let spec = IterationSpec::new(b.clone(), LrSchedule::Constant(alpha))?;
        let v_inf = theory::stationary_variance(&problem, &spec)?;

        let b_inv = spec.precond_inv()?;
        let a = &b_inv * &h;
        let rhs = &b_inv * &sigma * &b_inv * alpha;
        let residual = (&a * &v_inf + &v_inf * a.transpose() - &rhs).norm() / rhs.norm();
        worst_res = worst_res.max(residual);

        let tr_h = (&h * &v_inf).trace();
        let expect_h = 0.5 * alpha * (&b_inv * &sigma).trace();
        worst_h = worst_h.max((tr_h - expect_h).abs() / expect_h.abs());

        let tr_b = (&b * &v_inf).trace();
        // tr(BV_∞) = (α/2)tr(H*⁻¹Σ_g): applying the trace lemma to the
        // A = −H*⁻¹, P = BV_∞, Q = αH*⁻¹Σ_gH*⁻¹ rearrangement gives
        // −½tr(A⁻¹Q) = (α/2)tr(H*⁻¹Σ_g); the α·tr(H*⁻¹Σ_g) constant
        // sometimes quoted for this identity is off by the lemma's ½.
        let expect_b = 0.5 * alpha * linalg::lu_solve_mat(&h, &sigma, "H⁻¹Σ")?.trace();
        worst_b = worst_b.max((tr_b - expect_b).abs() / expect_b.abs());
    }
    let ok = worst_h <= 1e-10 && worst_b <= 1e-10 && worst_res <= 1e-12;
    Ok(CheckResult::new(
        "criterion 3: tr(H*V_∞) and tr(BV_∞) identities on 100 SPD instances",
        ok,
        format!(
            "max rel err tr(H*V_∞) = (α/2)tr(B⁻¹Σ): {worst_h:.3e}, tr(BV_∞) = (α/2)tr(H*⁻¹Σ): \
             {worst_b:.3e} (tol 1e-10); max Lyapunov residual {worst_res:.3e} (tol 1e-12)"
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 4 — constant-rate bounds bracket the closed-form loss
// ---------------------------------------------------------------------------

pub fn criterion_04_constant_bounds() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let ks: Vec<usize> = (0..=1000).collect();
    let mut ok = true;
    let mut worst_gap = 0.0f64; // most negative slack observed
    for i in 0..50 {
        let n = 2 + i % 7; // 2..=8
        let h = random_spd(n, 0.3, 2.5, &mut rng);
        let b = random_spd(n, 0.4, 2.0, &mut rng);
        let sigma = random_spd(n, 0.05, 1.5, &mut rng);
        let problem =
            QuadraticProblem::new(h, DVector::zeros(n), sigma, random_vector(n, 1.5, &mut rng))?;
        let spec_probe = IterationSpec::new(b.clone(), LrSchedule::Constant(1.0))?;
        let l1 = theory::preconditioned_eigs(&problem, &spec_probe)?[0];
        let alpha = 0.95 / (2.0 * l1);
        let spec = IterationSpec::new(b, LrSchedule::Constant(alpha))?;

        let closed = theory::loss_closed_form_grid(&problem, &spec, &ks)?;
        for (idx, &k) in ks.iter().enumerate() {
            let (lower, upper) = theory::loss_bounds_constant(&problem, &spec, k)?;
            let slack = 1e-9 * (upper.abs() + 1.0);
            let v = closed.seeded[idx];
            let v0 = closed.zero_start[idx];
            if v < lower - slack || v > upper + slack || v0 > upper + slack {
                ok = false;
            }
            worst_gap = worst_gap.max(lower - v).max(v - upper).max(v0 - upper);
        }
    }
    Ok(CheckResult::new(
        "criterion 4: L(k) ≤ closed-form value ≤ U(k), exact ≤ U(k), k ≤ 10³, 50 instances",
        ok,
        format!("worst bracket violation {worst_gap:.3e} (roundoff slack 1e-9)"),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 5 — annealed B = H* predictions
// ---------------------------------------------------------------------------

fn annealed_b_hstar_sweep(problem: &QuadraticProblem) -> Result<(usize, f64, f64, f64)> {
    // Returns (first k violating the 5T/k window or 0, max |k·loss − T/2|·k/T,
    // max over [1e3,1e4] of residual·k²/T against the two-term prediction,
    // tr(H*⁻¹Σ_g)).
    let spec = IterationSpec::new(problem.hessian().clone(), LrSchedule::Annealed)?;
    let t = linalg::lu_solve_mat(problem.hessian(), problem.noise_cov(), "H⁻¹Σ")?.trace();
    let ks: Vec<usize> = (1..=100_000).collect();
    let losses = theory::loss_exact_grid(problem, &spec, &ks)?;
    let mut first_violation = 0usize;
    let mut max_scaled = 0.0f64;
    let mut max_two_term_ratio = 0.0f64;
    for (idx, &k) in ks.iter().enumerate() {
        let kf = k as f64;
        let dev = (kf * losses[idx] - 0.5 * t).abs();
        max_scaled = max_scaled.max(dev * kf / t);
        if dev > 5.0 * t / kf && first_violation == 0 {
            first_violation = k;
        }
        if (1000..=10_000).contains(&k) {
            let two_term = (0.5 / kf - 1.0 / (6.0 * kf * kf)) * t;
            max_two_term_ratio = max_two_term_ratio.max((losses[idx] - two_term).abs() * kf * kf / t);
        }
    }
    Ok((first_violation, max_scaled, max_two_term_ratio, t))
}

pub fn criterion_05_annealed() -> Result<CheckResult> {
    // 1-d realizable case.
    let p1 = QuadraticProblem::realizable(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DVector::from_element(1, 1.0),
    )?;
    let (viol1, max1, ratio1, _) = annealed_b_hstar_sweep(&p1)?;

    // n = 5 numeric case.
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let h = random_spd(5, 0.5, 2.0, &mut rng);
    let p5 = QuadraticProblem::realizable(h, DVector::zeros(5), random_vector(5, 1.0, &mut rng))?;
    let (viol5, max5, ratio5, _) = annealed_b_hstar_sweep(&p5)?;

    let clause1 = viol1 == 0 && viol5 == 0;
    // With B = H* the iterate is a running sample mean, so the exact loss
    // is T/(2k) and the residual against the two-term prediction is
    // exactly T/(6k²); the pinned ratio cap of 6 leaves wide margin.
    let clause2 = ratio1 <= 6.0 && ratio5 <= 6.0;
    Ok(CheckResult::new(
        "criterion 5: annealed B=H*: |k·loss − ½tr| ≤ 5tr/k up to k=10⁵; two-term residual",
        clause1 && clause2,
        format!(
            "1-d: first 5T/k violation at k={viol1} (0 = none), max |k·loss−T/2|·k/T = {max1:.3e}; \
             n=5: first violation at k={viol5}, max {max5:.3e}; \
             two-term residual·k²/T over [10³,10⁴]: {ratio1:.3} and {ratio5:.3} (pinned ≤ 6)",
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 6 — Fisher efficiency at desk scale
// ---------------------------------------------------------------------------

pub fn criterion_06_fisher_efficiency(threads: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let n = 10;
    let h = random_spd(n, 0.5, 2.0, &mut rng);
    let problem = QuadraticProblem::realizable(h.clone(), DVector::zeros(n), random_vector(n, 1.0, &mut rng))?;
    let spec = IterationSpec::new(h, LrSchedule::Annealed)?;
    let ks = harness::log_grid(1000);
    let sim = harness::simulate(
        &problem,
        &spec,
        &crate::optim::AveragingMode::None,
        10_000,
        &ks,
        106,
        threads,
    )?;
    let idx = ks.iter().position(|&k| k == 1000).unwrap();
    let k = 1000.0;
    let scaled_mean = k * sim.mc_mean[idx];
    let scaled_stderr = k * sim.mc_stderr[idx];
    let target = n as f64 / 2.0;
    let ok = (scaled_mean - target).abs() <= 3.0 * scaled_stderr;
    Ok(CheckResult::new(
        "criterion 6: Fisher efficiency — k·E[h(θ_k)] → n/2 (realizable, B=H*, annealed)",
        ok,
        format!(
            "k·mc_mean = {scaled_mean:.4} vs n/2 = {target}, 3·stderr = {:.4}",
            3.0 * scaled_stderr
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 7 — averaging: exact curve matches MC and obeys the bound
// ---------------------------------------------------------------------------

pub fn criterion_07_averaging(threads: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let ks = harness::log_grid(512);
    let mut checked = 0usize;
    let mut within3 = 0usize;
    let mut worst_sigma = 0.0f64;
    let mut bound_ok = true;
    for i in 0..5 {
        let n = 4;
        let h = random_spd(n, 0.4, 2.0, &mut rng);
        let sigma = random_spd(n, 0.1, 1.5, &mut rng);
        let problem =
            QuadraticProblem::new(h.clone(), DVector::zeros(n), sigma, random_vector(n, 1.5, &mut rng))?;
        for b in [h.clone(), DMatrix::identity(n, n)] {
            let probe = IterationSpec::new(b.clone(), LrSchedule::Constant(1.0))?;
            let l1 = theory::preconditioned_eigs(&problem, &probe)?[0];
            let alpha = 0.9 / (2.0 * l1);
            let spec = IterationSpec::new(b.clone(), LrSchedule::Constant(alpha))?;
            let exact = theory::averaged_loss_exact_grid(&problem, &spec, &ks)?;
            let sim = harness::simulate(
                &problem,
                &spec,
                &crate::optim::AveragingMode::Uniform,
                10_000,
                &ks,
                1070 + i as u64,
                threads,
            )?;
            for (idx, &k) in ks.iter().enumerate() {
                let stderr = sim.averaged_stderr[idx];
                if stderr > 0.0 {
                    checked += 1;
                    let z = (sim.averaged_mean[idx] - exact[idx]).abs() / stderr;
                    worst_sigma = worst_sigma.max(z);
                    if z <= 3.0 {
                        within3 += 1;
                    }
                }
                let bound = theory::averaging_bound(&problem, &spec, k)?;
                if exact[idx] > bound * (1.0 + 1e-9) {
                    bound_ok = false;
                }
            }
        }
    }
    let coverage = within3 as f64 / checked as f64;
    let ok = coverage >= 0.95 && worst_sigma <= 6.0 && bound_ok;
    Ok(CheckResult::new(
        "criterion 7: averaged exact curve matches MC and sits under the averaging bound",
        ok,
        format!(
            "{within3}/{checked} logged k within 3σ (need ≥95%), worst deviation {worst_sigma:.2}σ \
             (hard cap 6σ); exact ≤ bound everywhere: {bound_ok}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 8 — spectrum-consequence coefficient comparison
// ---------------------------------------------------------------------------

pub fn criterion_08_consequences() -> Result<CheckResult> {
    let n = 10;
    let diag = DVector::from_fn(n, |i, _| (n - i) as f64);
    let problem = QuadraticProblem::realizable(
        DMatrix::from_diagonal(&diag),
        DVector::zeros(n),
        DVector::from_element(n, 1.0),
    )?;
    let rep = theory::consequence_terms(&problem)?;
    let ratio = rep.term_b_lambda_n / rep.term_b_hstar;
    let factor_ok = ratio >= 10.0;
    let brackets_ok = rep.bracket_lo <= rep.bracket_mid + 1e-12
        && rep.bracket_mid <= rep.term_b_lambda_n + 1e-12
        && rep.term_b_lambda_n <= rep.bracket_hi + 1e-12;
    Ok(CheckResult::new(
        "criterion 8: first-order vs second-order noise coefficients on λ_i = n−i+1",
        factor_ok && brackets_ok,
        format!(
            "B=λ_nI term = {:.4}, B=H* term = {:.1}, ratio = {ratio:.3} (criterion demands ≥ 10, \
             but the ½Σr_i bracket caps it at {:.2} for this spectrum); brackets κ/4 ≤ ¼Σr_i ≤ \
             term ≤ ½Σr_i hold: {brackets_ok}",
            rep.term_b_lambda_n,
            rep.term_b_hstar,
            rep.bracket_hi / rep.term_b_hstar,
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 9 — invariance
// ---------------------------------------------------------------------------

pub fn criterion_09_invariance() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut worst_condition = 0.0f64;
    // 20 (net, reparam) instances × three congruence-class kinds.
    for i in 0..10 {
        let (model, family) = if i % 2 == 0 {
            let m = MlpModel::random(&[2, 3, 2], &mut rng)?;
            (m, PredictiveFamily::gaussian_mean(2, 1.0))
        } else {
            let m = MlpModel::random(&[2, 4, 3], &mut rng)?;
            (m, PredictiveFamily::softmax(3))
        };
        let n = model.param_count();
        let data = Dataset::sampled_from_model(&model, &family, 2 * n, &mut rng)?;
        for reparam in [
            Reparameterization::random_affine(n, &mut rng),
            Reparameterization::cubic(n),
        ] {
            let gamma = reparam.invert(&model.params())?;
            for kind in [CurvatureKind::Fisher, CurvatureKind::Ggn, CurvatureKind::EmpiricalFisher]
            {
                let r = invariance::condition_residual(&model, &family, &data, &reparam, &gamma, kind)?;
                worst_condition = worst_condition.max(r);
            }
        }
    }
    let condition_ok = worst_condition <= 1e-10;

    // Hessian: fails generically under cubic, passes under affine.
    let mut hessian_generic_min = f64::INFINITY;
    let mut hessian_affine_max = 0.0f64;
    for _ in 0..5 {
        let model = MlpModel::random(&[2, 3, 2], &mut rng)?;
        let family = PredictiveFamily::gaussian_mean(2, 1.0);
        let n = model.param_count();
        let data = Dataset::sampled_from_model(&model, &family, 2 * n, &mut rng)?;
        let cubic = Reparameterization::cubic(n);
        let gamma = cubic.invert(&model.params())?;
        hessian_generic_min = hessian_generic_min.min(invariance::condition_residual(
            &model, &family, &data, &cubic, &gamma, CurvatureKind::Hessian,
        )?);
        let affine = Reparameterization::random_affine(n, &mut rng);
        let gamma = affine.invert(&model.params())?;
        hessian_affine_max = hessian_affine_max.max(invariance::condition_residual(
            &model, &family, &data, &affine, &gamma, CurvatureKind::Hessian,
        )?);
    }
    let hessian_ok = hessian_generic_min > 1e-3 && hessian_affine_max <= 1e-8;

    // Affine trajectory equivalence over 50 steps. The exact solves need a
    // well-conditioned Fisher, so these run on linear nets (a tanh net's
    // Fisher can be near-singular along flat directions).
    let mut trajectory_max = 0.0f64;
    for round in 0..3u64 {
        let (model, family, data) = linear_invariance_setup(190 + round, &mut rng)?;
        let n = model.param_count();
        let affine = Reparameterization::random_affine(n, &mut rng);
        let cmp = invariance::trajectory_compare(
            &model, &family, &data, &affine, CurvatureKind::Fisher, 0.2, 50,
        )?;
        trajectory_max = trajectory_max.max(cmp.max_deviation);
    }
    let trajectory_ok = trajectory_max <= 1e-8;

    // Cubic step error scales as α².
    let (model, family, data) = linear_invariance_setup(195, &mut rng)?;
    let n = model.param_count();
    let cubic = Reparameterization::cubic(n);
    let gamma = cubic.invert(&model.params())?;
    let alphas = [0.0025, 0.005, 0.01, 0.02, 0.04];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &alpha in &alphas {
        let (err, _) = invariance::step_equivalence_error(
            &model, &family, &data, &cubic, &gamma, CurvatureKind::Fisher, alpha,
        )?;
        xs.push(alpha.ln());
        ys.push(err.ln());
    }
    let slope = least_squares_slope(&xs, &ys);
    let slope_ok = (slope - 2.0).abs() <= 0.2;

    Ok(CheckResult::new(
        "criterion 9: reparameterization invariance",
        condition_ok && hessian_ok && trajectory_ok && slope_ok,
        format!(
            "congruence-class residual max {worst_condition:.3e} (tol 1e-10); Hessian cubic \
             residual min {hessian_generic_min:.3e} (> 1e-3) and affine max {hessian_affine_max:.3e} \
             (≤ 1e-8); affine trajectory deviation max {trajectory_max:.3e} (≤ 1e-8); cubic \
             step-error slope {slope:.3} (2.0 ± 0.2)"
        ),
    ))
}

fn linear_invariance_setup(
    phase: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(MlpModel, PredictiveFamily, Dataset)> {
    let mut model = MlpModel::zeros(&[3, 2], &[crate::model::Activation::Identity])?;
    let n = model.param_count();
    let init = DVector::from_fn(n, |i, _| 0.4 * ((i as f64) + phase as f64 * 0.31).sin());
    model.set_params(&init)?;
    let family = PredictiveFamily::gaussian_mean(2, 1.0);
    let data = Dataset::sampled_from_model(&model, &family, 3 * n, rng)?;
    Ok((model, family, data))
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

// ---------------------------------------------------------------------------
// Criterion 10 — the quadratic-model decomposition
// ---------------------------------------------------------------------------

pub fn criterion_10_zspace() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut worst_rel = 0.0f64;
    let mut bound_ok = true;
    for i in 0..50 {
        let (model, family) = if i % 2 == 0 {
            let m = MlpModel::random(&[2, 4, 2], &mut rng)?;
            (m, PredictiveFamily::gaussian_mean(2, 1.0))
        } else {
            let m = MlpModel::random(&[2, 4, 3], &mut rng)?;
            (m, PredictiveFamily::softmax(3))
        };
        let data = Dataset::sampled_from_model(&model, &family, 4, &mut rng)?;
        let h = objective(&model, &family, &data)?;
        let bound = curvature::improvement_bound(&model, &family, &data)?;
        for _ in 0..2 {
            let delta = random_vector(model.param_count(), 1.0, &mut rng);
            let direct = curvature::quadratic_model_eval(&model, &family, &data, &delta)?;
            let (sos, c) = curvature::zspace_decomposition(&model, &family, &data, &delta)?;
            worst_rel = worst_rel.max((direct - (sos + c)).abs() / direct.abs().max(1.0));
            if direct - h < bound - 1e-9 {
                bound_ok = false;
            }
        }
    }

    // Equality at the natural-gradient step for an identity network.
    let model = IdentityModel::new(DVector::from_vec(vec![0.4, -0.9]));
    let family = PredictiveFamily::gaussian_mean(2, 1.0);
    let data = Dataset::new(vec![(
        DVector::zeros(2),
        Target::Real(DVector::from_vec(vec![1.0, 0.5])),
    )])?;
    let f = curvature::fisher_dense(&model, &family, &data)?;
    let (h, grad) = objective_and_grad(&model, &family, &data)?;
    let delta = -linalg::lu_solve(&f, &grad, "natural gradient")?;
    let m_star = curvature::quadratic_model_eval(&model, &family, &data, &delta)?;
    let bound = curvature::improvement_bound(&model, &family, &data)?;
    let equality = (m_star - h - bound).abs() <= 1e-12;

    let ok = worst_rel <= 1e-9 && bound_ok && equality;
    Ok(CheckResult::new(
        "criterion 10: quadratic model = z-space sum of squares; improvement bound",
        ok,
        format!(
            "max decomposition rel err {worst_rel:.3e} (tol 1e-9); bound below M(δ)−h: {bound_ok}; \
             equality at δ* for the identity network: {equality}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 11 — CALE trace bounds
// ---------------------------------------------------------------------------

pub fn criterion_11_trace_bounds() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut bracket_ok = true;
    let mut worst_res = 0.0f64;
    for i in 0..100 {
        let n = 2 + i % 5;
        let sym = random_spd(n, 0.3, 2.5, &mut rng);
        let skew_seed = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let skew = (&skew_seed - skew_seed.transpose()) * 0.3;
        let a = -(sym) + skew;
        if !a.clone().lu().is_invertible() {
            continue;
        }
        let q = random_spd(n, 0.1, 2.0, &mut rng);
        // Solve AᵀP + PA + Q = 0 through the vectorized system.
        let p = linalg::solve_shifted_lyapunov(&a.transpose(), 0.0, &(-&q), "CALE")?;
        worst_res = worst_res.max(
            (a.transpose() * &p + &p * &a + &q).norm() / q.norm(),
        );
        let tr = p.trace();
        let b = theory::trace_bounds(&a, &q)?;
        let slack = 1e-10 * tr.abs().max(1.0);
        if tr < b.wang_lo - slack
            || tr > b.wang_hi + slack
            || tr < b.komaroff_lo - slack
            || tr > b.komaroff_hi + slack
        {
            bracket_ok = false;
        }
    }

    // Komaroff upper is tight on diagonal instances with oppositely sorted
    // spectra.
    let mut tight_ok = true;
    let mut worst_tight = 0.0f64;
    for _ in 0..20 {
        let n = 2 + (rng.random::<f64>() * 4.0) as usize;
        let mut a_diag: Vec<f64> = (0..n).map(|_| 0.3 + 2.0 * rng.random::<f64>()).collect();
        a_diag.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut q_diag: Vec<f64> = (0..n).map(|_| 0.2 + 2.0 * rng.random::<f64>()).collect();
        q_diag.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let a = -DMatrix::from_diagonal(&DVector::from_vec(a_diag.clone()));
        let q = DMatrix::from_diagonal(&DVector::from_vec(q_diag.clone()));
        let exact: f64 = q_diag.iter().zip(&a_diag).map(|(qq, aa)| qq / (2.0 * aa)).sum();
        let b = theory::trace_bounds(&a, &q)?;
        let err = (b.komaroff_hi - exact).abs();
        worst_tight = worst_tight.max(err);
        if err > 1e-12 * exact.max(1.0) {
            tight_ok = false;
        }
    }
    let ok = bracket_ok && tight_ok && worst_res <= 1e-12;
    Ok(CheckResult::new(
        "criterion 11: Wang/Komaroff bounds bracket the solved CALE trace",
        ok,
        format!(
            "brackets hold on 100 negative-stable instances: {bracket_ok} (solver residual max \
             {worst_res:.3e}); Komaroff upper tight on diagonal instances to {worst_tight:.3e}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 12 — determinism across thread counts
// ---------------------------------------------------------------------------

pub fn criterion_12_determinism() -> Result<CheckResult> {
    let mut config = harness::ExperimentConfig::from_toml(
        r#"
kind = "simulate"
seed = 7
trials = 256
horizon = 64

[problem]
dim = 4
spectrum = { kind = "linear" }
sigma = { kind = "isotropic", scale = 1.0 }
theta0 = { kind = "ones", scale = 1.0 }

[iteration]
b = { kind = "identity", scale = 1.0 }
schedule = { kind = "constant", alpha = 0.05 }
averaging = { kind = "uniform" }
"#,
    )?;
    config.threads = 1;
    let one = harness::run_monte_carlo(&config)?.csv();
    config.threads = 8;
    let eight = harness::run_monte_carlo(&config)?.csv();
    let ok = one == eight;
    Ok(CheckResult::new(
        "criterion 12: identical CSV bytes at 1 and 8 threads",
        ok,
        format!("byte-identical: {ok} ({} bytes)", one.len()),
    ))
}

/// Produce the invariance report rows: every curvature kind under both
/// reparameterization families on one seeded net. Step and trajectory
/// columns are filled only for the congruence-class kinds; the Hessian's
/// failure shows up in its condition residual.
pub fn invariance_report(seed: u64) -> Result<Vec<invariance::InvarianceRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, family, data) = linear_invariance_setup(seed, &mut rng)?;
    let n = model.param_count();
    let mut rows = Vec::new();
    for reparam in [
        Reparameterization::random_affine(n, &mut rng),
        Reparameterization::cubic(n),
    ] {
        let gamma = reparam.invert(&model.params())?;
        for kind in [
            CurvatureKind::Fisher,
            CurvatureKind::Ggn,
            CurvatureKind::EmpiricalFisher,
            CurvatureKind::Hessian,
        ] {
            let residual =
                invariance::condition_residual(&model, &family, &data, &reparam, &gamma, kind)?;
            let (step_error, taylor_bound, trajectory) = if kind == CurvatureKind::Hessian {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                let (e, b) = invariance::step_equivalence_error(
                    &model, &family, &data, &reparam, &gamma, kind, 0.05,
                )?;
                let cmp = invariance::trajectory_compare(
                    &model, &family, &data, &reparam, kind, 0.05, 50,
                )?;
                (e, b, cmp.max_deviation)
            };
            rows.push(invariance::InvarianceRecord {
                reparam: reparam.name().to_string(),
                kind: format!("{kind:?}"),
                condition_residual: residual,
                step_error,
                taylor_bound,
                trajectory_deviation: trajectory,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

/// Run the named suite (`all`, `curvature`, `theory`, or `invariance`).
pub fn run_suite(name: &str, threads: usize) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let curvature = matches!(name, "all" | "curvature");
    let theory_suite = matches!(name, "all" | "theory");
    let invariance_suite = matches!(name, "all" | "invariance");
    if !(curvature || theory_suite || invariance_suite) {
        return Err(Error::Config(format!(
            "unknown suite {name:?}; expected all|curvature|theory|invariance"
        )));
    }
    if curvature {
        results.push(criterion_01_fisher_ggn()?);
        results.push(criterion_02_counterexample()?);
        results.push(criterion_10_zspace()?);
    }
    if theory_suite {
        results.push(criterion_03_stationary_traces()?);
        results.push(criterion_04_constant_bounds()?);
        results.push(criterion_05_annealed()?);
        results.push(criterion_06_fisher_efficiency(threads)?);
        results.push(criterion_07_averaging(threads)?);
        results.push(criterion_08_consequences()?);
        results.push(criterion_11_trace_bounds()?);
        results.push(criterion_12_determinism()?);
    }
    if invariance_suite {
        results.push(criterion_09_invariance()?);
    }
    Ok(results)
}
