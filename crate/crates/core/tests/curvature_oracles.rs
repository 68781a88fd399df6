//! Monte-Carlo and statistical oracles for the curvature assemblies.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ngrad_core::curvature::{empirical_fisher_dense, fisher_dense, mc_fisher_dense};
use ngrad_core::linalg;
use ngrad_core::model::{Dataset, IdentityModel, MlpModel, PredictiveFamily, Target};

#[test]
fn mc_fisher_converges_to_exact_fisher_at_root_n_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let model = MlpModel::random(&[2, 3, 3], &mut rng).unwrap();
    let family = PredictiveFamily::softmax(3);
    let data = Dataset::sampled_from_model(&model, &family, 3, &mut rng).unwrap();
    let exact = fisher_dense(&model, &family, &data).unwrap();

    let mut errs = Vec::new();
    for &n in &[100usize, 10_000, 1_000_000] {
        let mc = mc_fisher_dense(&model, &family, &data, n, &mut rng).unwrap();
        errs.push(linalg::rel_err(&mc, &exact));
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "errors not decreasing: {errs:?}");
    let slope = (errs[2] / errs[0]).ln() / (1_000_000f64 / 100.0).ln();
    assert!((slope + 0.5).abs() <= 0.2, "slope {slope}");

    // At N = 10⁵ the relative error sits at the 1/√N scale.
    let mc = mc_fisher_dense(&model, &family, &data, 100_000, &mut rng).unwrap();
    let rel = linalg::rel_err(&mc, &exact);
    assert!(rel <= 5.0 / (100_000f64).sqrt(), "rel err {rel}");
}

#[test]
fn empirical_fisher_does_not_converge_to_fisher() {
    // Non-realizable scalar instance: F̄ = θ² stays away from F = 1 no
    // matter how much data the average sees.
    let model = IdentityModel::new(DVector::from_vec(vec![2.0]));
    let family = PredictiveFamily::gaussian_mean(1, 1.0);
    let cases: Vec<_> = (0..500)
        .map(|_| (DVector::zeros(1), Target::Real(DVector::zeros(1))))
        .collect();
    let data = Dataset::new(cases).unwrap();
    let f = fisher_dense(&model, &family, &data).unwrap();
    let fbar = empirical_fisher_dense(&model, &family, &data).unwrap();
    assert!((fbar - &f).norm() > 0.1 * f.norm());
}
