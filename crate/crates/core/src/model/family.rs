//! Exponential-family predictive distributions over model outputs.
//!
//! Both built-in families are exponential families in the natural
//! parameters `z`, so the log-density Hessian `H_{log r}` does not depend
//! on the target; this forces `F_R = H_L = −H_{log r}`, which is what makes
//! the Fisher coincide with the generalized Gauss-Newton matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A target value: a real vector for the Gaussian family, a class index for
/// the softmax family.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Real(DVector<f64>),
    Class(usize),
}

/// Predictive output distribution `R_{y|z}`.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveFamily {
    /// `N(z, σ²I)` with fixed variance. `σ² = 0` is allowed as a degenerate
    /// sampling limit (`y = z`) but has no Fisher.
    GaussianMean { dim: usize, variance: f64 },
    /// Multinomial over `classes` outcomes with probabilities `softmax(z)`.
    MultinomialSoftmax { classes: usize },
}

impl PredictiveFamily {
    pub fn gaussian_mean(dim: usize, variance: f64) -> Self {
        PredictiveFamily::GaussianMean { dim, variance }
    }

    pub fn softmax(classes: usize) -> Self {
        PredictiveFamily::MultinomialSoftmax { classes }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            PredictiveFamily::GaussianMean { dim, .. } => dim,
            PredictiveFamily::MultinomialSoftmax { classes } => classes,
        }
    }

    fn check_z(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.output_dim() {
            return Err(Error::dim("family natural parameters", self.output_dim(), z.len()));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("family natural parameters"));
        }
        Ok(())
    }

    fn check_target(&self, y: &Target) -> Result<()> {
        match (self, y) {
            (PredictiveFamily::GaussianMean { dim, .. }, Target::Real(v)) => {
                if v.len() != *dim {
                    return Err(Error::dim("gaussian target", *dim, v.len()));
                }
                Ok(())
            }
            (PredictiveFamily::MultinomialSoftmax { classes }, Target::Class(c)) => {
                if *c >= *classes {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} out of range for {classes} classes"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::InvalidArgument("target kind does not match family".into())),
        }
    }

    fn positive_variance(&self) -> Result<f64> {
        match *self {
            PredictiveFamily::GaussianMean { variance, .. } if variance > 0.0 => Ok(variance),
            PredictiveFamily::GaussianMean { .. } => Err(Error::InvalidArgument(
                "gaussian family with σ² = 0 has no density".into(),
            )),
            _ => unreachable!("positive_variance is only called on the gaussian family"),
        }
    }

    /// `log r(y|z)`.
    pub fn log_density(&self, z: &DVector<f64>, y: &Target) -> Result<f64> {
        self.check_z(z)?;
        self.check_target(y)?;
        match (self, y) {
            (PredictiveFamily::GaussianMean { dim, .. }, Target::Real(yv)) => {
                let var = self.positive_variance()?;
                let resid = yv - z;
                Ok(-0.5 * resid.norm_squared() / var
                    - 0.5 * (*dim as f64) * (2.0 * std::f64::consts::PI * var).ln())
            }
            (PredictiveFamily::MultinomialSoftmax { .. }, Target::Class(c)) => {
                Ok(z[*c] - log_sum_exp(z))
            }
            _ => unreachable!(),
        }
    }

    /// `∇_z log r(y|z)`.
    pub fn grad_log_density(&self, z: &DVector<f64>, y: &Target) -> Result<DVector<f64>> {
        self.check_z(z)?;
        self.check_target(y)?;
        match (self, y) {
            (PredictiveFamily::GaussianMean { .. }, Target::Real(yv)) => {
                let var = self.positive_variance()?;
                Ok((yv - z) / var)
            }
            (PredictiveFamily::MultinomialSoftmax { .. }, Target::Class(c)) => {
                let mut g = -softmax(z);
                g[*c] += 1.0;
                Ok(g)
            }
            _ => unreachable!(),
        }
    }

    /// Fisher information `F_R` of the predictive distribution at `z`.
    pub fn fisher(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_z(z)?;
        match *self {
            PredictiveFamily::GaussianMean { dim, .. } => {
                let var = self.positive_variance()?;
                Ok(DMatrix::identity(dim, dim) / var)
            }
            PredictiveFamily::MultinomialSoftmax { classes } => {
                let p = softmax(z);
                let mut f = DMatrix::from_diagonal(&p);
                for i in 0..classes {
                    for j in 0..classes {
                        f[(i, j)] -= p[i] * p[j];
                    }
                }
                Ok(f)
            }
        }
    }

    /// Hessian `H_L` of the loss `L(y, z) = −log r(y|z)` with respect to `z`.
    ///
    /// For exponential families in natural parameters this is independent of
    /// `y` and equals [`PredictiveFamily::fisher`] exactly.
    pub fn loss_hessian(&self, z: &DVector<f64>, y: &Target) -> Result<DMatrix<f64>> {
        self.check_target(y)?;
        self.fisher(z)
    }

    /// Draw `y ~ R_{y|z}`.
    pub fn sample<R: Rng>(&self, z: &DVector<f64>, rng: &mut R) -> Result<Target> {
        self.check_z(z)?;
        match *self {
            PredictiveFamily::GaussianMean { variance, .. } => {
                let sd = variance.sqrt();
                Ok(Target::Real(
                    z.map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)),
                ))
            }
            PredictiveFamily::MultinomialSoftmax { classes } => {
                let p = softmax(z);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for c in 0..classes {
                    acc += p[c];
                    if u < acc {
                        return Ok(Target::Class(c));
                    }
                }
                Ok(Target::Class(classes - 1))
            }
        }
    }

    /// `KL(R_{y|z_a} ‖ R_{y|z_b})` in closed form.
    pub fn kl(&self, z_a: &DVector<f64>, z_b: &DVector<f64>) -> Result<f64> {
        self.check_z(z_a)?;
        self.check_z(z_b)?;
        match *self {
            PredictiveFamily::GaussianMean { .. } => {
                let var = self.positive_variance()?;
                Ok((z_a - z_b).norm_squared() / (2.0 * var))
            }
            PredictiveFamily::MultinomialSoftmax { .. } => {
                let (la, lb) = (log_softmax(z_a), log_softmax(z_b));
                let mut kl = 0.0;
                for i in 0..z_a.len() {
                    kl += la[i].exp() * (la[i] - lb[i]);
                }
                Ok(kl.max(0.0))
            }
        }
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = z.map(|v| (v - m).exp());
    let total: f64 = exps.iter().sum();
    exps / total
}

fn log_softmax(z: &DVector<f64>) -> DVector<f64> {
    let lse = log_sum_exp(z);
    z.map(|v| v - lse)
}

fn log_sum_exp(z: &DVector<f64>) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_fisher_is_identity_over_variance() {
        let fam = PredictiveFamily::gaussian_mean(3, 1.0);
        let f = fam.fisher(&dvector![0.0, 1.0, -2.0]).unwrap();
        assert_eq!(f, DMatrix::identity(3, 3));
        let fam2 = PredictiveFamily::gaussian_mean(2, 4.0);
        let f2 = fam2.fisher(&dvector![0.0, 0.0]).unwrap();
        assert!((f2[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_fisher_at_zero_two_classes() {
        let fam = PredictiveFamily::softmax(2);
        let f = fam.fisher(&dvector![0.0, 0.0]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((f - expect).norm() < 1e-15);
    }

    #[test]
    fn softmax_fisher_rows_sum_to_zero() {
        let fam = PredictiveFamily::softmax(4);
        let f = fam.fisher(&dvector![0.3, -1.0, 2.0, 0.1]).unwrap();
        for i in 0..4 {
            assert!(f.row(i).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn fisher_equals_loss_hessian_and_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let z = DVector::from_fn(3, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            for fam in [
                PredictiveFamily::gaussian_mean(3, 1.7),
                PredictiveFamily::softmax(3),
            ] {
                let y = fam.sample(&z, &mut rng).unwrap();
                let f = fam.fisher(&z).unwrap();
                let h = fam.loss_hessian(&z, &y).unwrap();
                assert!((&f - &h).abs().max() <= 1e-12);
                assert!(linalg::min_eig(&f) >= -1e-10);
            }
        }
    }

    #[test]
    fn fisher_matches_fd_hessian_of_log_density() {
        // Independent route: F_R must equal −H_{log r} computed by central
        // finite differences in z, for any target y.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let h = 1e-5;
        for fam in [
            PredictiveFamily::gaussian_mean(3, 1.3),
            PredictiveFamily::softmax(3),
        ] {
            for _ in 0..5 {
                let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = fam.sample(&z, &mut rng).unwrap();
                let f = fam.fisher(&z).unwrap();
                let mut fd = DMatrix::zeros(3, 3);
                for j in 0..3 {
                    let mut zp = z.clone();
                    zp[j] += h;
                    let gp = fam.grad_log_density(&zp, &y).unwrap();
                    let mut zm = z.clone();
                    zm[j] -= h;
                    let gm = fam.grad_log_density(&zm, &y).unwrap();
                    fd.column_mut(j).copy_from(&((gp - gm) / (2.0 * h)));
                }
                assert!(
                    linalg::rel_err(&(-fd), &f) <= 1e-7,
                    "family {fam:?} FD mismatch"
                );
            }
        }
    }

    #[test]
    fn softmax_never_overflows() {
        let fam = PredictiveFamily::softmax(2);
        let z = dvector![800.0, 0.0];
        let f = fam.fisher(&z).unwrap();
        assert!(f.iter().all(|v| v.is_finite()));
        let l = fam.log_density(&z, &Target::Class(0)).unwrap();
        assert!(l.is_finite() && l <= 0.0);
    }

    #[test]
    fn mc_fisher_estimate_shrinks_as_root_n() {
        // ‖F_R − (1/N)Σ ∇∇ᵀ‖ over y ~ R should fall like 1/√N. Each error
        // is itself noisy, so average the log-errors over a few repeats
        // before fitting the slope.
        let fam = PredictiveFamily::softmax(3);
        let z = dvector![0.5, -0.3, 0.1];
        let f = fam.fisher(&z).unwrap();
        let sizes = [100usize, 10_000, 1_000_000];
        let mut log_err = [0.0f64; 3];
        let repeats = 3;
        for rep in 0..repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(12 + rep);
            for (slot, &n) in sizes.iter().enumerate() {
                let mut acc = DMatrix::zeros(3, 3);
                for _ in 0..n {
                    let y = fam.sample(&z, &mut rng).unwrap();
                    let g = fam.grad_log_density(&z, &y).unwrap();
                    acc += &g * g.transpose();
                }
                log_err[slot] += ((acc / n as f64 - &f).norm()).ln() / repeats as f64;
            }
        }
        assert!(log_err[0] > log_err[1] && log_err[1] > log_err[2]);
        let slope = (log_err[2] - log_err[0]) / (1_000_000f64 / 100.0).ln();
        assert!((slope + 0.5).abs() < 0.2, "slope {slope}");
    }

    #[test]
    fn degenerate_gaussian_samples_the_mean() {
        let fam = PredictiveFamily::gaussian_mean(2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        match fam.sample(&dvector![1.0, -2.0], &mut rng).unwrap() {
            Target::Real(y) => assert_eq!(y, dvector![1.0, -2.0]),
            _ => panic!("wrong target kind"),
        }
    }

    #[test]
    fn saturated_softmax_sampling() {
        let fam = PredictiveFamily::softmax(2);
        let z = dvector![40.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut hits = 0;
        for _ in 0..10_000 {
            if fam.sample(&z, &mut rng).unwrap() == Target::Class(0) {
                hits += 1;
            }
        }
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn balanced_softmax_sampling_frequencies() {
        let fam = PredictiveFamily::softmax(2);
        let z = dvector![0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 10_000;
        let mut hits = 0;
        for _ in 0..n {
            if fam.sample(&z, &mut rng).unwrap() == Target::Class(0) {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        let sigma = (0.25f64 / n as f64).sqrt();
        assert!((freq - 0.5).abs() <= 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn kl_zero_at_equal_parameters() {
        let z = dvector![0.2, -0.7];
        for fam in [PredictiveFamily::gaussian_mean(2, 1.0), PredictiveFamily::softmax(2)] {
            assert!(fam.kl(&z, &z).unwrap().abs() < 1e-15);
        }
    }
}
