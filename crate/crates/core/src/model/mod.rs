//! Differentiable predictors, predictive output families, and datasets.
//!
//! A [`Model`] maps an input `x` and a flat parameter vector `θ` to an
//! output vector `z = f(x, θ)`; its derivative surface is exposed through
//! exact Jacobian-vector products ([`Model::jvp`]) and vector-Jacobian
//! products ([`Model::vjp`]). The output layer is always linear — any
//! output nonlinearity or normalizer lives in the [`PredictiveFamily`],
//! which turns `z` into a distribution over targets.

mod dataset;
mod family;
mod mlp;

pub use dataset::Dataset;
pub use family::{PredictiveFamily, Target};
pub use mlp::{Activation, MlpModel};

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A differentiable predictor `f(x, θ)` with a flat parameter vector.
///
/// Implementations must make flatten/unflatten of `θ` a bijection and keep
/// `jvp`/`vjp` exact (they are the transpose of one another; finite
/// differences are reserved for test oracles).
pub trait Model: Clone {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn param_count(&self) -> usize;

    /// Current parameters as a flat vector.
    fn params(&self) -> DVector<f64>;

    /// Replace the parameters from a flat vector.
    fn set_params(&mut self, p: &DVector<f64>) -> Result<()>;

    /// `z = f(x, θ)`.
    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// `J_f v` for a parameter-space tangent `v` (linearized forward pass).
    fn jvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>>;

    /// `J_fᵀ u` for an output-space vector `u` (backward pass).
    fn vjp(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// Clone with different parameters.
    fn with_params(&self, p: &DVector<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(p)?;
        Ok(m)
    }
}

/// The trivial predictor `f(x, θ) = θ` with `m = n`.
///
/// This is the smallest model on which the Fisher and the empirical Fisher
/// visibly disagree, and it doubles as the "identity network" (`J_f = I`)
/// used when an unconstrained output-space change must be achievable.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityModel {
    theta: DVector<f64>,
}

impl IdentityModel {
    pub fn new(theta: DVector<f64>) -> Self {
        Self { theta }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

impl Model for IdentityModel {
    fn input_dim(&self) -> usize {
        self.theta.len()
    }

    fn output_dim(&self) -> usize {
        self.theta.len()
    }

    fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> DVector<f64> {
        self.theta.clone()
    }

    fn set_params(&mut self, p: &DVector<f64>) -> Result<()> {
        if p.len() != self.theta.len() {
            return Err(Error::dim("IdentityModel::set_params", self.theta.len(), p.len()));
        }
        self.theta = p.clone();
        Ok(())
    }

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("IdentityModel::forward", self.input_dim(), x.len()));
        }
        Ok(self.theta.clone())
    }

    fn jvp(&self, _x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.param_count() {
            return Err(Error::dim("IdentityModel::jvp", self.param_count(), v.len()));
        }
        Ok(v.clone())
    }

    fn vjp(&self, _x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.output_dim() {
            return Err(Error::dim("IdentityModel::vjp", self.output_dim(), u.len()));
        }
        Ok(u.clone())
    }
}

/// Loss `L(y, z) = −log r(y|z)` and its parameter gradient for one case.
///
/// The gradient is `−J_fᵀ ∇_z log r(y|z)`.
pub fn loss_and_grad<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    x: &DVector<f64>,
    y: &Target,
) -> Result<(f64, DVector<f64>)> {
    let z = model.forward(x)?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("model output"));
    }
    let loss = -family.log_density(&z, y)?;
    let gz = family.grad_log_density(&z, y)?;
    let grad = -model.vjp(x, &gz)?;
    Ok((loss, grad))
}

/// Per-case log-likelihood gradient `∇_θ log p(y|x,θ) = J_fᵀ ∇_z log r`.
pub fn loglik_grad<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    x: &DVector<f64>,
    y: &Target,
) -> Result<DVector<f64>> {
    let z = model.forward(x)?;
    let gz = family.grad_log_density(&z, y)?;
    model.vjp(x, &gz)
}

/// Training objective `h(θ)` and its gradient, averaged over the dataset.
pub fn objective_and_grad<M: Model>(
    model: &M,
    family: &PredictiveFamily,
    data: &Dataset,
) -> Result<(f64, DVector<f64>)> {
    let mut h = 0.0;
    let mut grad = DVector::zeros(model.param_count());
    for (x, y) in data.cases() {
        let (l, g) = loss_and_grad(model, family, x, y)?;
        h += l;
        grad += g;
    }
    let scale = 1.0 / data.len() as f64;
    Ok((h * scale, grad * scale))
}

/// Training objective `h(θ)` alone.
pub fn objective<M: Model>(model: &M, family: &PredictiveFamily, data: &Dataset) -> Result<f64> {
    let mut h = 0.0;
    for (x, y) in data.cases() {
        let z = model.forward(x)?;
        h -= family.log_density(&z, y)?;
    }
    Ok(h / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn identity_model_forward_returns_theta() {
        // f(x, θ) = θ regardless of x.
        let m = IdentityModel::new(dvector![1.5]);
        assert_eq!(m.forward(&dvector![0.0]).unwrap(), dvector![1.5]);
    }

    #[test]
    fn identity_model_grad_is_theta() {
        // 1-d setup with y = 0: h(θ) = θ²/2 + const, ∇h = θ.
        let m = IdentityModel::new(dvector![0.7]);
        let fam = PredictiveFamily::gaussian_mean(1, 1.0);
        let (_, g) = loss_and_grad(&m, &fam, &dvector![0.0], &Target::Real(dvector![0.0])).unwrap();
        assert!((g[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn gaussian_loss_at_zero_residual_is_normalizer() {
        let m = IdentityModel::new(dvector![0.3, -0.2]);
        let fam = PredictiveFamily::gaussian_mean(2, 1.0);
        let y = Target::Real(dvector![0.3, -0.2]);
        let (l, g) = loss_and_grad(&m, &fam, &dvector![0.0, 0.0], &y).unwrap();
        assert!((l - (2.0 / 2.0) * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!(g.norm() < 1e-14);
    }
}
