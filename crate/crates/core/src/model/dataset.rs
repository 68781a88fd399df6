//! Training sets: nonempty lists of `(x, y)` cases.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::{Model, PredictiveFamily, Target};

/// A training set `S`. All inputs share the same dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    cases: Vec<(DVector<f64>, Target)>,
}

impl Dataset {
    pub fn new(cases: Vec<(DVector<f64>, Target)>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("dataset must contain at least one case".into()));
        }
        let d0 = cases[0].0.len();
        if cases.iter().any(|(x, _)| x.len() != d0) {
            return Err(Error::InvalidArgument("all inputs must share the same dimension".into()));
        }
        Ok(Self { cases })
    }

    /// The single-case set `S = {(0, 0)}` of the 1-d counterexample setup.
    pub fn scalar_origin() -> Self {
        Self {
            cases: vec![(DVector::zeros(1), Target::Real(DVector::zeros(1)))],
        }
    }

    /// Draw `count` standard-normal inputs and sample targets from the model
    /// itself (`y ~ R_{y|f(x,θ)}`).
    pub fn sampled_from_model<M: Model, R: Rng>(
        model: &M,
        family: &PredictiveFamily,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut cases = Vec::with_capacity(count);
        for _ in 0..count {
            let x = DVector::from_fn(model.input_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = model.forward(&x)?;
            let y = family.sample(&z, rng)?;
            cases.push((x, y));
        }
        Self::new(cases)
    }

    /// Draw inputs as above but keep the model's noiseless output as the
    /// target (Gaussian family only; used to build exactly-fit cases).
    pub fn noiseless_from_model<M: Model>(
        model: &M,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut cases = Vec::with_capacity(count);
        for _ in 0..count {
            let x = DVector::from_fn(model.input_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = model.forward(&x)?;
            cases.push((x, Target::Real(z)));
        }
        Self::new(cases)
    }

    pub fn cases(&self) -> impl Iterator<Item = &(DVector<f64>, Target)> {
        self.cases.iter()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input_dim(&self) -> usize {
        self.cases[0].0.len()
    }
}
