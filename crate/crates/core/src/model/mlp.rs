//! A minimal dense feed-forward network with exact JVP/VJP passes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Model;

/// Per-layer activation. The output layer must be [`Activation::Identity`];
/// output nonlinearities belong to the predictive family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Tanh => s.tanh(),
            Activation::Identity => s,
        }
    }

    /// Derivative expressed through the activation value `a = φ(s)`.
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Dense feed-forward predictor with the layer recursion
/// `s_i = W_i a_{i−1} + b_i`, `a_i = φ_i(s_i)`, `a_0 = x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activations: Vec<Activation>,
}

impl MlpModel {
    /// Build a network with zero weights and biases.
    ///
    /// `dims` lists `d₀, d₁, …, d_ℓ` and `activations` one kind per layer;
    /// the last activation must be `Identity`.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("layer dims must be positive".into()));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::dim("MlpModel activations", dims.len() - 1, activations.len()));
        }
        if *activations.last().unwrap() != Activation::Identity {
            return Err(Error::InvalidArgument(
                "the output layer activation must be identity".into(),
            ));
        }
        let weights = (1..dims.len())
            .map(|i| DMatrix::zeros(dims[i], dims[i - 1]))
            .collect();
        let biases = (1..dims.len()).map(|i| DVector::zeros(dims[i])).collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            activations: activations.to_vec(),
        })
    }

    /// Tanh hidden layers, identity output, weights drawn `N(0, 1/d_in)`.
    pub fn random<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut acts = vec![Activation::Tanh; dims.len() - 1];
        *acts.last_mut().unwrap() = Activation::Identity;
        let mut model = Self::zeros(dims, &acts)?;
        for (i, w) in model.weights.iter_mut().enumerate() {
            let scale = 1.0 / (dims[i] as f64).sqrt();
            for v in w.iter_mut() {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for b in model.biases.iter_mut() {
            for v in b.iter_mut() {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weight(&self, layer: usize) -> &DMatrix<f64> {
        &self.weights[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut DMatrix<f64> {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut DVector<f64> {
        &mut self.biases[layer]
    }

    /// Flat index of weight `(row, col)` of `layer` in the parameter vector.
    /// Layers are laid out in order, each as column-major `W` then `b`.
    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        self.layer_offset(layer) + col * self.dims[layer + 1] + row
    }

    /// Flat index of bias entry `row` of `layer`.
    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        self.layer_offset(layer) + self.dims[layer + 1] * self.dims[layer] + row
    }

    fn layer_offset(&self, layer: usize) -> usize {
        (0..layer).map(|i| self.dims[i + 1] * (self.dims[i] + 1)).sum()
    }

    /// Forward pass keeping all layer activities (`a_0 … a_ℓ`).
    fn forward_trace(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if x.len() != self.dims[0] {
            return Err(Error::dim("MlpModel::forward", self.dims[0], x.len()));
        }
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(x.clone());
        for i in 0..self.weights.len() {
            let s = &self.weights[i] * acts.last().unwrap() + &self.biases[i];
            acts.push(s.map(|v| self.activations[i].apply(v)));
        }
        Ok(acts)
    }

    /// Serialize to a structured text manifest (exact round-trip).
    pub fn to_manifest(&self) -> String {
        let repr = Manifest {
            layer_dims: self.dims.clone(),
            activations: self.activations.clone(),
            params: self.params().iter().copied().collect(),
        };
        serde_json::to_string_pretty(&repr).expect("manifest serialization cannot fail")
    }

    /// Parse a manifest produced by [`MlpModel::to_manifest`].
    pub fn from_manifest(text: &str) -> Result<Self> {
        let repr: Manifest =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model manifest: {e}")))?;
        let mut model = Self::zeros(&repr.layer_dims, &repr.activations)?;
        let n = model.param_count();
        if repr.params.len() != n {
            return Err(Error::dim("model manifest params", n, repr.params.len()));
        }
        model.set_params(&DVector::from_vec(repr.params))?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

impl Model for MlpModel {
    fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn param_count(&self) -> usize {
        (0..self.weights.len())
            .map(|i| self.dims[i + 1] * (self.dims[i] + 1))
            .sum()
    }

    fn params(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.param_count());
        let mut at = 0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.rows_mut(at, w.len()).copy_from_slice(w.as_slice());
            at += w.len();
            out.rows_mut(at, b.len()).copy_from_slice(b.as_slice());
            at += b.len();
        }
        out
    }

    fn set_params(&mut self, p: &DVector<f64>) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::dim("MlpModel::set_params", self.param_count(), p.len()));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wlen = w.len();
            w.as_mut_slice().copy_from_slice(&p.as_slice()[at..at + wlen]);
            at += wlen;
            let blen = b.len();
            b.as_mut_slice().copy_from_slice(&p.as_slice()[at..at + blen]);
            at += blen;
        }
        Ok(())
    }

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_trace(x)?.pop().unwrap())
    }

    fn jvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.param_count() {
            return Err(Error::dim("MlpModel::jvp", self.param_count(), v.len()));
        }
        let acts = self.forward_trace(x)?;
        let mut da = DVector::zeros(self.dims[0]);
        let mut at = 0;
        for i in 0..self.weights.len() {
            let (rows, cols) = (self.dims[i + 1], self.dims[i]);
            let dw = DMatrix::from_column_slice(rows, cols, &v.as_slice()[at..at + rows * cols]);
            at += rows * cols;
            let db = DVector::from_column_slice(&v.as_slice()[at..at + rows]);
            at += rows;
            let ds = &self.weights[i] * &da + dw * &acts[i] + db;
            // da_i = φ'(s_i) ⊙ ds_i, with φ' read off the stored activity.
            da = ds.zip_map(&acts[i + 1], |d, a| self.activations[i].deriv_from_output(a) * d);
        }
        Ok(da)
    }

    fn vjp(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.output_dim() {
            return Err(Error::dim("MlpModel::vjp", self.output_dim(), u.len()));
        }
        let acts = self.forward_trace(x)?;
        let mut grad = DVector::zeros(self.param_count());
        let mut delta = u.clone();
        let mut at = grad.len();
        for i in (0..self.weights.len()).rev() {
            let ds = delta.zip_map(&acts[i + 1], |d, a| self.activations[i].deriv_from_output(a) * d);
            let (rows, cols) = (self.dims[i + 1], self.dims[i]);
            at -= rows;
            grad.rows_mut(at, rows).copy_from(&ds);
            at -= rows * cols;
            let gw = &ds * acts[i].transpose();
            grad.rows_mut(at, rows * cols).copy_from_slice(gw.as_slice());
            delta = self.weights[i].transpose() * ds;
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net() -> MlpModel {
        let mut m = MlpModel::zeros(&[2, 2], &[Activation::Identity]).unwrap();
        m.weight_mut(0).fill_with_identity();
        m
    }

    #[test]
    fn forward_identity_net() {
        let m = identity_net();
        assert_eq!(m.forward(&dvector![1.0, 2.0]).unwrap(), dvector![1.0, 2.0]);
    }

    #[test]
    fn forward_rejects_bad_input_dim() {
        let m = identity_net();
        assert!(m.forward(&dvector![1.0]).is_err());
    }

    #[test]
    fn param_count_matches_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MlpModel::random(&[2, 4, 2], &mut rng).unwrap();
        assert_eq!(m.param_count(), 4 * 3 + 2 * 5);
    }

    #[test]
    fn params_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MlpModel::random(&[3, 5, 2], &mut rng).unwrap();
        let p = m.params();
        let m2 = m.with_params(&p).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m2.params(), p);
    }

    #[test]
    fn manifest_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MlpModel::random(&[2, 3, 1], &mut rng).unwrap();
        let back = MlpModel::from_manifest(&m.to_manifest()).unwrap();
        assert_eq!(m, back);
    }

    /// Independent per-scalar recomputation of the layer recursion.
    fn scalar_forward(m: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = x.to_vec();
        for l in 0..m.weights.len() {
            let rows = m.dims[l + 1];
            let mut next = vec![0.0; rows];
            for (r, slot) in next.iter_mut().enumerate() {
                let mut s = m.biases[l][r];
                for (c, &ac) in a.iter().enumerate() {
                    s += m.weights[l][(r, c)] * ac;
                }
                *slot = match m.activations[l] {
                    Activation::Tanh => s.tanh(),
                    Activation::Identity => s,
                };
            }
            a = next;
        }
        a
    }

    #[test]
    fn forward_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MlpModel::random(&[2, 4, 2], &mut rng).unwrap();
        let x = dvector![0.3, -1.1];
        let z = m.forward(&x).unwrap();
        let oracle = scalar_forward(&m, x.as_slice());
        for j in 0..2 {
            assert!((z[j] - oracle[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn jvp_zero_tangent_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let v = DVector::zeros(m.param_count());
        assert_eq!(m.jvp(&dvector![0.5, 0.5], &v).unwrap(), dvector![0.0, 0.0]);
    }

    #[test]
    fn jvp_single_weight_perturbation_linear_net() {
        // f = Wx with a zero bias: bumping w_{jk} by one moves output j by x_k.
        let m = MlpModel::zeros(&[3, 2], &[Activation::Identity]).unwrap();
        let x = dvector![0.7, -0.4, 2.0];
        let mut v = DVector::zeros(m.param_count());
        v[m.weight_index(0, 1, 2)] = 1.0;
        let out = m.jvp(&x, &v).unwrap();
        assert_eq!(out, dvector![0.0, 2.0]);
    }

    #[test]
    fn jvp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MlpModel::random(&[2, 4, 2], &mut rng).unwrap();
        let x = dvector![0.2, -0.6];
        let v = DVector::from_fn(m.param_count(), |i, _| ((i as f64) * 0.37).sin());
        let h = 1e-5;
        let p = m.params();
        let plus = m.with_params(&(&p + &v * h)).unwrap().forward(&x).unwrap();
        let minus = m.with_params(&(&p - &v * h)).unwrap().forward(&x).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        let jvp = m.jvp(&x, &v).unwrap();
        assert!((&jvp - &fd).norm() <= 1e-6 * jvp.norm().max(1.0));
    }

    #[test]
    fn vjp_zero_cotangent_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let g = m.vjp(&dvector![0.1, 0.2], &dvector![0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_identity() {
        // uᵀ(Jv) = vᵀ(Jᵀu) for random u, v.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = MlpModel::random(&[3, 5, 4, 2], &mut rng).unwrap();
        let x = dvector![0.4, -0.2, 1.3];
        for trial in 0..20 {
            let v = DVector::from_fn(m.param_count(), |i, _| ((i + trial) as f64 * 0.618).sin());
            let u = DVector::from_fn(2, |i, _| ((i + trial) as f64 * 1.234).cos());
            let lhs = u.dot(&m.jvp(&x, &v).unwrap());
            let rhs = v.dot(&m.vjp(&x, &u).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn vjp_recovers_fd_jacobian_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = MlpModel::random(&[2, 3, 2], &mut rng).unwrap();
        let x = dvector![0.9, -0.5];
        let mut e1 = DVector::zeros(2);
        e1[0] = 1.0;
        let row = m.vjp(&x, &e1).unwrap();
        let h = 1e-5;
        let p = m.params();
        for j in 0..m.param_count() {
            let mut dp = DVector::zeros(m.param_count());
            dp[j] = h;
            let plus = m.with_params(&(&p + &dp)).unwrap().forward(&x).unwrap()[0];
            let minus = m.with_params(&(&p - &dp)).unwrap().forward(&x).unwrap()[0];
            let fd = (plus - minus) / (2.0 * h);
            assert!((row[j] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}
