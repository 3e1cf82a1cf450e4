//! Two-layer perceptron: `f(x) = W2 · relu(W1 x + b1) + b2`.
//!
//! Parameters live in one flat [`WeightVector`] with the fixed layout
//! `[W1 (hidden × input, row-major), b1, W2 (output × hidden, row-major), b2]`,
//! so elementwise averaging across clients is well defined.

mod jacobian;

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use jacobian::{JacobianOperator, JacobianStack, MlpJacobian};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl ModelDims {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Result<Self> {
        for (name, v) in [
            ("input_dim", input_dim),
            ("hidden_dim", hidden_dim),
            ("output_dim", output_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            output_dim,
        })
    }

    /// 28×28 inputs, 100 hidden units, 10 classes.
    pub const fn mnist() -> Self {
        Self {
            input_dim: 784,
            hidden_dim: 100,
            output_dim: 10,
        }
    }

    /// `d = (input + 1) · hidden + (hidden + 1) · output`.
    pub const fn param_count(&self) -> usize {
        (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.output_dim
    }

    pub(crate) fn w1_range(&self) -> Range<usize> {
        0..self.hidden_dim * self.input_dim
    }

    pub(crate) fn b1_range(&self) -> Range<usize> {
        let start = self.hidden_dim * self.input_dim;
        start..start + self.hidden_dim
    }

    pub(crate) fn w2_range(&self) -> Range<usize> {
        let start = self.b1_range().end;
        start..start + self.output_dim * self.hidden_dim
    }

    pub(crate) fn b2_range(&self) -> Range<usize> {
        let start = self.w2_range().end;
        start..start + self.output_dim
    }
}

/// Flat parameter vector of the perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Array1<f64>);

impl WeightVector {
    pub fn zeros(len: usize) -> Self {
        Self(Array1::zeros(len))
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(Array1::from(values))
    }

    pub fn from_array(values: Array1<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("weight vectors are contiguous")
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array1<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha · other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &WeightVector) {
        self.0.scaled_add(alpha, &other.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.mapv_inplace(|v| v * factor);
    }

    /// Elementwise mean; vectors are summed in the order given.
    pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a WeightVector>) -> Result<WeightVector> {
        let mut iter = vectors.into_iter();
        let first = iter.next().ok_or(Error::Empty("weight vector list"))?;
        let mut acc = first.clone();
        let mut count = 1usize;
        for v in iter {
            if v.len() != acc.len() {
                return Err(Error::mismatch("weight averaging", acc.len(), v.len()));
            }
            acc.0 += &v.0;
            count += 1;
        }
        acc.scale(1.0 / count as f64);
        Ok(acc)
    }

    pub fn max_abs_diff(&self, other: &WeightVector) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Array1<f64>> for WeightVector {
    fn from(values: Array1<f64>) -> Self {
        Self(values)
    }
}

/// Inputs, one-hot targets and integer labels of a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::mismatch("batch rows", inputs.nrows(), labels.len()));
        }
        let targets = crate::data::one_hot(&labels, classes)?;
        Ok(Self {
            inputs,
            targets,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn slice(&self, rows: Range<usize>) -> Batch {
        Batch {
            inputs: self.inputs.slice(s![rows.clone(), ..]).to_owned(),
            targets: self.targets.slice(s![rows.clone(), ..]).to_owned(),
            labels: self.labels[rows].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every client starts from the same weights.
    Shared,
    /// Each client draws from its own stream.
    PerClient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SoftmaxCe,
    /// `(1 / (2 N d2)) · ‖f − Y‖²`
    Mse,
}

/// Borrowed views of the four parameter blocks.
pub struct Layers<'a> {
    pub w1: ArrayView2<'a, f64>,
    pub b1: ArrayView1<'a, f64>,
    pub w2: ArrayView2<'a, f64>,
    pub b2: ArrayView1<'a, f64>,
}

/// Hidden-layer activations and ReLU gates for a set of inputs.
pub(crate) struct Hidden {
    pub activations: Array2<f64>,
    pub gates: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    dims: ModelDims,
}

impl Mlp {
    pub fn new(dims: ModelDims) -> Self {
        Self { dims }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn param_count(&self) -> usize {
        self.dims.param_count()
    }

    /// Gaussian weights with variance `2 / fan_in`, zero biases.
    pub fn init_weights(&self, seed: u64, scheme: InitScheme, client_id: usize) -> WeightVector {
        let base = seed::derive_seed(seed, seed::stream::INIT);
        let stream = match scheme {
            InitScheme::Shared => base,
            InitScheme::PerClient => seed::derive_seed(base, client_id as u64 + 1),
        };
        let mut rng = seed::rng(stream);
        let dims = self.dims;
        let mut values = Array1::zeros(dims.param_count());
        let std1 = (2.0 / dims.input_dim as f64).sqrt();
        let std2 = (2.0 / dims.hidden_dim as f64).sqrt();
        let n1 = Normal::new(0.0, std1).expect("finite std");
        let n2 = Normal::new(0.0, std2).expect("finite std");
        for v in values.slice_mut(s![dims.w1_range()]).iter_mut() {
            *v = n1.sample(&mut rng);
        }
        for v in values.slice_mut(s![dims.w2_range()]).iter_mut() {
            *v = n2.sample(&mut rng);
        }
        WeightVector(values)
    }

    pub fn layers<'a>(&self, w: &'a WeightVector) -> Result<Layers<'a>> {
        let d = self.dims;
        if w.len() != d.param_count() {
            return Err(Error::mismatch("weight vector", d.param_count(), w.len()));
        }
        let v = w.view();
        Ok(Layers {
            w1: v
                .slice_move(s![d.w1_range()])
                .into_shape_with_order((d.hidden_dim, d.input_dim))
                .expect("contiguous block"),
            b1: w.view().slice_move(s![d.b1_range()]),
            w2: w
                .view()
                .slice_move(s![d.w2_range()])
                .into_shape_with_order((d.output_dim, d.hidden_dim))
                .expect("contiguous block"),
            b2: w.view().slice_move(s![d.b2_range()]),
        })
    }

    fn check_inputs(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dims.input_dim {
            return Err(Error::mismatch("input columns", self.dims.input_dim, x.ncols()));
        }
        Ok(())
    }

    pub(crate) fn hidden(&self, layers: &Layers<'_>, x: ArrayView2<'_, f64>) -> Hidden {
        let mut z = x.dot(&layers.w1.t());
        z += &layers.b1;
        let gates = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        z.mapv_inplace(|v| v.max(0.0));
        Hidden {
            activations: z,
            gates,
        }
    }

    fn output(layers: &Layers<'_>, activations: &Array2<f64>) -> Array2<f64> {
        let mut f = activations.dot(&layers.w2.t());
        f += &layers.b2;
        f
    }

    /// Network outputs, one row per input row.
    pub fn forward(&self, w: &WeightVector, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_inputs(&x)?;
        let layers = self.layers(w)?;
        let hidden = self.hidden(&layers, x);
        Ok(Self::output(&layers, &hidden.activations))
    }

    /// Dense per-sample Jacobians `∂f_j(x_n)/∂w`, shape `N × d2 × d`.
    pub fn jacobian(&self, w: &WeightVector, x: ArrayView2<'_, f64>) -> Result<JacobianStack> {
        Ok(self.jacobian_factors(w, x, 0)?.to_dense())
    }

    /// Factored Jacobian of `f(x; w)`: hidden activations, ReLU gates and the
    /// output weights, enough to apply `J`, `Jᵀ` and the Gram product without
    /// materializing the `N × d2 × d` tensor. Every row is tagged with `owner`.
    pub fn jacobian_factors(
        &self,
        w: &WeightVector,
        x: ArrayView2<'_, f64>,
        owner: usize,
    ) -> Result<MlpJacobian> {
        self.check_inputs(&x)?;
        let layers = self.layers(w)?;
        let hidden = self.hidden(&layers, x);
        Ok(MlpJacobian::from_parts(
            self.dims,
            layers.w2.to_owned(),
            x.to_owned(),
            hidden.activations,
            hidden.gates,
            vec![owner; x.nrows()],
        ))
    }

    /// Forward pass and factored Jacobian in one go.
    pub fn forward_with_jacobian(
        &self,
        w: &WeightVector,
        x: ArrayView2<'_, f64>,
        owner: usize,
    ) -> Result<(Array2<f64>, MlpJacobian)> {
        let jac = self.jacobian_factors(w, x, owner)?;
        let layers = self.layers(w)?;
        let f = Self::output(&layers, jac.activations());
        Ok((f, jac))
    }

    /// Mean loss over the batch.
    pub fn loss(&self, w: &WeightVector, batch: &Batch, loss: Loss) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let f = self.forward(w, batch.inputs.view())?;
        self.check_targets(batch)?;
        let n = batch.len() as f64;
        Ok(match loss {
            Loss::Mse => {
                let d2 = self.dims.output_dim as f64;
                (&f - &batch.targets).mapv(|v| v * v).sum() / (2.0 * n * d2)
            }
            Loss::SoftmaxCe => {
                let mut total = 0.0;
                for (row, &label) in f.outer_iter().zip(&batch.labels) {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                    total += lse - row[label];
                }
                total / n
            }
        })
    }

    fn check_targets(&self, batch: &Batch) -> Result<()> {
        if batch.targets.ncols() != self.dims.output_dim {
            return Err(Error::mismatch(
                "target columns",
                self.dims.output_dim,
                batch.targets.ncols(),
            ));
        }
        if batch.targets.nrows() != batch.inputs.nrows() {
            return Err(Error::mismatch(
                "target rows",
                batch.inputs.nrows(),
                batch.targets.nrows(),
            ));
        }
        Ok(())
    }

    /// Gradient of the mean loss over the batch, by backpropagation.
    pub fn loss_gradient(&self, w: &WeightVector, batch: &Batch, loss: Loss) -> Result<WeightVector> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        self.check_inputs(&batch.inputs.view())?;
        self.check_targets(batch)?;
        let layers = self.layers(w)?;
        let hidden = self.hidden(&layers, batch.inputs.view());
        let f = Self::output(&layers, &hidden.activations);
        let n = batch.len() as f64;
        // dL/df
        let delta = match loss {
            Loss::Mse => (&f - &batch.targets) / (n * self.dims.output_dim as f64),
            Loss::SoftmaxCe => {
                let mut p = f;
                for mut row in p.outer_iter_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                (p - &batch.targets) / n
            }
        };
        Ok(self.backprop(&layers, batch.inputs.view(), &hidden, &delta))
    }

    /// `Σ_n J(x_n)ᵀ delta_n` for output-space cotangents `delta` (N × d2).
    pub(crate) fn backprop(
        &self,
        layers: &Layers<'_>,
        x: ArrayView2<'_, f64>,
        hidden: &Hidden,
        delta: &Array2<f64>,
    ) -> WeightVector {
        let d = self.dims;
        let mut grad = Array1::zeros(d.param_count());
        let gw2 = delta.t().dot(&hidden.activations);
        let gb2 = delta.sum_axis(Axis(0));
        let mut dz = delta.dot(&layers.w2);
        Zip::from(&mut dz).and(&hidden.gates).for_each(|a, &g| *a *= g);
        let gw1 = dz.t().dot(&x);
        let gb1 = dz.sum_axis(Axis(0));
        grad.slice_mut(s![d.w1_range()])
            .assign(&Array1::from_iter(gw1.iter().copied()));
        grad.slice_mut(s![d.b1_range()]).assign(&gb1);
        grad.slice_mut(s![d.w2_range()])
            .assign(&Array1::from_iter(gw2.iter().copied()));
        grad.slice_mut(s![d.b2_range()]).assign(&gb2);
        WeightVector(grad)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;

    fn random_weights(mlp: &Mlp, seed: u64) -> WeightVector {
        let mut w = mlp.init_weights(seed, InitScheme::Shared, 0);
        // Nonzero biases so every block is exercised.
        let mut rng = seed::rng(seed ^ 0xb1a5);
        let n = Normal::new(0.0, 0.3).unwrap();
        let d = mlp.dims();
        for i in d.b1_range().chain(d.b2_range()) {
            w.0[i] = n.sample(&mut rng);
        }
        w
    }

    fn random_inputs(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        let u = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((n, dim), |_| u.sample(&mut rng))
    }

    #[test]
    fn param_count_for_mnist_dims() {
        assert_eq!(ModelDims::mnist().param_count(), 79_510);
        let mlp = Mlp::new(ModelDims::mnist());
        assert_eq!(mlp.init_weights(1, InitScheme::Shared, 0).len(), 79_510);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(ModelDims::new(0, 2, 2).is_err());
        assert!(ModelDims::new(3, 0, 2).is_err());
    }

    #[test]
    fn shared_init_ignores_client_id() {
        let mlp = Mlp::new(ModelDims::new(6, 5, 3).unwrap());
        assert_eq!(
            mlp.init_weights(7, InitScheme::Shared, 0),
            mlp.init_weights(7, InitScheme::Shared, 5)
        );
    }

    #[test]
    fn per_client_init_differs() {
        let mlp = Mlp::new(ModelDims::new(6, 5, 3).unwrap());
        let a = mlp.init_weights(7, InitScheme::PerClient, 0);
        let b = mlp.init_weights(7, InitScheme::PerClient, 5);
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn init_has_zero_biases_and_he_scale() {
        let mlp = Mlp::new(ModelDims::new(400, 200, 10).unwrap());
        let w = mlp.init_weights(3, InitScheme::Shared, 0);
        let l = mlp.layers(&w).unwrap();
        assert!(l.b1.iter().all(|&v| v == 0.0));
        assert!(l.b2.iter().all(|&v| v == 0.0));
        let var = l.w1.mapv(|v| v * v).mean().unwrap();
        assert!((var - 2.0 / 400.0).abs() < 0.1 * 2.0 / 400.0, "var {var}");
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mlp = Mlp::new(ModelDims::new(4, 3, 2).unwrap());
        let w = WeightVector::zeros(mlp.param_count());
        let f = mlp.forward(&w, random_inputs(5, 4, 1).view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constructed_identity_net() {
        // 1-2-1: h1 = relu(x), h2 = relu(-x); f = h1 - h2 = x.
        let mlp = Mlp::new(ModelDims::new(1, 2, 1).unwrap());
        let w = WeightVector::from_vec(vec![1.0, -1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let f = mlp.forward(&w, array![[3.0]].view()).unwrap();
        assert_eq!(f[[0, 0]], 3.0);
        let f = mlp.forward(&w, array![[-2.5]].view()).unwrap();
        assert_eq!(f[[0, 0]], -2.5);
    }

    #[test]
    fn forward_matches_hand_composition() {
        let mlp = Mlp::new(ModelDims::new(3, 2, 2).unwrap());
        let w = random_weights(&mlp, 11);
        let x = [0.2, 0.9, 0.4];
        let v = w.as_slice();
        // Layout: W1 (2×3), b1 (2), W2 (2×2), b2 (2).
        let mut h = [0.0; 2];
        for (r, hr) in h.iter_mut().enumerate() {
            let z = v[3 * r] * x[0] + v[3 * r + 1] * x[1] + v[3 * r + 2] * x[2] + v[6 + r];
            *hr = if z > 0.0 { z } else { 0.0 };
        }
        let expect: Vec<f64> = (0..2)
            .map(|j| v[8 + 2 * j] * h[0] + v[8 + 2 * j + 1] * h[1] + v[12 + j])
            .collect();
        let f = mlp
            .forward(&w, Array2::from_shape_vec((1, 3), x.to_vec()).unwrap().view())
            .unwrap();
        assert_abs_diff_eq!(f[[0, 0]], expect[0], epsilon = 1e-12);
        assert_abs_diff_eq!(f[[0, 1]], expect[1], epsilon = 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mlp = Mlp::new(ModelDims::new(3, 2, 2).unwrap());
        let w = WeightVector::zeros(mlp.param_count());
        let err = mlp.forward(&w, Array2::zeros((2, 4)).view()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        let err = mlp
            .forward(&WeightVector::zeros(3), Array2::zeros((2, 3)).view())
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite differences of `g` at `w`, one coordinate at a time.
    fn finite_difference<F: Fn(&WeightVector) -> Array1<f64>>(
        w: &WeightVector,
        step: f64,
        g: F,
    ) -> Array2<f64> {
        let base = g(w);
        let mut out = Array2::zeros((base.len(), w.len()));
        for k in 0..w.len() {
            let mut plus = w.clone();
            plus.0[k] += step;
            let mut minus = w.clone();
            minus.0[k] -= step;
            let col = (g(&plus) - g(&minus)) / (2.0 * step);
            out.column_mut(k).assign(&col);
        }
        out
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mlp = Mlp::new(ModelDims::new(2, 3, 2).unwrap());
        let w = random_weights(&mlp, 5);
        let x = random_inputs(4, 2, 9);
        let stack = mlp.jacobian(&w, x.view()).unwrap();
        for n in 0..x.nrows() {
            let xn = x.slice(s![n..n + 1, ..]).to_owned();
            let fd = finite_difference(&w, 1e-5, |v| {
                mlp.forward(v, xn.view()).unwrap().row(0).to_owned()
            });
            for j in 0..2 {
                for k in 0..w.len() {
                    let e = relative_error(stack.values()[[n, j, k]], fd[[j, k]]);
                    assert!(e < 1e-5, "n={n} j={j} k={k} err={e}");
                }
            }
        }
    }

    #[test]
    fn output_bias_block_is_identity() {
        let mlp = Mlp::new(ModelDims::new(3, 4, 3).unwrap());
        let w = random_weights(&mlp, 2);
        let stack = mlp.jacobian(&w, random_inputs(2, 3, 4).view()).unwrap();
        let b2 = mlp.dims().b2_range();
        for n in 0..2 {
            for j in 0..3 {
                for (jj, k) in b2.clone().enumerate() {
                    let expect = if jj == j { 1.0 } else { 0.0 };
                    assert_eq!(stack.values()[[n, j, k]], expect);
                }
            }
        }
    }

    #[test]
    fn dead_relu_zeroes_first_layer_block() {
        let mlp = Mlp::new(ModelDims::new(2, 3, 2).unwrap());
        let mut w = random_weights(&mlp, 8);
        let d = mlp.dims();
        for i in d.b1_range() {
            w.0[i] = -100.0;
        }
        let stack = mlp.jacobian(&w, random_inputs(3, 2, 1).view()).unwrap();
        for n in 0..3 {
            for j in 0..2 {
                for k in d.w1_range().chain(d.b1_range()) {
                    assert_eq!(stack.values()[[n, j, k]], 0.0);
                }
            }
        }
    }

    fn batch(n: usize, dims: ModelDims, seed: u64) -> Batch {
        let x = random_inputs(n, dims.input_dim, seed);
        let labels = (0..n).map(|i| (i * 7 + seed as usize) % dims.output_dim).collect();
        Batch::new(x, labels, dims.output_dim).unwrap()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mlp = Mlp::new(ModelDims::new(3, 4, 3).unwrap());
        let w = random_weights(&mlp, 21);
        let b = batch(5, mlp.dims(), 3);
        for loss in [Loss::Mse, Loss::SoftmaxCe] {
            let g = mlp.loss_gradient(&w, &b, loss).unwrap();
            let fd = finite_difference(&w, 1e-5, |v| {
                Array1::from_elem(1, mlp.loss(v, &b, loss).unwrap())
            });
            for k in 0..w.len() {
                let e = relative_error(g.0[k], fd[[0, k]]);
                assert!(e < 1e-5, "{loss:?} k={k} err={e} {} {}", g.0[k], fd[[0, k]]);
            }
        }
    }

    #[test]
    fn mse_gradient_vanishes_at_exact_fit() {
        let mlp = Mlp::new(ModelDims::new(1, 2, 1).unwrap());
        let w = WeightVector::from_vec(vec![1.0, -1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let b = Batch {
            inputs: array![[0.5], [-0.25]],
            targets: array![[0.5], [-0.25]],
            labels: vec![0, 0],
        };
        let g = mlp.loss_gradient(&w, &b, Loss::Mse).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_gradient_at_uniform_logits() {
        // Zero output layer gives uniform logits: d b2 = (1/C − onehot) / N.
        let dims = ModelDims::new(3, 4, 5).unwrap();
        let mlp = Mlp::new(dims);
        let mut w = random_weights(&mlp, 1);
        for i in dims.w2_range().chain(dims.b2_range()) {
            w.0[i] = 0.0;
        }
        let b = Batch::new(random_inputs(2, 3, 2), vec![1, 3], 5).unwrap();
        let g = mlp.loss_gradient(&w, &b, Loss::SoftmaxCe).unwrap();
        let gb2 = &g.as_slice()[dims.b2_range()];
        for (c, &v) in gb2.iter().enumerate() {
            let hits = b.labels.iter().filter(|&&l| l == c).count() as f64;
            let expect = (2.0 * 0.2 - hits) / 2.0;
            assert_abs_diff_eq!(v, expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn mse_gradient_equals_jacobian_contraction() {
        let mlp = Mlp::new(ModelDims::new(3, 4, 2).unwrap());
        let w = random_weights(&mlp, 33);
        let b = batch(6, mlp.dims(), 4);
        let g = mlp.loss_gradient(&w, &b, Loss::Mse).unwrap();
        let stack = mlp.jacobian(&w, b.inputs.view()).unwrap();
        let f = mlp.forward(&w, b.inputs.view()).unwrap();
        let resid = &b.targets - &f;
        let scale = -1.0 / (6.0 * 2.0);
        let contracted = stack.transpose_apply(resid.view()) * scale;
        for k in 0..w.len() {
            assert_abs_diff_eq!(g.0[k], contracted[k], epsilon = 1e-13);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mlp = Mlp::new(ModelDims::new(2, 2, 2).unwrap());
        let w = WeightVector::zeros(mlp.param_count());
        let b = Batch::new(Array2::zeros((0, 2)), vec![], 2).unwrap();
        assert!(matches!(mlp.loss_gradient(&w, &b, Loss::Mse), Err(Error::Empty(_))));
    }
}
