use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};

use super::ModelDims;
use crate::error::{Error, Result};

/// Linear-operator view of a stacked per-sample Jacobian `J ∈ R^{Ñ × d2 × d}`.
pub trait JacobianOperator {
    fn rows(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// Client that contributed each row.
    fn row_owner(&self) -> &[usize];

    /// Unnormalized Frobenius products `⟨J(x_m), J(x_n)⟩_F`, `Ñ × Ñ`.
    fn frobenius_gram(&self) -> Array2<f64>;

    /// `Σ_j J[:, j, :]ᵀ r[:, j]`, a parameter-space vector.
    fn transpose_apply(&self, r: ArrayView2<'_, f64>) -> Array1<f64>;

    /// `J · delta`, an `Ñ × d2` output-space matrix.
    fn apply(&self, delta: ArrayView1<'_, f64>) -> Array2<f64>;
}

/// Dense Jacobian tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianStack {
    values: Array3<f64>,
    row_owner: Vec<usize>,
}

impl JacobianStack {
    pub fn new(values: Array3<f64>, row_owner: Vec<usize>) -> Result<Self> {
        if values.shape()[0] != row_owner.len() {
            return Err(Error::mismatch(
                "jacobian row owners",
                values.shape()[0],
                row_owner.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("jacobian", "non-finite entry"));
        }
        Ok(Self { values, row_owner })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Stacks along the row axis, in the order given.
    pub fn concat(parts: &[JacobianStack]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("jacobian stack list"))?;
        let tail = &first.values.shape()[1..];
        for p in parts {
            if &p.values.shape()[1..] != tail {
                return Err(Error::mismatch("jacobian width", tail[1], p.values.shape()[2]));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
        let values = concatenate(Axis(0), &views).expect("shapes checked");
        let row_owner = parts.iter().flat_map(|p| p.row_owner.iter().copied()).collect();
        Ok(Self { values, row_owner })
    }

    fn flat(&self) -> ArrayView2<'_, f64> {
        let (n, d2, d) = self.values.dim();
        self.values
            .view()
            .into_shape_with_order((n, d2 * d))
            .expect("standard layout")
    }

    /// One row per (sample, output) pair.
    fn by_output(&self) -> ArrayView2<'_, f64> {
        let (n, d2, d) = self.values.dim();
        self.values
            .view()
            .into_shape_with_order((n * d2, d))
            .expect("standard layout")
    }
}

impl JacobianOperator for JacobianStack {
    fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    fn output_dim(&self) -> usize {
        self.values.shape()[1]
    }

    fn param_dim(&self) -> usize {
        self.values.shape()[2]
    }

    fn row_owner(&self) -> &[usize] {
        &self.row_owner
    }

    fn frobenius_gram(&self) -> Array2<f64> {
        let flat = self.flat();
        flat.dot(&flat.t())
    }

    fn transpose_apply(&self, r: ArrayView2<'_, f64>) -> Array1<f64> {
        let (n, d2, _) = self.values.dim();
        let r = r.to_owned().into_shape_with_order(n * d2).expect("r is Ñ × d2");
        self.by_output().t().dot(&r)
    }

    fn apply(&self, delta: ArrayView1<'_, f64>) -> Array2<f64> {
        let (n, d2, _) = self.values.dim();
        self.by_output()
            .dot(&delta)
            .into_shape_with_order((n, d2))
            .expect("Ñ × d2")
    }
}

/// Structured Jacobian of the two-layer perceptron at a single weight vector.
///
/// For row `n` and output `j`:
/// `∂f_j/∂W2[j', h] = δ_jj' a_nh`, `∂f_j/∂b2 = e_j`,
/// `∂f_j/∂W1[h, k] = W2[j, h] g_nh x_nk`, `∂f_j/∂b1[h] = W2[j, h] g_nh`,
/// where `a` are the hidden activations and `g` the ReLU gates. Storage is
/// `O(Ñ · (input + hidden))` instead of `O(Ñ · d2 · d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpJacobian {
    dims: ModelDims,
    output_weights: Array2<f64>,
    inputs: Array2<f64>,
    activations: Array2<f64>,
    gates: Array2<f64>,
    row_owner: Vec<usize>,
}

impl MlpJacobian {
    pub(crate) fn from_parts(
        dims: ModelDims,
        output_weights: Array2<f64>,
        inputs: Array2<f64>,
        activations: Array2<f64>,
        gates: Array2<f64>,
        row_owner: Vec<usize>,
    ) -> Self {
        Self {
            dims,
            output_weights,
            inputs,
            activations,
            gates,
            row_owner,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn activations(&self) -> &Array2<f64> {
        &self.activations
    }

    /// Stacks blocks along the row axis. All blocks must have been computed at
    /// the same weights.
    pub fn concat(parts: &[MlpJacobian]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("jacobian block list"))?;
        for p in &parts[1..] {
            if p.dims != first.dims {
                return Err(Error::mismatch(
                    "jacobian block dims",
                    first.dims.param_count(),
                    p.dims.param_count(),
                ));
            }
            if p.output_weights != first.output_weights {
                return Err(Error::ProtocolViolation(
                    "jacobian blocks computed at different weights".into(),
                ));
            }
        }
        let cat = |f: fn(&MlpJacobian) -> &Array2<f64>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            concatenate(Axis(0), &views).expect("same widths")
        };
        Ok(Self {
            dims: first.dims,
            output_weights: first.output_weights.clone(),
            inputs: cat(|p| &p.inputs),
            activations: cat(|p| &p.activations),
            gates: cat(|p| &p.gates),
            row_owner: parts.iter().flat_map(|p| p.row_owner.iter().copied()).collect(),
        })
    }

    /// Materializes the dense `Ñ × d2 × d` tensor.
    pub fn to_dense(&self) -> JacobianStack {
        let d = self.dims;
        let n = self.inputs.nrows();
        let mut values = Array3::zeros((n, d.output_dim, d.param_count()));
        let (w1, b1, w2, b2) = (d.w1_range(), d.b1_range(), d.w2_range(), d.b2_range());
        for r in 0..n {
            let x = self.inputs.row(r);
            let a = self.activations.row(r);
            let g = self.gates.row(r);
            for j in 0..d.output_dim {
                let mut row = values.slice_mut(s![r, j, ..]);
                for h in 0..d.hidden_dim {
                    let coeff = self.output_weights[[j, h]] * g[h];
                    if coeff != 0.0 {
                        let start = w1.start + h * d.input_dim;
                        row.slice_mut(s![start..start + d.input_dim])
                            .assign(&x.mapv(|v| v * coeff));
                    }
                    row[b1.start + h] = coeff;
                }
                let start = w2.start + j * d.hidden_dim;
                row.slice_mut(s![start..start + d.hidden_dim]).assign(&a);
                row[b2.start + j] = 1.0;
            }
        }
        JacobianStack {
            values,
            row_owner: self.row_owner.clone(),
        }
    }

    /// `Σ_j W2[j, h]²` per hidden unit.
    fn output_weight_norms(&self) -> Array1<f64> {
        self.output_weights.mapv(|v| v * v).sum_axis(Axis(0))
    }
}

impl JacobianOperator for MlpJacobian {
    fn rows(&self) -> usize {
        self.inputs.nrows()
    }

    fn output_dim(&self) -> usize {
        self.dims.output_dim
    }

    fn param_dim(&self) -> usize {
        self.dims.param_count()
    }

    fn row_owner(&self) -> &[usize] {
        &self.row_owner
    }

    /// `d2 (a_m·a_n + 1) + (x_m·x_n + 1) Σ_h c_h g_mh g_nh`, `c_h = Σ_j W2[j,h]²`.
    fn frobenius_gram(&self) -> Array2<f64> {
        let d2 = self.dims.output_dim as f64;
        let mut out = self.activations.dot(&self.activations.t());
        out.mapv_inplace(|v| d2 * (v + 1.0));
        let weighted_gates = &self.gates * &self.output_weight_norms();
        let gate_term = weighted_gates.dot(&self.gates.t());
        let input_term = self.inputs.dot(&self.inputs.t());
        Zip::from(&mut out)
            .and(&gate_term)
            .and(&input_term)
            .for_each(|o, &g, &x| *o += (x + 1.0) * g);
        out
    }

    fn transpose_apply(&self, r: ArrayView2<'_, f64>) -> Array1<f64> {
        let d = self.dims;
        let mut out = Array1::zeros(d.param_count());
        let gw2 = r.t().dot(&self.activations);
        let gb2 = r.sum_axis(Axis(0));
        let mut back = r.dot(&self.output_weights);
        back *= &self.gates;
        let gw1 = back.t().dot(&self.inputs);
        let gb1 = back.sum_axis(Axis(0));
        out.slice_mut(s![d.w1_range()])
            .assign(&Array1::from_iter(gw1.iter().copied()));
        out.slice_mut(s![d.b1_range()]).assign(&gb1);
        out.slice_mut(s![d.w2_range()])
            .assign(&Array1::from_iter(gw2.iter().copied()));
        out.slice_mut(s![d.b2_range()]).assign(&gb2);
        out
    }

    fn apply(&self, delta: ArrayView1<'_, f64>) -> Array2<f64> {
        let d = self.dims;
        let dw1 = delta
            .slice(s![d.w1_range()])
            .into_shape_with_order((d.hidden_dim, d.input_dim))
            .expect("contiguous");
        let db1 = delta.slice(s![d.b1_range()]);
        let dw2 = delta
            .slice(s![d.w2_range()])
            .into_shape_with_order((d.output_dim, d.hidden_dim))
            .expect("contiguous");
        let db2 = delta.slice(s![d.b2_range()]);
        let mut hidden = self.inputs.dot(&dw1.t());
        hidden += &db1;
        hidden *= &self.gates;
        let mut out = hidden.dot(&self.output_weights.t());
        out += &self.activations.dot(&dw2.t());
        out += &db2;
        out
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::Array;
    use rand_distr::{Distribution, Normal, Uniform};

    use super::*;
    use crate::nn::{InitScheme, Mlp, WeightVector};
    use crate::seed;

    fn setup(n: usize) -> (Mlp, WeightVector, Array2<f64>) {
        let mlp = Mlp::new(ModelDims::new(5, 4, 3).unwrap());
        let mut v = mlp.init_weights(4, InitScheme::Shared, 0).into_array();
        let mut rng = seed::rng(99);
        let normal = Normal::new(0.0, 0.2).unwrap();
        for i in mlp.dims().b1_range() {
            v[i] = normal.sample(&mut rng);
        }
        let w = WeightVector::from_array(v);
        let u = Uniform::new(0.0, 1.0).unwrap();
        let x = Array::from_shape_fn((n, 5), |_| u.sample(&mut rng));
        (mlp, w, x)
    }

    #[test]
    fn factored_and_dense_agree() {
        let (mlp, w, x) = setup(7);
        let fac = mlp.jacobian_factors(&w, x.view(), 3).unwrap();
        let dense = fac.to_dense();
        assert_eq!(dense.row_owner(), &[3; 7]);

        let g1 = fac.frobenius_gram();
        let g2 = dense.frobenius_gram();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12 * b.abs().max(1.0));
        }

        let mut rng = seed::rng(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let r = Array::from_shape_fn((7, 3), |_| normal.sample(&mut rng));
        let t1 = fac.transpose_apply(r.view());
        let t2 = dense.transpose_apply(r.view());
        for (a, b) in t1.iter().zip(t2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let delta = Array::from_shape_fn(w.len(), |_| normal.sample(&mut rng));
        let a1 = fac.apply(delta.view());
        let a2 = dense.apply(delta.view());
        for (a, b) in a1.iter().zip(a2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn first_order_prediction_error_is_superlinear() {
        let (mlp, w, x) = setup(6);
        let fac = mlp.jacobian_factors(&w, x.view(), 0).unwrap();
        let f0 = mlp.forward(&w, x.view()).unwrap();
        let mut rng = seed::rng(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let delta = Array::from_shape_fn(w.len(), |_| normal.sample(&mut rng));
        let lin = fac.apply(delta.view());
        let mut errors = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5] {
            let mut moved = w.clone();
            moved.scaled_add(eps, &WeightVector::from_array(delta.clone()));
            let f = mlp.forward(&moved, x.view()).unwrap();
            let err = (&f - &f0 - &(&lin * eps)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            errors.push(err / eps);
        }
        // err/ε must shrink with ε (o(ε) remainder); gate flips are absent at
        // these scales so it shrinks roughly linearly.
        assert!(errors[1] <= errors[0] * 0.5 + 1e-12, "{errors:?}");
        assert!(errors[2] <= errors[1] * 0.5 + 1e-12, "{errors:?}");
    }

    #[test]
    fn concat_preserves_row_owners_and_rejects_mixed_weights() {
        let (mlp, w, x) = setup(4);
        let a = mlp.jacobian_factors(&w, x.slice(s![0..2, ..]), 1).unwrap();
        let b = mlp.jacobian_factors(&w, x.slice(s![2..4, ..]), 2).unwrap();
        let cat = MlpJacobian::concat(&[a.clone(), b]).unwrap();
        assert_eq!(cat.row_owner(), &[1, 1, 2, 2]);
        let whole = mlp.jacobian_factors(&w, x.view(), 0).unwrap();
        assert_eq!(cat.frobenius_gram(), whole.frobenius_gram());

        let other = mlp.init_weights(77, InitScheme::Shared, 0);
        let c = mlp.jacobian_factors(&other, x.view(), 3).unwrap();
        assert!(MlpJacobian::concat(&[a, c]).is_err());
    }

    #[test]
    fn dense_concat_stacks_rows() {
        let (mlp, w, x) = setup(3);
        let a = mlp.jacobian(&w, x.slice(s![0..1, ..])).unwrap();
        let b = mlp.jacobian(&w, x.slice(s![1..3, ..])).unwrap();
        let cat = JacobianStack::concat(&[a, b]).unwrap();
        assert_eq!(cat, mlp.jacobian(&w, x.view()).unwrap());
    }
}
