//! Empirical NTK Gram matrices and closed-form linearized training dynamics.
//!
//! For a stack of Jacobians `J` (Ñ rows, d2 outputs) the kernel is
//! `H[m, n] = ⟨J(x_m), J(x_n)⟩_F / d2`. Predictions evolve as
//!
//! ```text
//! f(t) = (I − E(t)) Y + E(t) f(0),   E(t) = exp(−(η t / Ñ) H)
//! ```
//!
//! and weights are recovered from the accumulated residual
//!
//! ```text
//! R(t) = η / (Ñ d2) · Σ_{u<t} (Y − f(u)),   w(t) = w_base + Σ_j J[:, j, :]ᵀ R[:, j]
//! ```
//!
//! The exponent carries a negative sign so that `f(t) → Y` for a PSD kernel.
//! One symmetric eigendecomposition `H = Q Λ Qᵀ` serves every timestep: in
//! the eigenbasis `E(t)` is diagonal and the sum over `u` is a geometric
//! series per eigenvalue, evaluated in closed form.

use std::collections::BTreeMap;

use faer::diag::Diag;
use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::evd::{self_adjoint_evd, self_adjoint_evd_scratch, ComputeEigenvectors};
use faer::{Mat, Par};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{JacobianOperator, WeightVector};

/// Relative tolerance below zero for eigenvalues that are clamped to 0.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Predictions `f(t)` keyed by timestep.
pub type PredictionSeries = BTreeMap<usize, Array2<f64>>;

/// Symmetric positive semidefinite Gram matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel(Array2<f64>);

impl Kernel {
    /// Wraps a square matrix, replacing it by its symmetric part.
    pub fn from_matrix(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::mismatch("kernel shape", m.nrows(), m.ncols()));
        }
        let sym = (&m + &m.t()) * 0.5;
        Ok(Self(sym))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// `H = (1/d2) ⟨J(x_m), J(x_n)⟩_F`, symmetrized.
pub fn gram<J: JacobianOperator + ?Sized>(jac: &J) -> Kernel {
    let mut raw = jac.frobenius_gram();
    raw /= jac.output_dim() as f64;
    Kernel::from_matrix(raw).expect("frobenius gram is square")
}

/// Eigendecomposition of a kernel, eigenvalues ascending and clamped at 0.
#[derive(Clone, Debug)]
pub struct Spectrum {
    eigenvalues: Array1<f64>,
    eigenvectors: Array2<f64>,
}

impl Spectrum {
    pub fn of(kernel: &Kernel) -> Result<Self> {
        let h = kernel.matrix();
        let n = h.nrows();
        if n == 0 {
            return Ok(Self {
                eigenvalues: Array1::zeros(0),
                eigenvectors: Array2::zeros((0, 0)),
            });
        }
        let a = Mat::<f64>::from_fn(n, n, |i, j| h[[i, j]]);
        let mut u = Mat::<f64>::zeros(n, n);
        let mut s = Diag::<f64>::zeros(n);
        // Sequential: results must not depend on the worker pool size.
        let par = Par::Seq;
        let mut buf = MemBuffer::new(self_adjoint_evd_scratch::<f64>(
            n,
            ComputeEigenvectors::Yes,
            par,
            Default::default(),
        ));
        self_adjoint_evd(
            a.as_ref(),
            s.as_mut(),
            Some(u.as_mut()),
            par,
            MemStack::new(&mut buf),
            Default::default(),
        )
        .map_err(|_| Error::EigenNoConvergence)?;

        let mut eigenvalues = Array1::from_iter(s.column_vector().iter().copied());
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::EigenNoConvergence);
        }
        let scale = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let smallest = eigenvalues[0];
        if smallest < -PSD_TOLERANCE * scale {
            return Err(Error::NotPositiveSemidefinite {
                eigenvalue: smallest,
                largest: eigenvalues[n - 1],
            });
        }
        eigenvalues.mapv_inplace(|v| v.max(0.0));
        let eigenvectors = Array2::from_shape_fn((n, n), |(i, j)| u[(i, j)]);
        Ok(Self {
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &Array2<f64> {
        &self.eigenvectors
    }

    /// `Q diag(g(λ)) Qᵀ`.
    pub fn map(&self, g: impl Fn(f64) -> f64) -> Array2<f64> {
        let scaled = &self.eigenvectors * &self.eigenvalues.mapv(g);
        scaled.dot(&self.eigenvectors.t())
    }

    /// Coordinates of the columns of `m` in the eigenbasis, `Qᵀ m`.
    pub fn project(&self, m: ArrayView2<'_, f64>) -> Array2<f64> {
        self.eigenvectors.t().dot(&m)
    }

    /// `Q diag(g(λ)) coords` for coordinates already in the eigenbasis.
    pub fn reconstruct(&self, coords: &Array2<f64>, g: impl Fn(f64) -> f64) -> Array2<f64> {
        let weights = self.eigenvalues.mapv(g).insert_axis(Axis(1));
        self.eigenvectors.dot(&(coords * &weights))
    }
}

/// `exp(−s H)` through the eigendecomposition.
pub fn expm_sym(kernel: &Kernel, s: f64) -> Result<Array2<f64>> {
    Ok(Spectrum::of(kernel)?.map(|l| (-s * l).exp()))
}

/// `Σ_{u=0}^{t−1} exp(−u x)` for `x ≥ 0`.
pub fn geometric_sum(x: f64, t: usize) -> f64 {
    if x == 0.0 || t == 0 {
        return t as f64;
    }
    (-(t as f64) * x).exp_m1() / (-x).exp_m1()
}

/// Closed-form linearized dynamics for one kernel, targets and initial
/// predictions.
#[derive(Clone, Debug)]
pub struct ResidualDynamics {
    spectrum: Spectrum,
    targets: Array2<f64>,
    /// `Qᵀ (Y − f(0))`
    residual_modes: Array2<f64>,
    eta: f64,
}

impl ResidualDynamics {
    pub fn new(kernel: &Kernel, targets: &Array2<f64>, initial: &Array2<f64>, eta: f64) -> Result<Self> {
        let n = kernel.dim();
        if targets.nrows() != n {
            return Err(Error::mismatch("target rows", n, targets.nrows()));
        }
        if initial.dim() != targets.dim() {
            return Err(Error::mismatch(
                "initial prediction shape",
                targets.len(),
                initial.len(),
            ));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid("eta", format!("must be positive, got {eta}")));
        }
        let spectrum = Spectrum::of(kernel)?;
        let residual_modes = spectrum.project((targets - initial).view());
        Ok(Self {
            spectrum,
            targets: targets.clone(),
            residual_modes,
            eta,
        })
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn rows(&self) -> usize {
        self.targets.nrows()
    }

    /// Per-eigenvalue step `η λ / Ñ`.
    fn rate(&self) -> impl Fn(f64) -> f64 {
        let scale = self.eta / self.rows().max(1) as f64;
        move |l| scale * l
    }

    /// `f(t) = Y − E(t) (Y − f(0))`.
    pub fn predictions(&self, t: usize) -> Array2<f64> {
        let rate = self.rate();
        let decayed = self
            .spectrum
            .reconstruct(&self.residual_modes, |l| (-(t as f64) * rate(l)).exp());
        &self.targets - &decayed
    }

    /// `R(t) = η/(Ñ d2) Σ_{u<t} (Y − f(u))`, summed per eigenvalue.
    pub fn accumulated_residual(&self, t: usize) -> Array2<f64> {
        let rate = self.rate();
        let d2 = self.targets.ncols() as f64;
        let scale = self.eta / (self.rows() as f64 * d2);
        let mut r = self
            .spectrum
            .reconstruct(&self.residual_modes, |l| geometric_sum(rate(l), t));
        r *= scale;
        r
    }
}

fn check_grid(t_grid: &[usize]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::Empty("timestep grid"));
    }
    if t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("t_grid", "timesteps must be strictly ascending"));
    }
    Ok(())
}

/// Predictions `f(t)` for every `t` in the grid, from one eigendecomposition.
pub fn evolve_residuals(
    kernel: &Kernel,
    targets: &Array2<f64>,
    initial: &Array2<f64>,
    eta: f64,
    t_grid: &[usize],
) -> Result<PredictionSeries> {
    check_grid(t_grid)?;
    let dynamics = ResidualDynamics::new(kernel, targets, initial, eta)?;
    Ok(t_grid.iter().map(|&t| (t, dynamics.predictions(t))).collect())
}

/// Literal accumulation `η/(Ñ d2) Σ_{u=0}^{t−1} (Y − f(u))` from a series that
/// holds every integer timestep below `t`.
pub fn accumulate_residuals(
    targets: &Array2<f64>,
    series: &PredictionSeries,
    eta: f64,
    t: usize,
) -> Result<Array2<f64>> {
    let (n, d2) = targets.dim();
    let mut sum = Array2::zeros((n, d2));
    for u in 0..t {
        let f = series.get(&u).ok_or(Error::MissingTimestep(u))?;
        if f.dim() != (n, d2) {
            return Err(Error::mismatch("prediction shape", n * d2, f.len()));
        }
        sum += targets;
        sum -= f;
    }
    sum *= eta / (n as f64 * d2 as f64);
    Ok(sum)
}

/// `w_base + Σ_j J[:, j, :]ᵀ R[:, j]`.
pub fn recover_weights<J: JacobianOperator + ?Sized>(
    jac: &J,
    residual: &Array2<f64>,
    w_base: &WeightVector,
) -> Result<WeightVector> {
    if residual.dim() != (jac.rows(), jac.output_dim()) {
        return Err(Error::mismatch(
            "residual shape",
            jac.rows() * jac.output_dim(),
            residual.len(),
        ));
    }
    if w_base.len() != jac.param_dim() {
        return Err(Error::mismatch("base weights", jac.param_dim(), w_base.len()));
    }
    let mut w = w_base.clone();
    w.scaled_add(1.0, &WeightVector::from_array(jac.transpose_apply(residual.view())));
    Ok(w)
}

/// Squared-error loss `‖f − Y‖²_F / (Ñ d2)`.
pub fn residual_loss(f: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let n = targets.len().max(1) as f64;
    (f - targets).mapv(|v| v * v).sum() / n
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestepChoice {
    pub t: usize,
    pub loss_curve: Vec<(usize, f64)>,
}

/// Lowest-loss timestep; ties go to the smaller `t`.
pub fn select_timestep(series: &PredictionSeries, targets: &Array2<f64>) -> Result<TimestepChoice> {
    let loss_curve: Vec<(usize, f64)> = series
        .iter()
        .map(|(&t, f)| (t, residual_loss(f, targets)))
        .collect();
    let &(t, _) = loss_curve
        .iter()
        .fold(None, |best: Option<&(usize, f64)>, cur| match best {
            Some(b) if b.1 <= cur.1 => Some(b),
            _ => Some(cur),
        })
        .ok_or(Error::Empty("prediction series"))?;
    Ok(TimestepChoice { t, loss_curve })
}

#[derive(Clone, Debug)]
pub struct EvolutionResult {
    pub f_series: PredictionSeries,
    /// `R(t)` for every grid timestep.
    pub residuals: BTreeMap<usize, Array2<f64>>,
    pub loss_curve: Vec<(usize, f64)>,
    pub chosen_t: usize,
    pub new_weights: WeightVector,
}

/// Full evolution step: kernel, dynamics over the grid, timestep selection
/// and weight recovery at the chosen timestep.
pub fn evolve<J: JacobianOperator + ?Sized>(
    jac: &J,
    targets: &Array2<f64>,
    initial: &Array2<f64>,
    w_base: &WeightVector,
    eta: f64,
    t_grid: &[usize],
) -> Result<EvolutionResult> {
    check_grid(t_grid)?;
    let kernel = gram(jac);
    let dynamics = ResidualDynamics::new(&kernel, targets, initial, eta)?;
    let f_series: PredictionSeries = t_grid.iter().map(|&t| (t, dynamics.predictions(t))).collect();
    let residuals: BTreeMap<usize, Array2<f64>> = t_grid
        .iter()
        .map(|&t| (t, dynamics.accumulated_residual(t)))
        .collect();
    let choice = select_timestep(&f_series, targets)?;
    let new_weights = recover_weights(jac, &residuals[&choice.t], w_base)?;
    if !new_weights.is_finite() {
        return Err(Error::invalid("weights", "evolution produced non-finite weights"));
    }
    Ok(EvolutionResult {
        f_series,
        residuals,
        loss_curve: choice.loss_curve,
        chosen_t: choice.t,
        new_weights,
    })
}
