//! Shared density models `Q` over the latent space.
//!
//! Four families are provided: a fixed standard normal (no parameters), a
//! learnable diagonal Gaussian, a Gaussian mixture with softmax weights, and a
//! flow-based density built from a [`FlowSequence`] over a standard normal
//! base. All expose exact log-densities, sampling, and analytic gradients of
//! the log-density with respect to both their parameters and the input.

use serde::{Deserialize, Serialize};

use crate::error::{AubError, Result};
use crate::flows::{Flow, FlowArch, FlowSequence, FlowTape};
use crate::matrix::Matrix;
use crate::numeric::{log_sum_exp, ParameterStore, SeededRng};
use crate::scalar::{ln_two_pi, Scalar};

/// Lower bound applied to every learnable log-variance.
pub const LOG_VAR_FLOOR: f64 = -13.815_510_557_964_274; // ln(1e-6)

/// A density `Q(z)` with learnable parameters.
pub trait Density<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn arch(&self) -> DensityArch;

    fn params(&self) -> &ParameterStore<T>;

    fn params_mut(&mut self) -> &mut ParameterStore<T>;

    fn log_prob(&self, z: &Matrix<T>) -> Result<Vec<T>>;

    /// Log-density together with its gradient with respect to `z`.
    fn log_prob_with_score(&self, z: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)>;

    fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Matrix<T>>;

    /// As [`Density::log_prob`], caching what [`Density::backward`] needs.
    fn log_prob_train(&mut self, z: &Matrix<T>) -> Result<Vec<T>>;

    /// Consumes the cached pass. `grad_log_prob[i]` is `d loss / d log_prob_i`.
    /// Parameter gradients are added to the store when `accumulate` is set;
    /// returns `d loss / d z`.
    fn backward(&mut self, grad_log_prob: &[T], accumulate: bool) -> Result<Matrix<T>>;

    /// Closed-form differential entropy, when one exists.
    fn entropy(&self) -> Option<T> {
        None
    }
}

/// Structural description of a density, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityArch {
    StandardNormal { dim: usize },
    DiagonalGaussian { dim: usize },
    GaussianMixture { dim: usize, n_components: usize },
    Flow { flow: FlowArch },
}

impl DensityArch {
    pub fn dim(&self) -> usize {
        match self {
            DensityArch::StandardNormal { dim }
            | DensityArch::DiagonalGaussian { dim }
            | DensityArch::GaussianMixture { dim, .. } => *dim,
            DensityArch::Flow { flow } => flow.dim(),
        }
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(match self {
            DensityArch::StandardNormal { .. } => 0,
            DensityArch::DiagonalGaussian { dim } => 2 * dim,
            DensityArch::GaussianMixture { dim, n_components } => n_components * (2 * dim + 1),
            DensityArch::Flow { flow } => flow.num_params()?,
        })
    }

    pub fn build<T: Scalar>(&self, rng: &mut SeededRng) -> Result<Box<dyn Density<T>>> {
        Ok(match self {
            DensityArch::StandardNormal { dim } => Box::new(StandardNormal::new(*dim)),
            DensityArch::DiagonalGaussian { dim } => Box::new(DiagonalGaussian::standard(*dim)),
            DensityArch::GaussianMixture { dim, n_components } => {
                Box::new(GaussianMixture::new(*dim, *n_components, rng)?)
            }
            DensityArch::Flow { flow } => Box::new(FlowDensity::new(flow.build(rng)?)),
        })
    }
}

fn check_input<T: Scalar>(z: &Matrix<T>, dim: usize) -> Result<()> {
    z.check_width(dim)?;
    if let Some((r, c)) = z.first_non_finite() {
        return Err(AubError::NonFinite(format!("density input at row {r}, column {c}")));
    }
    Ok(())
}

fn standard_normal_log_prob<T: Scalar>(row: &[T]) -> T {
    let sq: T = row.iter().map(|&v| v * v).sum();
    -T::lit(0.5) * (sq + T::from_usize(row.len()).unwrap() * ln_two_pi::<T>())
}

/// `N(0, I)`; the singleton density class.
#[derive(Clone, Debug)]
pub struct StandardNormal<T> {
    dim: usize,
    store: ParameterStore<T>,
    cache: Option<Matrix<T>>,
}

impl<T: Scalar> StandardNormal<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            store: ParameterStore::new(),
            cache: None,
        }
    }
}

impl<T: Scalar> Density<T> for StandardNormal<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn arch(&self) -> DensityArch {
        DensityArch::StandardNormal { dim: self.dim }
    }

    fn params(&self) -> &ParameterStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    fn log_prob(&self, z: &Matrix<T>) -> Result<Vec<T>> {
        check_input(z, self.dim)?;
        Ok(z.rows_iter().map(standard_normal_log_prob).collect())
    }

    fn log_prob_with_score(&self, z: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
        let lp = self.log_prob(z)?;
        Ok((lp, z.map(|v| -v)))
    }

    fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Matrix<T>> {
        if n == 0 {
            return Err(AubError::InvalidArgument("sample count must be positive".into()));
        }
        Matrix::new(n, self.dim, (0..n * self.dim).map(|_| rng.normal()).collect())
    }

    fn log_prob_train(&mut self, z: &Matrix<T>) -> Result<Vec<T>> {
        let lp = self.log_prob(z)?;
        self.cache = Some(z.clone());
        Ok(lp)
    }

    fn backward(&mut self, grad_log_prob: &[T], _accumulate: bool) -> Result<Matrix<T>> {
        let mut z = self.cache.take().ok_or(AubError::MissingForwardCache)?;
        for (i, &g) in grad_log_prob.iter().enumerate().take(z.nrows()) {
            z.row_mut(i).iter_mut().for_each(|v| *v = -*v * g);
        }
        Ok(z)
    }

    fn entropy(&self) -> Option<T> {
        Some(T::lit(0.5) * T::from_usize(self.dim).unwrap() * (ln_two_pi::<T>() + T::one()))
    }
}

/// `N(mean, diag(exp(log_var)))` with both fields learnable.
#[derive(Clone, Debug)]
pub struct DiagonalGaussian<T> {
    dim: usize,
    store: ParameterStore<T>,
    cache: Option<Matrix<T>>,
}

impl<T: Scalar> DiagonalGaussian<T> {
    pub fn new(mean: &[T], log_var: &[T]) -> Result<Self> {
        if mean.len() != log_var.len() || mean.is_empty() {
            return Err(AubError::DimensionMismatch {
                expected: mean.len(),
                got: log_var.len(),
            });
        }
        let dim = mean.len();
        let mut store = ParameterStore::new();
        store.add_segment("mean", dim);
        store.add_segment("log_var", dim);
        store.values_mut()[..dim].copy_from_slice(mean);
        store.values_mut()[dim..].copy_from_slice(log_var);
        Ok(Self {
            dim,
            store,
            cache: None,
        })
    }

    /// `N(0, I)` starting point.
    pub fn standard(dim: usize) -> Self {
        Self::new(&vec![T::zero(); dim], &vec![T::zero(); dim]).expect("dim > 0")
    }

    pub fn mean(&self) -> &[T] {
        &self.store.values()[..self.dim]
    }

    /// Log-variances after the floor is applied.
    pub fn log_var(&self) -> Vec<T> {
        let floor = T::lit(LOG_VAR_FLOOR);
        self.store.values()[self.dim..]
            .iter()
            .map(|&v| v.max(floor))
            .collect()
    }

    fn eval(&self, z: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
        let mean = self.mean();
        let lv = self.log_var();
        let inv_var: Vec<T> = lv.iter().map(|&l| (-l).exp()).collect();
        let norm: T = lv.iter().copied().sum::<T>() + T::from_usize(self.dim).unwrap() * ln_two_pi::<T>();
        let mut score = Matrix::zeros(z.nrows(), self.dim);
        let mut lp = Vec::with_capacity(z.nrows());
        for i in 0..z.nrows() {
            let zi = z.row(i);
            let si = score.row_mut(i);
            let mut quad = T::zero();
            for c in 0..self.dim {
                let d = zi[c] - mean[c];
                quad += d * d * inv_var[c];
                si[c] = -d * inv_var[c];
            }
            lp.push(-T::lit(0.5) * (quad + norm));
        }
        (lp, score)
    }
}

impl<T: Scalar> Density<T> for DiagonalGaussian<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn arch(&self) -> DensityArch {
        DensityArch::DiagonalGaussian { dim: self.dim }
    }

    fn params(&self) -> &ParameterStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    fn log_prob(&self, z: &Matrix<T>) -> Result<Vec<T>> {
        check_input(z, self.dim)?;
        Ok(self.eval(z).0)
    }

    fn log_prob_with_score(&self, z: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
        check_input(z, self.dim)?;
        Ok(self.eval(z))
    }

    fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Matrix<T>> {
        if n == 0 {
            return Err(AubError::InvalidArgument("sample count must be positive".into()));
        }
        let sd: Vec<T> = self.log_var().iter().map(|&l| (l * T::lit(0.5)).exp()).collect();
        let mean = self.mean();
        let mut out = Matrix::zeros(n, self.dim);
        for i in 0..n {
            for (c, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = mean[c] + sd[c] * rng.normal::<T>();
            }
        }
        Ok(out)
    }

    fn log_prob_train(&mut self, z: &Matrix<T>) -> Result<Vec<T>> {
        check_input(z, self.dim)?;
        let (lp, _) = self.eval(z);
        self.cache = Some(z.clone());
        Ok(lp)
    }

    fn backward(&mut self, grad_log_prob: &[T], accumulate: bool) -> Result<Matrix<T>> {
        let z = self.cache.take().ok_or(AubError::MissingForwardCache)?;
        let dim = self.dim;
        let floor = T::lit(LOG_VAR_FLOOR);
        let raw_lv: Vec<T> = self.store.values()[dim..].to_vec();
        let mean: Vec<T> = self.mean().to_vec();
        let inv_var: Vec<T> = raw_lv.iter().map(|&l| (-l.max(floor)).exp()).collect();
        let mut gz = Matrix::zeros(z.nrows(), dim);
        let grads = self.store.grads_mut();
        for i in 0..z.nrows() {
            let g = grad_log_prob[i];
            let zi = z.row(i);
            let gzi = gz.row_mut(i);
            for c in 0..dim {
                let d = zi[c] - mean[c];
                let scaled = d * inv_var[c];
                gzi[c] = -scaled * g;
                if accumulate {
                    grads[c] += scaled * g;
                    if raw_lv[c] >= floor {
                        grads[dim + c] += T::lit(0.5) * (d * scaled - T::one()) * g;
                    }
                }
            }
        }
        Ok(gz)
    }

    fn entropy(&self) -> Option<T> {
        let lv: T = self.log_var().iter().copied().sum();
        Some(T::lit(0.5) * (T::from_usize(self.dim).unwrap() * (ln_two_pi::<T>() + T::one()) + lv))
    }
}

/// Mixture of `K` diagonal Gaussians; weights are `softmax(logits)`.
#[derive(Clone, Debug)]
pub struct GaussianMixture<T> {
    dim: usize,
    k: usize,
    store: ParameterStore<T>,
    cache: Option<(Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> GaussianMixture<T> {
    /// Means drawn from `N(0, I)`, unit variances, uniform weights.
    pub fn new(dim: usize, n_components: usize, rng: &mut SeededRng) -> Result<Self> {
        if dim == 0 || n_components == 0 {
            return Err(AubError::InvalidArgument(
                "mixture needs positive dim and component count".into(),
            ));
        }
        let mut store = ParameterStore::new();
        let off = store.add_segment("means", n_components * dim);
        store.add_segment("log_vars", n_components * dim);
        store.add_segment("logits", n_components);
        for v in &mut store.values_mut()[off..off + n_components * dim] {
            *v = rng.normal();
        }
        Ok(Self {
            dim,
            k: n_components,
            store,
            cache: None,
        })
    }

    /// Explicit parameters: `means` and `log_vars` are `K x dim`.
    pub fn from_parts(means: &[Vec<T>], log_vars: &[Vec<T>], logits: &[T]) -> Result<Self> {
        let k = means.len();
        let dim = means.first().map_or(0, Vec::len);
        if k == 0 || dim == 0 || log_vars.len() != k || logits.len() != k {
            return Err(AubError::InvalidArgument("inconsistent mixture parameters".into()));
        }
        let mut mix = Self::new(dim, k, &mut SeededRng::new(0))?;
        let v = mix.store.values_mut();
        for j in 0..k {
            if means[j].len() != dim || log_vars[j].len() != dim {
                return Err(AubError::DimensionMismatch {
                    expected: dim,
                    got: means[j].len().min(log_vars[j].len()),
                });
            }
            v[j * dim..(j + 1) * dim].copy_from_slice(&means[j]);
            v[k * dim + j * dim..k * dim + (j + 1) * dim].copy_from_slice(&log_vars[j]);
        }
        v[2 * k * dim..].copy_from_slice(logits);
        Ok(mix)
    }

    pub fn n_components(&self) -> usize {
        self.k
    }

    fn means(&self) -> &[T] {
        &self.store.values()[..self.k * self.dim]
    }

    fn raw_log_vars(&self) -> &[T] {
        &self.store.values()[self.k * self.dim..2 * self.k * self.dim]
    }

    fn logits(&self) -> &[T] {
        &self.store.values()[2 * self.k * self.dim..]
    }

    pub fn weights(&self) -> Vec<T> {
        crate::numeric::softmax(self.logits()).expect("K > 0")
    }

    /// Returns per-row log-density, responsibilities (`n x K`) and score.
    fn eval(&self, z: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>, Matrix<T>)> {
        let (k, dim) = (self.k, self.dim);
        let floor = T::lit(LOG_VAR_FLOOR);
        let means = self.means();
        let lv: Vec<T> = self.raw_log_vars().iter().map(|&v| v.max(floor)).collect();
        let inv_var: Vec<T> = lv.iter().map(|&l| (-l).exp()).collect();
        let log_w_norm = log_sum_exp(self.logits())?;
        let consts: Vec<T> = (0..k)
            .map(|j| {
                let s: T = lv[j * dim..(j + 1) * dim].iter().copied().sum();
                self.logits()[j] - log_w_norm - T::lit(0.5) * (s + T::from_usize(dim).unwrap() * ln_two_pi::<T>())
            })
            .collect();
        let n = z.nrows();
        let mut lp = Vec::with_capacity(n);
        let mut resp = Matrix::zeros(n, k);
        let mut score = Matrix::zeros(n, dim);
        let mut comp = vec![T::zero(); k];
        for i in 0..n {
            let zi = z.row(i);
            for j in 0..k {
                let mut quad = T::zero();
                for c in 0..dim {
                    let d = zi[c] - means[j * dim + c];
                    quad += d * d * inv_var[j * dim + c];
                }
                comp[j] = consts[j] - T::lit(0.5) * quad;
            }
            let l = log_sum_exp(&comp)?;
            lp.push(l);
            let ri = resp.row_mut(i);
            for j in 0..k {
                ri[j] = (comp[j] - l).exp();
            }
            let si = score.row_mut(i);
            for j in 0..k {
                let r = resp.get(i, j);
                for c in 0..dim {
                    si[c] -= r * (zi[c] - means[j * dim + c]) * inv_var[j * dim + c];
                }
            }
        }
        Ok((lp, resp, score))
    }
}

impl<T: Scalar> Density<T> for GaussianMixture<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn arch(&self) -> DensityArch {
        DensityArch::GaussianMixture {
            dim: self.dim,
            n_components: self.k,
        }
    }

    fn params(&self) -> &ParameterStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    fn log_prob(&self, z: &Matrix<T>) -> Result<Vec<T>> {
        check_input(z, self.dim)?;
        Ok(self.eval(z)?.0)
    }

    fn log_prob_with_score(&self, z: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
        check_input(z, self.dim)?;
        let (lp, _, score) = self.eval(z)?;
        Ok((lp, score))
    }

    fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Matrix<T>> {
        if n == 0 {
            return Err(AubError::InvalidArgument("sample count must be positive".into()));
        }
        let w: Vec<f64> = self.weights().iter().map(|v| v.to_f64_lossy()).collect();
        let means = self.means();
        let floor = T::lit(LOG_VAR_FLOOR);
        let sd: Vec<T> = self
            .raw_log_vars()
            .iter()
            .map(|&l| (l.max(floor) * T::lit(0.5)).exp())
            .collect();
        let mut out = Matrix::zeros(n, self.dim);
        for i in 0..n {
            let u = rng.uniform(0.0, 1.0);
            let mut acc = 0.0;
            let mut j = self.k - 1;
            for (idx, &wj) in w.iter().enumerate() {
                acc += wj;
                if u < acc {
                    j = idx;
                    break;
                }
            }
            for (c, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = means[j * self.dim + c] + sd[j * self.dim + c] * rng.normal::<T>();
            }
        }
        Ok(out)
    }

    fn log_prob_train(&mut self, z: &Matrix<T>) -> Result<Vec<T>> {
        check_input(z, self.dim)?;
        let (lp, resp, _) = self.eval(z)?;
        self.cache = Some((z.clone(), resp));
        Ok(lp)
    }

    fn backward(&mut self, grad_log_prob: &[T], accumulate: bool) -> Result<Matrix<T>> {
        let (z, resp) = self.cache.take().ok_or(AubError::MissingForwardCache)?;
        let (k, dim) = (self.k, self.dim);
        let floor = T::lit(LOG_VAR_FLOOR);
        let means = self.means().to_vec();
        let raw_lv = self.raw_log_vars().to_vec();
        let inv_var: Vec<T> = raw_lv.iter().map(|&l| (-l.max(floor)).exp()).collect();
        let weights = self.weights();
        let mut gz = Matrix::zeros(z.nrows(), dim);
        let grads = self.store.grads_mut();
        for i in 0..z.nrows() {
            let g = grad_log_prob[i];
            let zi = z.row(i);
            for j in 0..k {
                let r = resp.get(i, j) * g;
                for c in 0..dim {
                    let idx = j * dim + c;
                    let d = zi[c] - means[idx];
                    let scaled = d * inv_var[idx];
                    gz.row_mut(i)[c] -= r * scaled;
                    if accumulate {
                        grads[idx] += r * scaled;
                        if raw_lv[idx] >= floor {
                            grads[k * dim + idx] += T::lit(0.5) * r * (d * scaled - T::one());
                        }
                    }
                }
                if accumulate {
                    grads[2 * k * dim + j] += r - weights[j] * g;
                }
            }
        }
        Ok(gz)
    }
}

/// `log Q(z) = log N(f(z); 0, I) + ln |det J_f(z)|` for an invertible `f`.
#[derive(Clone, Debug)]
pub struct FlowDensity<T> {
    flow: FlowSequence<T>,
    cache: Option<(Matrix<T>, FlowTape<T>)>,
}

impl<T: Scalar> FlowDensity<T> {
    pub fn new(flow: FlowSequence<T>) -> Self {
        Self { flow, cache: None }
    }

    pub fn flow(&self) -> &FlowSequence<T> {
        &self.flow
    }

    fn grad_upstream(u: &Matrix<T>, grad_log_prob: &[T]) -> Matrix<T> {
        let mut gu = u.clone();
        for (i, &g) in grad_log_prob.iter().enumerate().take(u.nrows()) {
            gu.row_mut(i).iter_mut().for_each(|v| *v = -*v * g);
        }
        gu
    }
}

impl<T: Scalar> Density<T> for FlowDensity<T> {
    fn dim(&self) -> usize {
        self.flow.dim()
    }

    fn arch(&self) -> DensityArch {
        DensityArch::Flow { flow: self.flow.arch() }
    }

    fn params(&self) -> &ParameterStore<T> {
        self.flow.params()
    }

    fn params_mut(&mut self) -> &mut ParameterStore<T> {
        self.flow.params_mut()
    }

    fn log_prob(&self, z: &Matrix<T>) -> Result<Vec<T>> {
        check_input(z, self.dim())?;
        let (u, ld) = self.flow.forward(z)?;
        Ok(u.rows_iter()
            .zip(ld)
            .map(|(r, l)| standard_normal_log_prob(r) + l)
            .collect())
    }

    fn log_prob_with_score(&self, z: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
        check_input(z, self.dim())?;
        let (u, ld, tape) = self.flow.forward_with_tape(z)?;
        let lp: Vec<T> = u
            .rows_iter()
            .zip(&ld)
            .map(|(r, &l)| standard_normal_log_prob(r) + l)
            .collect();
        let ones = vec![T::one(); z.nrows()];
        let gu = Self::grad_upstream(&u, &ones);
        let score = self.flow.backward_with_tape(&tape, &gu, &ones, None)?;
        Ok((lp, score))
    }

    fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Matrix<T>> {
        let base = StandardNormal::new(self.dim()).sample(n, rng)?;
        self.flow.inverse(&base)
    }

    fn log_prob_train(&mut self, z: &Matrix<T>) -> Result<Vec<T>> {
        check_input(z, self.dim())?;
        let (u, ld, tape) = self.flow.forward_with_tape(z)?;
        let lp = u
            .rows_iter()
            .zip(&ld)
            .map(|(r, &l)| standard_normal_log_prob(r) + l)
            .collect();
        self.cache = Some((u, tape));
        Ok(lp)
    }

    fn backward(&mut self, grad_log_prob: &[T], accumulate: bool) -> Result<Matrix<T>> {
        let (u, tape) = self.cache.take().ok_or(AubError::MissingForwardCache)?;
        let gu = Self::grad_upstream(&u, grad_log_prob);
        if accumulate {
            self.flow.backward_accumulate(&tape, &gu, grad_log_prob)
        } else {
            self.flow.backward_with_tape(&tape, &gu, grad_log_prob, None)
        }
    }
}
