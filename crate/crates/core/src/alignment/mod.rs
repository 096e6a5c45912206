//! The alignment objective, its min-min trainer, and the quadrature oracles
//! that check the bound it optimizes.

pub mod oracle;
mod train;

pub use train::{train, train_with_final, validate_mode, EpochRecord, Mode, TrainConfig, TrainTrace, Trainer};

use rayon::prelude::*;

use crate::density::Density;
use crate::error::{AubError, Result};
use crate::flows::Flow;
use crate::matrix::Matrix;
use crate::numeric::ParamAccess;
use crate::scalar::Scalar;

/// `k` flows `T_j`, one shared density `Q`, and a probability vector `w`.
pub struct AlignmentModel<T: Scalar> {
    flows: Vec<Box<dyn Flow<T>>>,
    density: Box<dyn Density<T>>,
    weights: Vec<T>,
}

impl<T: Scalar> std::fmt::Debug for AlignmentModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AlignmentModel")
            .field("flows", &self.flows.iter().map(|fl| fl.arch()).collect::<Vec<_>>())
            .field("density", &self.density.arch())
            .field("weights", &self.weights)
            .finish()
    }
}

impl<T: Scalar> AlignmentModel<T> {
    /// `weights` defaults to uniform `1/k`.
    pub fn new(flows: Vec<Box<dyn Flow<T>>>, density: Box<dyn Density<T>>, weights: Option<Vec<T>>) -> Result<Self> {
        let k = flows.len();
        if k == 0 {
            return Err(AubError::InvalidArgument("alignment needs at least one flow".into()));
        }
        let dim = density.dim();
        for f in &flows {
            if f.dim() != dim {
                return Err(AubError::DimensionMismatch {
                    expected: dim,
                    got: f.dim(),
                });
            }
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != k {
                    return Err(AubError::DimensionMismatch { expected: k, got: w.len() });
                }
                if w.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
                    return Err(AubError::InvalidArgument("weights must be strictly positive".into()));
                }
                let s: T = w.iter().copied().sum();
                if (s - T::one()).abs() > T::lit(1e-6) {
                    return Err(AubError::InvalidArgument(format!("weights sum to {s}, not 1")));
                }
                w
            }
            None => vec![T::one() / T::from_usize(k).unwrap(); k],
        };
        Ok(Self {
            flows,
            density,
            weights,
        })
    }

    pub fn k(&self) -> usize {
        self.flows.len()
    }

    pub fn dim(&self) -> usize {
        self.density.dim()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn flows(&self) -> &[Box<dyn Flow<T>>] {
        &self.flows
    }

    pub fn flow(&self, j: usize) -> &dyn Flow<T> {
        self.flows[j].as_ref()
    }

    pub fn flow_mut(&mut self, j: usize) -> &mut dyn Flow<T> {
        self.flows[j].as_mut()
    }

    pub fn density(&self) -> &dyn Density<T> {
        self.density.as_ref()
    }

    pub fn density_mut(&mut self) -> &mut dyn Density<T> {
        self.density.as_mut()
    }

    /// Latents `T_j(x)` and log-determinants for one domain.
    pub fn encode(&self, j: usize, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
        self.check_domain(j)?;
        self.flows[j].forward(x)
    }

    fn check_domain(&self, j: usize) -> Result<()> {
        if j >= self.k() {
            return Err(AubError::InvalidArgument(format!(
                "domain index {j} out of range for k = {}",
                self.k()
            )));
        }
        Ok(())
    }

    /// Per-domain `mean_i[-ln|J_{T_j}(x_i)| - ln Q(T_j(x_i))]`, unweighted.
    pub fn domain_losses(&self, batches: &[Matrix<T>]) -> Result<Vec<T>> {
        if batches.len() != self.k() {
            return Err(AubError::DimensionMismatch {
                expected: self.k(),
                got: batches.len(),
            });
        }
        batches
            .par_iter()
            .enumerate()
            .map(|(j, x)| {
                if x.is_empty() {
                    return Err(AubError::InvalidArgument(format!("batch for domain {j} is empty")));
                }
                x.check_width(self.dim())?;
                let (z, ld) = self.flows[j].forward(x)?;
                let lp = self.density.log_prob(&z)?;
                let mut acc = T::zero();
                for (i, (&l, &p)) in ld.iter().zip(&lp).enumerate() {
                    let term = -l - p;
                    if !term.is_finite() {
                        return Err(AubError::NonFinite(format!("loss term for domain {j}, sample {i}")));
                    }
                    acc += term;
                }
                Ok(acc / T::from_usize(x.nrows()).unwrap())
            })
            .collect()
    }

    /// `sum_j w_j mean_i[-ln|J_{T_j}(x_i)| - ln Q(T_j(x_i))]` over one batch per domain.
    pub fn aub_loss(&self, batches: &[Matrix<T>]) -> Result<T> {
        Ok(self
            .domain_losses(batches)?
            .iter()
            .zip(&self.weights)
            .map(|(&l, &w)| w * l)
            .sum())
    }

    /// Held-out alignment upper bound in nats; same formula as [`Self::aub_loss`].
    pub fn aub_metric(&self, test_batches: &[Matrix<T>]) -> Result<T> {
        self.aub_loss(test_batches)
    }

    /// Parameter counts `(per flow, density)`.
    pub fn parameter_counts(&self) -> (Vec<usize>, usize) {
        (
            self.flows.iter().map(|f| f.params().len()).collect(),
            self.density.params().len(),
        )
    }

    /// All parameters: flows in order, then the density.
    pub fn parameter_vector(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for f in &self.flows {
            out.extend_from_slice(f.params().values());
        }
        out.extend_from_slice(self.density.params().values());
        out
    }

    pub fn load_parameter_vector(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(AubError::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut off = 0;
        for f in &mut self.flows {
            let n = f.params().len();
            f.params_mut().load_values(&values[off..off + n])?;
            off += n;
        }
        self.density.params_mut().load_values(&values[off..])
    }

    /// Gradient of everything, in [`Self::parameter_vector`] order.
    pub fn gradient_vector(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for f in &self.flows {
            out.extend_from_slice(f.params().grads());
        }
        out.extend_from_slice(self.density.params().grads());
        out
    }

    pub fn zero_grads(&mut self) {
        for f in &mut self.flows {
            f.params_mut().zero_grads();
        }
        self.density.params_mut().zero_grads();
    }

    fn locate(&self, mut i: usize) -> (Option<usize>, usize) {
        for (j, f) in self.flows.iter().enumerate() {
            let n = f.params().len();
            if i < n {
                return (Some(j), i);
            }
            i -= n;
        }
        (None, i)
    }
}

impl<T: Scalar> ParamAccess<T> for AlignmentModel<T> {
    fn num_params(&self) -> usize {
        self.flows.iter().map(|f| f.params().len()).sum::<usize>() + self.density.params().len()
    }

    fn get_param(&self, i: usize) -> T {
        match self.locate(i) {
            (Some(j), o) => self.flows[j].params().values()[o],
            (None, o) => self.density.params().values()[o],
        }
    }

    fn set_param(&mut self, i: usize, v: T) {
        match self.locate(i) {
            (Some(j), o) => self.flows[j].params_mut().values_mut()[o] = v,
            (None, o) => self.density.params_mut().values_mut()[o] = v,
        }
    }
}
