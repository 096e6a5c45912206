//! Parameter storage, optimizers, seeded randomness and the numerically
//! stable primitives everything else is built on.
//!
//! Every learnable component owns one [`ParameterStore`]: a flat value array,
//! a gradient array of the same length, and named segments that partition it.
//! Gradients are accumulated by the components' backward passes and consumed
//! (then zeroed) by [`Optimizer::step`].
//!
//! [`finite_difference_gradient`] is the central-difference oracle that every
//! analytic gradient in the crate is tested against.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AubError, Result};
use crate::scalar::Scalar;

/// Stable `log Σ exp(v)`.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> Result<T> {
    let max = values
        .iter()
        .copied()
        .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or(AubError::EmptyLogSumExp)?;
    if max == T::neg_infinity() {
        return Ok(max);
    }
    let s: T = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + s.ln())
}

/// Softmax through the log-sum-exp path; output sums to one for any logits.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    let lse = log_sum_exp(logits)?;
    Ok(logits.iter().map(|&l| (l - lse).exp()).collect())
}

/// Named contiguous slice of a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    values: Vec<T>,
    grads: Vec<T>,
    segments: Vec<Segment>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            segments: Vec::new(),
        }
    }

    /// Appends a zero-initialised segment and returns its offset.
    pub fn add_segment(&mut self, name: impl Into<String>, len: usize) -> usize {
        let offset = self.values.len();
        self.values.resize(offset + len, T::zero());
        self.grads.resize(offset + len, T::zero());
        self.segments.push(Segment {
            name: name.into(),
            offset,
            len,
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grads(&self) -> &[T] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [T] {
        &mut self.grads
    }

    /// Simultaneous read access to values and write access to gradients.
    pub fn split_mut(&mut self) -> (&[T], &mut [T]) {
        (&self.values, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Overwrites all values; lengths must agree.
    pub fn load_values(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(AubError::DimensionMismatch {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }
}

/// Flat coordinate access to something that holds parameters.
///
/// Implemented by [`ParameterStore`] and by composite models so the
/// finite-difference oracle can perturb either.
pub trait ParamAccess<T> {
    fn num_params(&self) -> usize;
    fn get_param(&self, i: usize) -> T;
    fn set_param(&mut self, i: usize, v: T);
}

impl<T: Scalar> ParamAccess<T> for ParameterStore<T> {
    fn num_params(&self) -> usize {
        self.values.len()
    }

    fn get_param(&self, i: usize) -> T {
        self.values[i]
    }

    fn set_param(&mut self, i: usize, v: T) {
        self.values[i] = v;
    }
}

/// Central-difference gradient of `loss` with respect to every coordinate of
/// `params`. Coordinates are restored bit-exactly after each probe.
pub fn finite_difference_gradient<T, P, F>(params: &mut P, eps: T, mut loss: F) -> Result<Vec<T>>
where
    T: Scalar,
    P: ParamAccess<T> + ?Sized,
    F: FnMut(&P) -> T,
{
    if !(eps > T::zero() && eps <= T::lit(1e-2)) {
        return Err(AubError::InvalidArgument(format!(
            "finite-difference step {eps} outside (0, 1e-2]"
        )));
    }
    let two_eps = eps + eps;
    let mut grad = Vec::with_capacity(params.num_params());
    for i in 0..params.num_params() {
        let orig = params.get_param(i);
        params.set_param(i, orig + eps);
        let plus = loss(params);
        params.set_param(i, orig - eps);
        let minus = loss(params);
        params.set_param(i, orig);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AubError::NonFiniteProbe { coordinate: i });
        }
        grad.push((plus - minus) / two_eps);
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AubError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(AubError::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Optimizer state for one [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step_count: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        let moments = match config.kind {
            OptimizerKind::Adam => n_params,
            OptimizerKind::Sgd => 0,
        };
        Ok(Self {
            config,
            first_moment: vec![T::zero(); moments],
            second_moment: vec![T::zero(); moments],
            step_count: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one descent step using the accumulated gradients, then zeroes
    /// them. Rejects non-finite gradients before touching any value.
    pub fn step(&mut self, params: &mut ParameterStore<T>) -> Result<()> {
        if let Some(index) = params.grads().iter().position(|g| !g.is_finite()) {
            return Err(AubError::NonFiniteGradient { index });
        }
        let lr = T::lit(self.config.learning_rate);
        self.step_count += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                let (values, grads) = (&mut params.values, &params.grads);
                for (v, &g) in values.iter_mut().zip(grads) {
                    *v -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(AubError::DimensionMismatch {
                        expected: self.first_moment.len(),
                        got: params.len(),
                    });
                }
                let b1 = T::lit(self.config.beta1);
                let b2 = T::lit(self.config.beta2);
                let eps = T::lit(self.config.epsilon);
                let t = self.step_count as i32;
                let bc1 = T::one() - b1.powi(t);
                let bc2 = T::one() - b2.powi(t);
                for i in 0..params.len() {
                    let g = params.grads[i];
                    let m = b1 * self.first_moment[i] + (T::one() - b1) * g;
                    let v = b2 * self.second_moment[i] + (T::one() - b2) * g * g;
                    self.first_moment[i] = m;
                    self.second_moment[i] = v;
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    params.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Deterministic random stream. Every stochastic routine takes one of these
/// explicitly.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    /// Independent child stream derived from the next draw of this one.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.inner.next_u64())
    }

    pub fn normal<T: Scalar>(&mut self) -> T {
        let v: f64 = StandardNormal.sample(&mut self.inner);
        T::lit(v)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform(0.0, 1.0) * n as f64) as usize).min(n.saturating_sub(1))
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_sum_exp_examples() {
        assert_eq!(log_sum_exp(&[0.0f64]).unwrap(), 0.0);
        let a = 5.0f64;
        assert!((log_sum_exp(&[a, a]).unwrap() - (a + 2f64.ln())).abs() < 1e-14);
        // 3 + ln(1 + e^-1 + e^-2), summed with mpmath at 50 digits
        let v = log_sum_exp(&[1.0f64, 2.0, 3.0]).unwrap();
        assert!((v - 3.407_605_964_444_380_5).abs() < 1e-14, "{v}");
        assert!(matches!(
            log_sum_exp::<f64>(&[]),
            Err(AubError::EmptyLogSumExp)
        ));
    }

    #[test]
    fn log_sum_exp_survives_large_spread() {
        let v = log_sum_exp(&[-700.0f64, 0.0, 700.0]).unwrap();
        assert!((v - 700.0).abs() < 1e-12);
        let v = log_sum_exp(&[1000.0f64, 1000.0]).unwrap();
        assert!((v - 1000.0 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_examples() {
        let mut p = ParameterStore::<f64>::new();
        p.add_segment("theta", 1);
        p.values_mut()[0] = 3.0;
        let g = finite_difference_gradient(&mut p, 1e-5, |p| p.values()[0].powi(2)).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert_eq!(p.values()[0], 3.0);

        let mut p = ParameterStore::<f64>::new();
        p.add_segment("theta", 4);
        p.values_mut().copy_from_slice(&[0.3, -1.7, 2.2, 9.1]);
        let before = p.values().to_vec();
        let g = finite_difference_gradient(&mut p, 1e-4, |p| p.values().iter().sum()).unwrap();
        for gi in g {
            assert!((gi - 1.0).abs() < 1e-9);
        }
        // restored bit-exactly
        assert_eq!(p.values(), &before[..]);
    }

    #[test]
    fn finite_difference_reports_coordinate() {
        let mut p = ParameterStore::<f64>::new();
        p.add_segment("theta", 3);
        let err = finite_difference_gradient(&mut p, 1e-4, |p| {
            if p.values()[2] != 0.0 {
                f64::NAN
            } else {
                0.0
            }
        })
        .unwrap_err();
        assert!(matches!(err, AubError::NonFiniteProbe { coordinate: 2 }));
        assert!(finite_difference_gradient(&mut p, 0.1, |_| 0.0).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut p = ParameterStore::<f64>::new();
        p.add_segment("w", 2);
        p.values_mut().copy_from_slice(&[1.0, 5.0]);
        p.grads_mut().copy_from_slice(&[2.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), 2).unwrap();
        opt.step(&mut p).unwrap();
        assert!((p.values()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.values()[1], 5.0);
        assert_eq!(p.grads(), &[0.0, 0.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m = (1-b1) g, v = (1-b2) g^2; bias correction gives m^ = g, v^ = g^2
        // so the update is lr * g / (|g| + eps).
        let (lr, g, x0) = (0.01f64, 0.37f64, 1.25f64);
        let mut p = ParameterStore::<f64>::new();
        p.add_segment("w", 1);
        p.values_mut()[0] = x0;
        p.grads_mut()[0] = g;
        let mut opt = Optimizer::new(OptimizerConfig::adam(lr), 1).unwrap();
        opt.step(&mut p).unwrap();
        let expected = x0 - lr * g / (g.abs() + 1e-8);
        assert!((p.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn optimizer_rejects_non_finite_before_mutating() {
        let mut p = ParameterStore::<f64>::new();
        p.add_segment("w", 2);
        p.values_mut().copy_from_slice(&[1.0, 2.0]);
        p.grads_mut().copy_from_slice(&[0.5, f64::INFINITY]);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), 2).unwrap();
        assert!(matches!(
            opt.step(&mut p),
            Err(AubError::NonFiniteGradient { index: 1 })
        ));
        assert_eq!(p.values(), &[1.0, 2.0]);
        assert!(Optimizer::<f64>::new(OptimizerConfig::sgd(0.0), 1).is_err());
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xa: Vec<f64> = (0..16).map(|_| a.normal()).collect();
        let xb: Vec<f64> = (0..16).map(|_| b.normal()).collect();
        assert_eq!(xa, xb);
        let mut p = a.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn log_sum_exp_bounds(values in prop::collection::vec(-300.0f64..300.0, 1..40)) {
            let lse = log_sum_exp(&values).unwrap();
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max - 1e-12);
            prop_assert!(lse <= max + (values.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn softmax_sums_to_one(values in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let s: f64 = softmax(&values).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn zero_gradient_is_fixed_point(values in prop::collection::vec(-10.0f64..10.0, 1..10), adam in any::<bool>()) {
            let mut p = ParameterStore::<f64>::new();
            p.add_segment("w", values.len());
            p.values_mut().copy_from_slice(&values);
            let cfg = if adam { OptimizerConfig::adam(0.1) } else { OptimizerConfig::sgd(0.1) };
            let mut opt = Optimizer::new(cfg, values.len()).unwrap();
            for _ in 0..3 {
                opt.step(&mut p).unwrap();
            }
            prop_assert_eq!(p.values(), &values[..]);
        }
    }
}
