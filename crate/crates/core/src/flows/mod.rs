//! Invertible transformations with exact inverses and log-abs-det-Jacobians.
//!
//! Every concrete flow in the crate is a [`FlowSequence`]: an ordered list of
//! [`Layer`]s sharing one [`ParameterStore`]. The identity map is the empty
//! sequence, an elementwise affine map is a single [`Layer::Affine`], and
//! RealNVP stacks come from [`make_realnvp`].
//!
//! The [`Flow`] trait is the interface the alignment objective consumes, so
//! other invertible families can be dropped in.

mod layers;

pub use layers::{AffineCouplingLayer, Layer};

use serde::{Deserialize, Serialize};

use crate::error::{AubError, Result};
use crate::matrix::Matrix;
use crate::numeric::{ParameterStore, SeededRng};
use crate::scalar::Scalar;
use layers::LayerCache;

/// Default bound on coupling log-scales.
pub const DEFAULT_SCALE_CLAMP: f64 = 5.0;

/// An invertible map `T` with tractable `ln |det J_T|`.
pub trait Flow<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Serializable description sufficient to rebuild the structure.
    fn arch(&self) -> FlowArch;

    fn params(&self) -> &ParameterStore<T>;

    fn params_mut(&mut self) -> &mut ParameterStore<T>;

    /// `(z, ln|det J(x)|)` per row.
    fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)>;

    fn inverse(&self, z: &Matrix<T>) -> Result<Matrix<T>>;

    /// As [`Flow::forward`], keeping what [`Flow::backward`] needs.
    fn forward_train(&mut self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)>;

    /// Consumes the cached forward pass. `grad_z` and `grad_logdet` are the
    /// loss gradients with respect to the outputs; parameter gradients are
    /// added to the store when `accumulate` is set. Returns `d loss / d x`.
    fn backward(&mut self, grad_z: &Matrix<T>, grad_logdet: &[T], accumulate: bool) -> Result<Matrix<T>>;

    /// `(a, b)` when the map is exactly `z = a * x + b` elementwise.
    fn affine_coefficients(&self) -> Option<(Vec<T>, Vec<T>)> {
        None
    }
}

/// Structural description of a flow, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowArch {
    Identity {
        dim: usize,
    },
    Affine {
        dim: usize,
    },
    RealNvp {
        dim: usize,
        n_layers: usize,
        hidden_dim: usize,
        n_hidden: usize,
        #[serde(default = "default_clamp")]
        scale_clamp: f64,
        /// Elementwise affine layer after every coupling layer.
        #[serde(default = "default_true")]
        normalization: bool,
    },
}

fn default_clamp() -> f64 {
    DEFAULT_SCALE_CLAMP
}

fn default_true() -> bool {
    true
}

impl FlowArch {
    pub fn dim(&self) -> usize {
        match self {
            FlowArch::Identity { dim } | FlowArch::Affine { dim } | FlowArch::RealNvp { dim, .. } => *dim,
        }
    }

    /// Layer list without allocating parameters.
    pub fn layers(&self) -> Result<Vec<Layer>> {
        match *self {
            FlowArch::Identity { .. } => Ok(Vec::new()),
            FlowArch::Affine { dim } => {
                if dim == 0 {
                    return Err(AubError::InvalidArgument("flow dim must be positive".into()));
                }
                Ok(vec![Layer::Affine { dim }])
            }
            FlowArch::RealNvp {
                dim,
                n_layers,
                hidden_dim,
                n_hidden,
                scale_clamp,
                normalization,
            } => {
                if dim < 2 {
                    return Err(AubError::InvalidArgument(
                        "coupling layers need dim >= 2 to split coordinates".into(),
                    ));
                }
                if n_layers == 0 || hidden_dim == 0 {
                    return Err(AubError::InvalidArgument(
                        "n_layers and hidden_dim must be positive".into(),
                    ));
                }
                let mut layers = Vec::with_capacity(n_layers * 2);
                // odd indices pass through first, then even, alternating
                let mut mask: Vec<bool> = (0..dim).map(|i| i % 2 == 1).collect();
                for _ in 0..n_layers {
                    layers.push(Layer::Coupling(AffineCouplingLayer::new(
                        mask.clone(),
                        hidden_dim,
                        n_hidden,
                        scale_clamp,
                    )?));
                    if normalization {
                        layers.push(Layer::ElementwiseAffine { dim });
                    }
                    mask.iter_mut().for_each(|m| *m = !*m);
                }
                Ok(layers)
            }
        }
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(Layer::num_params).sum())
    }

    pub fn build<T: Scalar>(&self, rng: &mut SeededRng) -> Result<FlowSequence<T>> {
        FlowSequence::from_layers(self.clone(), self.layers()?, rng)
    }
}

/// Ordered composition of invertible layers.
#[derive(Clone, Debug)]
pub struct FlowSequence<T> {
    arch: FlowArch,
    dim: usize,
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    store: ParameterStore<T>,
    tape: Option<FlowTape<T>>,
}

/// Per-layer intermediate values from one forward pass.
#[derive(Clone, Debug)]
pub struct FlowTape<T> {
    caches: Vec<LayerCache<T>>,
}

impl<T: Scalar> FlowSequence<T> {
    fn from_layers(arch: FlowArch, layers: Vec<Layer>, rng: &mut SeededRng) -> Result<Self> {
        let dim = arch.dim();
        let mut store = ParameterStore::new();
        let mut offsets = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            if layer.dim() != dim {
                return Err(AubError::DimensionMismatch {
                    expected: dim,
                    got: layer.dim(),
                });
            }
            let (a, b) = layer.segment_names();
            let offset = store.len();
            offsets.push(offset);
            if layer.num_params() > 0 {
                // both halves are equal: (scale, shift) or (scale_net, shift_net)
                let half = layer.num_params() / 2;
                store.add_segment(format!("layer{i}.{a}"), half);
                store.add_segment(format!("layer{i}.{b}"), layer.num_params() - half);
                layer.init(&mut store.values_mut()[offset..offset + layer.num_params()], rng);
            }
        }
        Ok(Self {
            arch,
            dim,
            layers,
            offsets,
            store,
            tape: None,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            arch: FlowArch::Identity { dim },
            dim,
            layers: Vec::new(),
            offsets: Vec::new(),
            store: ParameterStore::new(),
            tape: None,
        }
    }

    /// Elementwise `z = a * x + b`; every `a` must be nonzero.
    pub fn affine(a: &[T], b: &[T]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(AubError::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        if a.iter().any(|v| *v == T::zero() || !v.is_finite()) {
            return Err(AubError::InvalidArgument("affine scale must be finite and nonzero".into()));
        }
        let arch = FlowArch::Affine { dim: a.len() };
        let mut flow = Self::from_layers(arch.clone(), arch.layers()?, &mut SeededRng::new(0))?;
        let v = flow.store.values_mut();
        v[..a.len()].copy_from_slice(a);
        v[a.len()..].copy_from_slice(b);
        Ok(flow)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    fn layer_params(&self, i: usize) -> &[T] {
        let off = self.offsets[i];
        &self.store.values()[off..off + self.layers[i].num_params()]
    }

    /// Forward pass returning the tape explicitly; no state is mutated.
    pub fn forward_with_tape(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, FlowTape<T>)> {
        x.check_width(self.dim)?;
        let mut logdet = vec![T::zero(); x.nrows()];
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, ld, cache) = layer.forward(self.layer_params(i), &h);
            for (acc, v) in logdet.iter_mut().zip(ld) {
                *acc += v;
            }
            caches.push(cache);
            h = out;
        }
        if let Some((r, c)) = h.first_non_finite() {
            return Err(AubError::NonFinite(format!(
                "flow output at row {r}, column {c} (exploded scales?)"
            )));
        }
        if let Some(r) = logdet.iter().position(|v| !v.is_finite()) {
            return Err(AubError::NonFinite(format!("log-determinant at row {r}")));
        }
        Ok((h, logdet, FlowTape { caches }))
    }

    /// Backward pass through an explicit tape. Parameter gradients are added
    /// into `grads` (length [`Self::num_params`]) when given.
    pub fn backward_with_tape(
        &self,
        tape: &FlowTape<T>,
        grad_z: &Matrix<T>,
        grad_logdet: &[T],
        grads: Option<&mut [T]>,
    ) -> Result<Matrix<T>> {
        backward_impl(
            &self.layers,
            &self.offsets,
            self.store.values(),
            tape,
            grad_z,
            grad_logdet,
            grads,
        )
    }
}

impl<T: Scalar> FlowSequence<T> {
    /// As [`Self::backward_with_tape`], adding parameter gradients into this
    /// flow's own store.
    pub fn backward_accumulate(
        &mut self,
        tape: &FlowTape<T>,
        grad_z: &Matrix<T>,
        grad_logdet: &[T],
    ) -> Result<Matrix<T>> {
        let (values, grads) = self.store.split_mut();
        backward_impl(
            &self.layers,
            &self.offsets,
            values,
            tape,
            grad_z,
            grad_logdet,
            Some(grads),
        )
    }
}

fn backward_impl<T: Scalar>(
    layers: &[Layer],
    offsets: &[usize],
    values: &[T],
    tape: &FlowTape<T>,
    grad_z: &Matrix<T>,
    grad_logdet: &[T],
    mut grads: Option<&mut [T]>,
) -> Result<Matrix<T>> {
    if tape.caches.len() != layers.len() {
        return Err(AubError::MissingForwardCache);
    }
    if grad_logdet.len() != grad_z.nrows() {
        return Err(AubError::DimensionMismatch {
            expected: grad_z.nrows(),
            got: grad_logdet.len(),
        });
    }
    let mut g = grad_z.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        let range = offsets[i]..offsets[i] + layer.num_params();
        let p = &values[range.clone()];
        let layer_grads = grads.as_deref_mut().map(|g| &mut g[range]);
        g = layer.backward(p, &tape.caches[i], &g, grad_logdet, layer_grads)?;
    }
    Ok(g)
}

impl<T: Scalar> Flow<T> for FlowSequence<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn arch(&self) -> FlowArch {
        self.arch.clone()
    }

    fn params(&self) -> &ParameterStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
        let (z, ld, _) = self.forward_with_tape(x)?;
        Ok((z, ld))
    }

    fn inverse(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        z.check_width(self.dim)?;
        let mut h = z.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            h = layer.inverse(self.layer_params(i), &h);
        }
        Ok(h)
    }

    fn forward_train(&mut self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
        let (z, ld, tape) = self.forward_with_tape(x)?;
        self.tape = Some(tape);
        Ok((z, ld))
    }

    fn backward(&mut self, grad_z: &Matrix<T>, grad_logdet: &[T], accumulate: bool) -> Result<Matrix<T>> {
        let tape = self.tape.take().ok_or(AubError::MissingForwardCache)?;
        let (values, grads) = self.store.split_mut();
        backward_impl(
            &self.layers,
            &self.offsets,
            values,
            &tape,
            grad_z,
            grad_logdet,
            accumulate.then_some(grads),
        )
    }

    fn affine_coefficients(&self) -> Option<(Vec<T>, Vec<T>)> {
        let mut a = vec![T::one(); self.dim];
        let mut b = vec![T::zero(); self.dim];
        for (i, layer) in self.layers.iter().enumerate() {
            let p = self.layer_params(i);
            let (la, lb): (Vec<T>, &[T]) = match layer {
                Layer::Affine { dim } => (p[..*dim].to_vec(), &p[*dim..]),
                Layer::ElementwiseAffine { dim } => (p[..*dim].iter().map(|v| v.exp()).collect(), &p[*dim..]),
                _ => return None,
            };
            for c in 0..self.dim {
                a[c] = la[c] * a[c];
                b[c] = la[c] * b[c] + lb[c];
            }
        }
        Some((a, b))
    }
}

/// Alternating-mask RealNVP stack: `n_layers` coupling layers whose scale and
/// shift networks have `n_hidden` hidden-to-hidden layers of width
/// `hidden_dim`, each followed by an identity-initialised elementwise affine
/// layer. Final network layers start at zero so the flow is the identity.
pub fn make_realnvp<T: Scalar>(
    dim: usize,
    n_layers: usize,
    hidden_dim: usize,
    n_hidden: usize,
    seed: u64,
) -> Result<FlowSequence<T>> {
    FlowArch::RealNvp {
        dim,
        n_layers,
        hidden_dim,
        n_hidden,
        scale_clamp: DEFAULT_SCALE_CLAMP,
        normalization: true,
    }
    .build(&mut SeededRng::new(seed))
}
