//! Small fully connected networks with hand-written backward passes.
//!
//! Parameters live in a caller-owned flat slice laid out layer by layer as
//! `W (fan_in x fan_out, row-major)` followed by `b (fan_out)`.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::numeric::SeededRng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(T::zero()),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Multi-layer perceptron `sizes[0] -> ... -> sizes[last]` with the hidden
/// activation applied after every layer except the last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
}

/// Hidden activations recorded by [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    /// `acts[0]` is the input; `acts[l]` the post-activation output of layer `l`.
    acts: Vec<Matrix<T>>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        Self { sizes, activation }
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let o = off;
            off += (w[0] + 1) * w[1];
            (o, w[0], w[1])
        })
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; the final
    /// layer is zeroed when `zero_last` is set.
    pub fn init<T: Scalar>(&self, params: &mut [T], rng: &mut SeededRng, zero_last: bool) {
        let n_layers = self.sizes.len() - 1;
        for (l, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let slice = &mut params[off..off + (fan_in + 1) * fan_out];
            if zero_last && l + 1 == n_layers {
                slice.iter_mut().for_each(|v| *v = T::zero());
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                slice
                    .iter_mut()
                    .for_each(|v| *v = T::lit(rng.uniform(-bound, bound)));
            }
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Matrix<T>) -> (Matrix<T>, MlpCache<T>) {
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers);
        let mut current = x.clone();
        for (l, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
            let mut out = linear(&current, w, b, fan_in, fan_out);
            if l + 1 < n_layers {
                let act = self.activation;
                out.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = act.apply(*v));
            }
            acts.push(current);
            current = out;
        }
        (current, MlpCache { acts })
    }

    /// Backpropagates `grad_out`; parameter gradients are added into `grads`
    /// when given. Returns the gradient with respect to the input.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &MlpCache<T>,
        grad_out: &Matrix<T>,
        mut grads: Option<&mut [T]>,
    ) -> Matrix<T> {
        let layers: Vec<_> = self.layer_offsets().collect();
        let mut g = grad_out.clone();
        for (l, &(off, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let input = &cache.acts[l];
            let w = &params[off..off + fan_in * fan_out];
            if let Some(grads) = grads.as_deref_mut() {
                let (gw, gb) = grads[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for i in 0..g.nrows() {
                    let gi = g.row(i);
                    let xi = input.row(i);
                    for (k, &xk) in xi.iter().enumerate() {
                        if xk == T::zero() {
                            continue;
                        }
                        let row = &mut gw[k * fan_out..(k + 1) * fan_out];
                        for (r, &gij) in row.iter_mut().zip(gi) {
                            *r += xk * gij;
                        }
                    }
                    for (r, &gij) in gb.iter_mut().zip(gi) {
                        *r += gij;
                    }
                }
            }
            let mut gin = Matrix::zeros(g.nrows(), fan_in);
            for i in 0..g.nrows() {
                let gi = g.row(i);
                let out = gin.row_mut(i);
                for (k, o) in out.iter_mut().enumerate() {
                    let wk = &w[k * fan_out..(k + 1) * fan_out];
                    *o = wk.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                }
            }
            if l > 0 {
                // input of layer l is the activated output of layer l-1
                let act = self.activation;
                for (gv, &a) in gin.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *gv *= act.derivative_from_output(a);
                }
            }
            g = gin;
        }
        g
    }
}

fn linear<T: Scalar>(x: &Matrix<T>, w: &[T], b: &[T], fan_in: usize, fan_out: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(x.nrows(), fan_out);
    for i in 0..x.nrows() {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        oi.copy_from_slice(b);
        for (k, &xk) in xi.iter().enumerate().take(fan_in) {
            if xk == T::zero() {
                continue;
            }
            let wk = &w[k * fan_out..(k + 1) * fan_out];
            for (o, &wkj) in oi.iter_mut().zip(wk) {
                *o += xk * wkj;
            }
        }
    }
    out
}
