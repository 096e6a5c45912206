//! Individual invertible layers. Layers hold structure only; their parameters
//! live in the owning [`FlowSequence`](super::FlowSequence)'s store at
//! `offset..offset + num_params()`.

use crate::error::{AubError, Result};
use crate::matrix::Matrix;
use crate::nn::{Activation, Mlp, MlpCache};
use crate::numeric::SeededRng;
use crate::scalar::Scalar;

/// RealNVP affine coupling: pass-through coordinates (`mask == true`) are
/// copied, the rest are mapped as `x * exp(s) + t` with `s`, `t` computed
/// from the masked input. `s` is squashed to `(-clamp, clamp)` by
/// `clamp * tanh(raw / clamp)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCouplingLayer {
    dim: usize,
    mask: Vec<bool>,
    scale_net: Mlp,
    shift_net: Mlp,
    scale_clamp: f64,
}

impl AffineCouplingLayer {
    pub fn new(mask: Vec<bool>, hidden_dim: usize, n_hidden: usize, scale_clamp: f64) -> Result<Self> {
        let dim = mask.len();
        if !mask.iter().any(|&m| m) || mask.iter().all(|&m| m) {
            return Err(AubError::InvalidArgument(
                "coupling mask needs at least one pass-through and one transformed coordinate".into(),
            ));
        }
        if hidden_dim == 0 {
            return Err(AubError::InvalidArgument("hidden_dim must be positive".into()));
        }
        if !(scale_clamp > 0.0) {
            return Err(AubError::InvalidArgument("scale_clamp must be positive".into()));
        }
        let mut sizes = vec![dim, hidden_dim];
        sizes.extend(std::iter::repeat_n(hidden_dim, n_hidden));
        sizes.push(dim);
        Ok(Self {
            dim,
            mask,
            scale_net: Mlp::new(sizes.clone(), Activation::Tanh),
            shift_net: Mlp::new(sizes, Activation::Relu),
            scale_clamp,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_clamp(&self) -> f64 {
        self.scale_clamp
    }

    pub fn num_params(&self) -> usize {
        self.scale_net.num_params() + self.shift_net.num_params()
    }

    fn split<'a, T>(&self, p: &'a [T]) -> (&'a [T], &'a [T]) {
        p.split_at(self.scale_net.num_params())
    }

    pub(crate) fn init<T: Scalar>(&self, p: &mut [T], rng: &mut SeededRng) {
        let (s, t) = p.split_at_mut(self.scale_net.num_params());
        self.scale_net.init(s, rng, true);
        self.shift_net.init(t, rng, true);
    }

    fn masked<T: Scalar>(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut xm = x.clone();
        for i in 0..xm.nrows() {
            for (v, &keep) in xm.row_mut(i).iter_mut().zip(&self.mask) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
        xm
    }

    fn forward<T: Scalar>(&self, p: &[T], x: &Matrix<T>) -> (Matrix<T>, Vec<T>, CouplingCache<T>) {
        let (ps, pt) = self.split(p);
        let xm = self.masked(x);
        let (raw, s_cache) = self.scale_net.forward(ps, &xm);
        let (shift, t_cache) = self.shift_net.forward(pt, &xm);
        let clamp = T::lit(self.scale_clamp);
        let n = x.nrows();
        let mut z = x.clone();
        let mut scale = Matrix::zeros(n, self.dim);
        let mut logdet = vec![T::zero(); n];
        for i in 0..n {
            let (xi, ri, ti) = (x.row(i), raw.row(i), shift.row(i));
            let zi = z.row_mut(i);
            let si = scale.row_mut(i);
            for c in 0..self.dim {
                if self.mask[c] {
                    continue;
                }
                let s = clamp * (ri[c] / clamp).tanh();
                si[c] = s;
                zi[c] = xi[c] * s.exp() + ti[c];
                logdet[i] += s;
            }
        }
        let cache = CouplingCache {
            x: x.clone(),
            scale,
            s_cache,
            t_cache,
        };
        (z, logdet, cache)
    }

    fn inverse<T: Scalar>(&self, p: &[T], z: &Matrix<T>) -> Matrix<T> {
        let (ps, pt) = self.split(p);
        let zm = self.masked(z);
        let (raw, _) = self.scale_net.forward(ps, &zm);
        let (shift, _) = self.shift_net.forward(pt, &zm);
        let clamp = T::lit(self.scale_clamp);
        let mut x = z.clone();
        for i in 0..z.nrows() {
            let (zi, ri, ti) = (z.row(i), raw.row(i), shift.row(i));
            let xi = x.row_mut(i);
            for c in 0..self.dim {
                if !self.mask[c] {
                    let s = clamp * (ri[c] / clamp).tanh();
                    xi[c] = (zi[c] - ti[c]) * (-s).exp();
                }
            }
        }
        x
    }

    fn backward<T: Scalar>(
        &self,
        p: &[T],
        cache: &CouplingCache<T>,
        grad_z: &Matrix<T>,
        grad_logdet: &[T],
        grads: Option<&mut [T]>,
    ) -> Matrix<T> {
        let (ps, pt) = self.split(p);
        let clamp = T::lit(self.scale_clamp);
        let n = grad_z.nrows();
        let mut g_raw = Matrix::zeros(n, self.dim);
        let mut g_shift = Matrix::zeros(n, self.dim);
        let mut gx = grad_z.clone();
        for i in 0..n {
            let (gzi, xi, si) = (grad_z.row(i), cache.x.row(i), cache.scale.row(i));
            let gri = g_raw.row_mut(i);
            for c in 0..self.dim {
                if self.mask[c] {
                    continue;
                }
                let e = si[c].exp();
                let th = si[c] / clamp;
                gri[c] = (gzi[c] * xi[c] * e + grad_logdet[i]) * (T::one() - th * th);
            }
            let gti = g_shift.row_mut(i);
            for c in 0..self.dim {
                if !self.mask[c] {
                    gti[c] = gzi[c];
                }
            }
            let gxi = gx.row_mut(i);
            for c in 0..self.dim {
                if !self.mask[c] {
                    gxi[c] = gzi[c] * si[c].exp();
                }
            }
        }
        let (gs_in, gt_in) = match grads {
            Some(g) => {
                let (gs, gt) = g.split_at_mut(self.scale_net.num_params());
                (
                    self.scale_net.backward(ps, &cache.s_cache, &g_raw, Some(gs)),
                    self.shift_net.backward(pt, &cache.t_cache, &g_shift, Some(gt)),
                )
            }
            None => (
                self.scale_net.backward(ps, &cache.s_cache, &g_raw, None),
                self.shift_net.backward(pt, &cache.t_cache, &g_shift, None),
            ),
        };
        for i in 0..n {
            let (a, b) = (gs_in.row(i), gt_in.row(i));
            let gxi = gx.row_mut(i);
            for c in 0..self.dim {
                if self.mask[c] {
                    gxi[c] += a[c] + b[c];
                }
            }
        }
        gx
    }
}

#[derive(Clone, Debug)]
pub(crate) struct CouplingCache<T> {
    x: Matrix<T>,
    scale: Matrix<T>,
    s_cache: MlpCache<T>,
    t_cache: MlpCache<T>,
}

/// One invertible stage of a [`FlowSequence`](super::FlowSequence).
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `z = a * x + b` with free per-coordinate `a != 0`.
    Affine { dim: usize },
    /// `z = exp(log_scale) * x + shift`, identity at init.
    ElementwiseAffine { dim: usize },
    Coupling(AffineCouplingLayer),
    /// Fixed coordinate permutation `z[i] = x[perm[i]]`.
    Permutation(Vec<usize>),
}

#[derive(Clone, Debug)]
pub(crate) enum LayerCache<T> {
    Affine(Matrix<T>),
    ElementwiseAffine(Matrix<T>),
    Coupling(Box<CouplingCache<T>>),
    Permutation,
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::Affine { dim } | Layer::ElementwiseAffine { dim } => *dim,
            Layer::Coupling(c) => c.dim(),
            Layer::Permutation(p) => p.len(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Layer::Affine { dim } | Layer::ElementwiseAffine { dim } => 2 * dim,
            Layer::Coupling(c) => c.num_params(),
            Layer::Permutation(_) => 0,
        }
    }

    pub(crate) fn segment_names(&self) -> (&'static str, &'static str) {
        match self {
            Layer::Affine { .. } => ("scale", "shift"),
            Layer::ElementwiseAffine { .. } => ("log_scale", "shift"),
            Layer::Coupling(_) => ("scale_net", "shift_net"),
            Layer::Permutation(_) => ("", ""),
        }
    }

    pub(crate) fn init<T: Scalar>(&self, p: &mut [T], rng: &mut SeededRng) {
        match self {
            Layer::Affine { dim } => {
                p[..*dim].iter_mut().for_each(|v| *v = T::one());
                p[*dim..].iter_mut().for_each(|v| *v = T::zero());
            }
            Layer::ElementwiseAffine { .. } => p.iter_mut().for_each(|v| *v = T::zero()),
            Layer::Coupling(c) => c.init(p, rng),
            Layer::Permutation(_) => {}
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, p: &[T], x: &Matrix<T>) -> (Matrix<T>, Vec<T>, LayerCache<T>) {
        let n = x.nrows();
        match self {
            Layer::Affine { dim } => {
                let (a, b) = p.split_at(*dim);
                let ld: T = a.iter().map(|v| v.abs().ln()).sum();
                let mut z = x.clone();
                for i in 0..n {
                    for ((v, &ai), &bi) in z.row_mut(i).iter_mut().zip(a).zip(b) {
                        *v = ai * *v + bi;
                    }
                }
                (z, vec![ld; n], LayerCache::Affine(x.clone()))
            }
            Layer::ElementwiseAffine { dim } => {
                let (ls, b) = p.split_at(*dim);
                let ld: T = ls.iter().copied().sum();
                let mut z = x.clone();
                for i in 0..n {
                    for ((v, &l), &bi) in z.row_mut(i).iter_mut().zip(ls).zip(b) {
                        *v = l.exp() * *v + bi;
                    }
                }
                (z, vec![ld; n], LayerCache::ElementwiseAffine(x.clone()))
            }
            Layer::Coupling(c) => {
                let (z, ld, cache) = c.forward(p, x);
                (z, ld, LayerCache::Coupling(Box::new(cache)))
            }
            Layer::Permutation(perm) => {
                let mut z = x.clone();
                for i in 0..n {
                    let xi = x.row(i);
                    for (v, &src) in z.row_mut(i).iter_mut().zip(perm) {
                        *v = xi[src];
                    }
                }
                (z, vec![T::zero(); n], LayerCache::Permutation)
            }
        }
    }

    pub(crate) fn inverse<T: Scalar>(&self, p: &[T], z: &Matrix<T>) -> Matrix<T> {
        match self {
            Layer::Affine { dim } => {
                let (a, b) = p.split_at(*dim);
                let mut x = z.clone();
                for i in 0..x.nrows() {
                    for ((v, &ai), &bi) in x.row_mut(i).iter_mut().zip(a).zip(b) {
                        *v = (*v - bi) / ai;
                    }
                }
                x
            }
            Layer::ElementwiseAffine { dim } => {
                let (ls, b) = p.split_at(*dim);
                let mut x = z.clone();
                for i in 0..x.nrows() {
                    for ((v, &l), &bi) in x.row_mut(i).iter_mut().zip(ls).zip(b) {
                        *v = (*v - bi) * (-l).exp();
                    }
                }
                x
            }
            Layer::Coupling(c) => c.inverse(p, z),
            Layer::Permutation(perm) => {
                let mut x = z.clone();
                for i in 0..z.nrows() {
                    let zi = z.row(i);
                    let xi = x.row_mut(i);
                    for (k, &src) in perm.iter().enumerate() {
                        xi[src] = zi[k];
                    }
                }
                x
            }
        }
    }

    pub(crate) fn backward<T: Scalar>(
        &self,
        p: &[T],
        cache: &LayerCache<T>,
        grad_z: &Matrix<T>,
        grad_logdet: &[T],
        grads: Option<&mut [T]>,
    ) -> Result<Matrix<T>> {
        match (self, cache) {
            (Layer::Affine { dim }, LayerCache::Affine(x)) => {
                let (a, _) = p.split_at(*dim);
                if let Some(g) = grads {
                    let (ga, gb) = g.split_at_mut(*dim);
                    let gld: T = grad_logdet.iter().copied().sum();
                    for c in 0..*dim {
                        ga[c] += gld / a[c];
                    }
                    for i in 0..x.nrows() {
                        for (c, (&gz, &xv)) in grad_z.row(i).iter().zip(x.row(i)).enumerate() {
                            ga[c] += gz * xv;
                            gb[c] += gz;
                        }
                    }
                }
                let mut gx = grad_z.clone();
                for i in 0..gx.nrows() {
                    for (v, &ai) in gx.row_mut(i).iter_mut().zip(a) {
                        *v *= ai;
                    }
                }
                Ok(gx)
            }
            (Layer::ElementwiseAffine { dim }, LayerCache::ElementwiseAffine(x)) => {
                let (ls, _) = p.split_at(*dim);
                if let Some(g) = grads {
                    let (gl, gb) = g.split_at_mut(*dim);
                    let gld: T = grad_logdet.iter().copied().sum();
                    for c in 0..*dim {
                        gl[c] += gld;
                    }
                    for i in 0..x.nrows() {
                        for (c, (&gz, &xv)) in grad_z.row(i).iter().zip(x.row(i)).enumerate() {
                            gl[c] += gz * xv * ls[c].exp();
                            gb[c] += gz;
                        }
                    }
                }
                let mut gx = grad_z.clone();
                for i in 0..gx.nrows() {
                    for (v, &l) in gx.row_mut(i).iter_mut().zip(ls) {
                        *v *= l.exp();
                    }
                }
                Ok(gx)
            }
            (Layer::Coupling(c), LayerCache::Coupling(cache)) => {
                Ok(c.backward(p, cache, grad_z, grad_logdet, grads))
            }
            (Layer::Permutation(perm), LayerCache::Permutation) => {
                let mut gx = grad_z.clone();
                for i in 0..grad_z.nrows() {
                    let gz = grad_z.row(i);
                    let gxi = gx.row_mut(i);
                    for (k, &src) in perm.iter().enumerate() {
                        gxi[src] = gz[k];
                    }
                }
                Ok(gx)
            }
            _ => Err(AubError::InvalidArgument("layer cache does not match layer kind".into())),
        }
    }
}
