//! Composite Simpson quadrature oracles on `f64` for 1-D and 2-D analytic cases.

use rayon::prelude::*;

use super::AlignmentModel;
use crate::density::Density;
use crate::error::{AubError, Result};
use crate::flows::Flow;
use crate::matrix::Matrix;
use crate::numeric::{log_sum_exp, SeededRng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A density with closed-form pdf, entropy and affine pushforward.
#[derive(Clone, Debug, PartialEq)]
pub enum Analytic {
    /// Axis-aligned Gaussian.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    /// Uniform on an axis-aligned box.
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
}

impl Analytic {
    pub fn gaussian(mean: f64, std: f64) -> Self {
        Analytic::Gaussian {
            mean: vec![mean],
            std: vec![std],
        }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        Analytic::Uniform {
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    pub fn standard_normal(dim: usize) -> Self {
        Analytic::Gaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Analytic::Gaussian { mean, .. } => mean.len(),
            Analytic::Uniform { lo, .. } => lo.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Analytic::Gaussian { mean, std } => {
                mean.len() == std.len()
                    && !mean.is_empty()
                    && mean.iter().all(|m| m.is_finite())
                    && std.iter().all(|s| s.is_finite() && *s > 0.0)
            }
            Analytic::Uniform { lo, hi } => {
                lo.len() == hi.len() && !lo.is_empty() && lo.iter().zip(hi).all(|(l, h)| l.is_finite() && h.is_finite() && l < h)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(AubError::InvalidArgument(format!("malformed analytic density {self:?}")))
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        match self {
            Analytic::Gaussian { mean, std } => x
                .iter()
                .zip(mean)
                .zip(std)
                .map(|((&x, &m), &s)| {
                    let u = (x - m) / s;
                    -0.5 * (LN_2PI + u * u) - s.ln()
                })
                .sum(),
            Analytic::Uniform { lo, hi } => {
                if x.iter().zip(lo).zip(hi).all(|((&x, &l), &h)| x >= l && x <= h) {
                    -lo.iter().zip(hi).map(|(l, h)| (h - l).ln()).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        match self {
            Analytic::Gaussian { std, .. } => std.iter().map(|s| 0.5 * (LN_2PI + 1.0) + s.ln()).sum(),
            Analytic::Uniform { lo, hi } => lo.iter().zip(hi).map(|(l, h)| (h - l).ln()).sum(),
        }
    }

    /// Law of `a * x + b` (elementwise).
    pub fn pushforward(&self, a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != self.dim() || b.len() != self.dim() {
            return Err(AubError::DimensionMismatch {
                expected: self.dim(),
                got: a.len().min(b.len()),
            });
        }
        if a.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(AubError::InvalidArgument("pushforward needs finite nonzero scales".into()));
        }
        Ok(match self {
            Analytic::Gaussian { mean, std } => Analytic::Gaussian {
                mean: mean.iter().zip(a).zip(b).map(|((m, a), b)| a * m + b).collect(),
                std: std.iter().zip(a).map(|(s, a)| s * a.abs()).collect(),
            },
            Analytic::Uniform { lo, hi } => {
                let (mut l2, mut h2) = (Vec::new(), Vec::new());
                for i in 0..lo.len() {
                    let (p, q) = (a[i] * lo[i] + b[i], a[i] * hi[i] + b[i]);
                    l2.push(p.min(q));
                    h2.push(p.max(q));
                }
                Analytic::Uniform { lo: l2, hi: h2 }
            }
        })
    }

    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Matrix<f64> {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for i in 0..d {
                data.push(match self {
                    Analytic::Gaussian { mean, std } => mean[i] + std[i] * rng.normal::<f64>(),
                    Analytic::Uniform { lo, hi } => rng.uniform(lo[i], hi[i]),
                });
            }
        }
        Matrix::new(n, d, data).expect("shape is consistent")
    }

    /// Box on axis `i` holding essentially all mass.
    fn extent(&self, i: usize, span: f64) -> (f64, f64) {
        match self {
            Analytic::Gaussian { mean, std } => (mean[i] - span * std[i], mean[i] + span * std[i]),
            Analytic::Uniform { lo, hi } => (lo[i], hi[i]),
        }
    }

    fn breakpoints(&self, i: usize) -> Vec<f64> {
        match self {
            Analytic::Gaussian { .. } => Vec::new(),
            Analytic::Uniform { lo, hi } => vec![lo[i], hi[i]],
        }
    }
}

/// Quadrature grid settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureSpec {
    /// Nodes per axis, spread over the segments between breakpoints.
    pub n_points: usize,
    /// Gaussian half-width in standard deviations.
    pub span: f64,
    /// Largest change allowed when the grid is doubled.
    pub refine_tol: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            n_points: 4001,
            span: 10.0,
            refine_tol: 1e-7,
        }
    }
}

impl QuadratureSpec {
    fn refined(self) -> Self {
        Self {
            n_points: 2 * self.n_points - 1,
            ..self
        }
    }
}

/// Tensor-product Simpson nodes.
#[derive(Clone, Debug)]
pub struct Grid {
    points: Matrix<f64>,
    weights: Vec<f64>,
}

impl Grid {
    /// `bounds[i]` is the integration range on axis `i`; `breaks[i]` are
    /// interior discontinuities on that axis.
    pub fn new(bounds: &[(f64, f64)], breaks: &[Vec<f64>], n_points: usize) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 {
            return Err(AubError::Quadrature(format!("grids support 1 or 2 axes, got {}", bounds.len())));
        }
        if n_points < 3 {
            return Err(AubError::Quadrature("need at least 3 nodes per axis".into()));
        }
        let axes = bounds
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| axis_nodes(lo, hi, breaks.get(i).map_or(&[][..], Vec::as_slice), n_points))
            .collect::<Result<Vec<_>>>()?;
        let (points, weights) = if axes.len() == 1 {
            let (x, w): (Vec<f64>, Vec<f64>) = axes[0].iter().copied().unzip();
            (Matrix::column_vector(&x), w)
        } else {
            let mut data = Vec::with_capacity(axes[0].len() * axes[1].len() * 2);
            let mut w = Vec::with_capacity(axes[0].len() * axes[1].len());
            for &(x, wx) in &axes[0] {
                for &(y, wy) in &axes[1] {
                    data.push(x);
                    data.push(y);
                    w.push(wx * wy);
                }
            }
            (Matrix::new(w.len(), 2, data)?, w)
        };
        Ok(Self { points, weights })
    }

    /// Grid covering every density's extent, split at their breakpoints.
    pub fn covering(densities: &[&Analytic], spec: &QuadratureSpec) -> Result<Self> {
        let first = densities
            .first()
            .ok_or_else(|| AubError::InvalidArgument("no densities to integrate".into()))?;
        let d = first.dim();
        let mut bounds = Vec::with_capacity(d);
        let mut breaks = Vec::with_capacity(d);
        for i in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut b = Vec::new();
            for p in densities {
                if p.dim() != d {
                    return Err(AubError::DimensionMismatch { expected: d, got: p.dim() });
                }
                p.validate()?;
                let (l, h) = p.extent(i, spec.span);
                lo = lo.min(l);
                hi = hi.max(h);
                b.extend(p.breakpoints(i));
            }
            bounds.push((lo, hi));
            breaks.push(b);
        }
        Self::new(&bounds, &breaks, spec.n_points)
    }

    pub fn points(&self) -> &Matrix<f64> {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `sum_i w_i f_i` for values sampled at the nodes.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    fn log_pdf(&self, p: &Analytic) -> Vec<f64> {
        self.points.rows_iter().collect::<Vec<_>>().par_iter().map(|x| p.log_pdf(x)).collect()
    }
}

/// Composite Simpson `(node, weight)` pairs on `[lo, hi]`. Segment endpoints are evaluated a
/// hair inside the segment so one-sided limits are used at jumps.
fn axis_nodes(lo: f64, hi: f64, breaks: &[f64], n_points: usize) -> Result<Vec<(f64, f64)>> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(AubError::Quadrature(format!("bad integration range [{lo}, {hi}]")));
    }
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&b| b > lo && b < hi).collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let total = hi - lo;
    let mut nodes = Vec::new();
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = b - a;
        let n = ((n_points as f64 * len / total).ceil() as usize).max(33) | 1;
        let h = len / (n - 1) as f64;
        let nudge = len * 1e-12;
        for i in 0..n {
            let x = if i == 0 {
                a + nudge
            } else if i == n - 1 {
                b - nudge
            } else {
                a + h * i as f64
            };
            let w = if i == 0 || i == n - 1 {
                h / 3.0
            } else if i % 2 == 1 {
                4.0 * h / 3.0
            } else {
                2.0 * h / 3.0
            };
            nodes.push((x, w));
        }
    }
    Ok(nodes)
}

/// `p ln p` with the `0 ln 0 = 0` convention, from `ln p`.
fn p_log_p(lp: f64) -> f64 {
    if lp == f64::NEG_INFINITY {
        0.0
    } else {
        lp.exp() * lp
    }
}

fn mixture_log_pdf(logs: &[Vec<f64>], w: &[f64]) -> Result<Vec<f64>> {
    let n = logs[0].len();
    let lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0.0; logs.len()];
    for i in 0..n {
        for (j, l) in logs.iter().enumerate() {
            buf[j] = lw[j] + l[i];
        }
        out.push(if buf.iter().all(|v| *v == f64::NEG_INFINITY) {
            f64::NEG_INFINITY
        } else {
            log_sum_exp(&buf)?
        });
    }
    Ok(out)
}

fn check_weights(k: usize, w: &[f64]) -> Result<()> {
    if k == 0 || w.len() != k {
        return Err(AubError::InvalidArgument(format!("{k} densities but {} weights", w.len())));
    }
    let s: f64 = w.iter().sum();
    if w.iter().any(|v| !(*v > 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(AubError::InvalidArgument(format!("weights {w:?} are not a probability vector")));
    }
    Ok(())
}

/// Both forms of the generalized Jensen-Shannon divergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gjsd {
    /// `sum_j w_j KL(P_j, mix)`.
    pub kl_form: f64,
    /// `H(mix) - sum_j w_j H(P_j)`.
    pub entropy_form: f64,
}

impl Gjsd {
    pub fn value(&self) -> f64 {
        self.entropy_form
    }
}

fn gjsd_on_grid(densities: &[&Analytic], w: &[f64], grid: &Grid) -> Result<Gjsd> {
    let logs: Vec<Vec<f64>> = densities.iter().map(|p| grid.log_pdf(p)).collect();
    let lm = mixture_log_pdf(&logs, w)?;
    check_mass(&logs, grid)?;
    let mut kl_form = 0.0;
    let mut entropies = 0.0;
    for (j, l) in logs.iter().enumerate() {
        let kl: Vec<f64> = l
            .iter()
            .zip(&lm)
            .map(|(&lp, &lq)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) })
            .collect();
        kl_form += w[j] * grid.integrate(&kl);
        let h: Vec<f64> = l.iter().map(|&lp| -p_log_p(lp)).collect();
        entropies += w[j] * grid.integrate(&h);
    }
    let hm: Vec<f64> = lm.iter().map(|&l| -p_log_p(l)).collect();
    Ok(Gjsd {
        kl_form,
        entropy_form: grid.integrate(&hm) - entropies,
    })
}

/// Quadrature GJSD with a grid-doubling check and a cross-check of the two
/// definitional forms.
pub fn gjsd_quadrature(densities: &[&Analytic], w: &[f64], spec: &QuadratureSpec) -> Result<Gjsd> {
    check_weights(densities.len(), w)?;
    let g = gjsd_on_grid(densities, w, &Grid::covering(densities, spec)?)?;
    let fine = gjsd_on_grid(densities, w, &Grid::covering(densities, &spec.refined())?)?;
    let drift = (g.entropy_form - fine.entropy_form).abs();
    if !(drift <= spec.refine_tol) {
        return Err(AubError::Quadrature(format!(
            "grid too coarse: GJSD moved by {drift:e} when refined from {} to {} nodes per axis",
            spec.n_points,
            spec.refined().n_points
        )));
    }
    let disagreement = (fine.kl_form - fine.entropy_form).abs();
    if !(disagreement <= 1e-6) {
        return Err(AubError::Quadrature(format!(
            "GJSD forms disagree by {disagreement:e} (KL form {}, entropy form {})",
            fine.kl_form, fine.entropy_form
        )));
    }
    Ok(fine)
}

/// Quadrature terms of the variational bound for one analytic case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    /// `Hc(P_Zmix, Q) - sum_j w_j H(P_Zj)`.
    pub upper_bound: f64,
    pub gjsd: f64,
    /// `KL(P_Zmix, Q)`.
    pub gap: f64,
}

impl BoundCheck {
    pub fn holds(&self, tol: f64) -> bool {
        self.upper_bound >= self.gjsd - tol && (self.upper_bound - self.gjsd - self.gap).abs() <= tol
    }
}

/// Latent laws `T_j # P_Xj` for elementwise-affine flows.
pub fn latent_laws(model: &AlignmentModel<f64>, sources: &[Analytic]) -> Result<Vec<Analytic>> {
    if sources.len() != model.k() {
        return Err(AubError::DimensionMismatch {
            expected: model.k(),
            got: sources.len(),
        });
    }
    sources
        .iter()
        .zip(model.flows())
        .enumerate()
        .map(|(j, (p, f))| {
            if p.dim() != model.dim() {
                return Err(AubError::DimensionMismatch {
                    expected: model.dim(),
                    got: p.dim(),
                });
            }
            let (a, b) = f.affine_coefficients().ok_or_else(|| {
                AubError::InvalidArgument(format!("flow {j} is not elementwise affine; its latent law has no closed form"))
            })?;
            p.pushforward(&a, &b)
        })
        .collect()
}

/// Every density must integrate to one on the grid, otherwise some mass
/// fell between the nodes.
fn check_mass(logs: &[Vec<f64>], grid: &Grid) -> Result<()> {
    for (j, l) in logs.iter().enumerate() {
        let mass = grid.integrate(&l.iter().map(|&v| p_or_zero(v)).collect::<Vec<_>>());
        if !((mass - 1.0).abs() <= 1e-6) {
            return Err(AubError::Quadrature(format!(
                "grid too coarse: density {j} integrates to {mass} on {} nodes",
                grid.len()
            )));
        }
    }
    Ok(())
}

fn bound_on_grid(latents: &[&Analytic], w: &[f64], q: &dyn Density<f64>, grid: &Grid) -> Result<(f64, f64)> {
    let logs: Vec<Vec<f64>> = latents.iter().map(|p| grid.log_pdf(p)).collect();
    check_mass(&logs, grid)?;
    let lm = mixture_log_pdf(&logs, w)?;
    let lq = q.log_prob(grid.points())?;
    if let Some(i) = lq.iter().position(|v| !v.is_finite()) {
        return Err(AubError::Quadrature(format!("ln Q is not finite at grid node {i}")));
    }
    let cross: Vec<f64> = lm.iter().zip(&lq).map(|(&m, &q)| -p_or_zero(m) * q).collect();
    let mut entropies = 0.0;
    for (j, l) in logs.iter().enumerate() {
        let h: Vec<f64> = l.iter().map(|&lp| -p_log_p(lp)).collect();
        entropies += w[j] * grid.integrate(&h);
    }
    let kl: Vec<f64> = lm.iter().zip(&lq).map(|(&m, &q)| p_or_zero(m) * (if m == f64::NEG_INFINITY { 0.0 } else { m - q })).collect();
    Ok((grid.integrate(&cross) - entropies, grid.integrate(&kl)))
}

fn p_or_zero(lp: f64) -> f64 {
    if lp == f64::NEG_INFINITY {
        0.0
    } else {
        lp.exp()
    }
}

/// Upper bound, GJSD of the latents and bound gap for affine flows on
/// analytic sources. Fails if the gap identity or the inequality breaks.
pub fn bound_check(model: &AlignmentModel<f64>, sources: &[Analytic], spec: &QuadratureSpec) -> Result<BoundCheck> {
    let latents = latent_laws(model, sources)?;
    let refs: Vec<&Analytic> = latents.iter().collect();
    let w = model.weights();
    let gjsd = gjsd_quadrature(&refs, w, spec)?.value();
    let fine = spec.refined();
    let grid = Grid::covering(&refs, &fine)?;
    let (upper_bound, gap) = bound_on_grid(&refs, w, model.density(), &grid)?;
    let out = BoundCheck { upper_bound, gjsd, gap };
    if !out.holds(1e-6) {
        return Err(AubError::Quadrature(format!("bound identities violated: {out:?}")));
    }
    Ok(out)
}

/// Both sides of `H(Z) = H(X) + E[ln|det J_T(X)|]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyCheck {
    /// Quadrature entropy of the pushforward density.
    pub lhs: f64,
    /// Closed-form `H(X)` plus the Monte Carlo mean log-determinant.
    pub rhs: f64,
    pub abs_err: f64,
}

/// Checks the entropy change of variables for a flow on a Gaussian base.
/// The quadrature runs in latent space over the image of a `±span` box.
pub fn entropy_cov_check(
    flow: &dyn Flow<f64>,
    base: &Analytic,
    n_samples: usize,
    rng: &mut SeededRng,
    spec: &QuadratureSpec,
) -> Result<EntropyCheck> {
    base.validate()?;
    let d = base.dim();
    if flow.dim() != d || d > 2 {
        return Err(AubError::InvalidArgument(format!(
            "entropy check needs a flow and base of equal dimension at most 2 (flow {}, base {d})",
            flow.dim()
        )));
    }
    if n_samples == 0 {
        return Err(AubError::InvalidArgument("n_samples must be positive".into()));
    }
    let x = base.sample(n_samples, rng);
    let (_, ld) = flow.forward(&x)?;
    let rhs = base.entropy() + ld.iter().sum::<f64>() / n_samples as f64;

    let boundary = box_boundary(base, spec.span, 2001);
    let (img, _) = flow.forward(&boundary)?;
    let mut bounds = Vec::with_capacity(d);
    for i in 0..d {
        let col = img.column(i);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        bounds.push((lo, hi));
    }
    let lhs_at = |n_points: usize| -> Result<(f64, f64)> {
        let grid = Grid::new(&bounds, &[], n_points)?;
        let xs = flow.inverse(grid.points())?;
        let (_, ld) = flow.forward(&xs)?;
        let lp: Vec<f64> = xs.rows_iter().zip(&ld).map(|(x, l)| base.log_pdf(x) - l).collect();
        let mass = grid.integrate(&lp.iter().map(|&l| p_or_zero(l)).collect::<Vec<_>>());
        let h = grid.integrate(&lp.iter().map(|&l| -p_log_p(l)).collect::<Vec<_>>());
        Ok((h, mass))
    };
    let (lhs, mass) = lhs_at(spec.n_points)?;
    if !lhs.is_finite() || (mass - 1.0).abs() > 1e-4 {
        return Err(AubError::Quadrature(format!(
            "pushforward density integrates to {mass} on the latent grid; refine the grid"
        )));
    }
    Ok(EntropyCheck {
        lhs,
        rhs,
        abs_err: (lhs - rhs).abs(),
    })
}

/// Points on the boundary of the `±span` box of a Gaussian (or the support
/// box of a uniform); `n` per edge.
fn box_boundary(base: &Analytic, span: f64, n: usize) -> Matrix<f64> {
    let d = base.dim();
    let ext: Vec<(f64, f64)> = (0..d).map(|i| base.extent(i, span)).collect();
    if d == 1 {
        return Matrix::column_vector(&[ext[0].0, ext[0].1]);
    }
    let mut rows = Vec::with_capacity(4 * n);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let x = ext[0].0 + t * (ext[0].1 - ext[0].0);
        let y = ext[1].0 + t * (ext[1].1 - ext[1].0);
        rows.push(vec![x, ext[1].0]);
        rows.push(vec![x, ext[1].1]);
        rows.push(vec![ext[0].0, y]);
        rows.push(vec![ext[0].1, y]);
    }
    Matrix::from_rows(&rows).expect("rows have equal width")
}

/// Quadrature of `exp(log_prob)` over a box; used to check that a
/// density normalizes.
pub fn density_mass(density: &dyn Density<f64>, bounds: &[(f64, f64)], n_points: usize) -> Result<f64> {
    if bounds.len() != density.dim() {
        return Err(AubError::DimensionMismatch {
            expected: density.dim(),
            got: bounds.len(),
        });
    }
    let grid = Grid::new(bounds, &[], n_points)?;
    let lp = density.log_prob(grid.points())?;
    Ok(grid.integrate(&lp.iter().map(|&l| p_or_zero(l)).collect::<Vec<_>>()))
}

/// Overwrites every parameter with `N(0, scale^2)` noise, so that a freshly
/// built flow is no longer the identity.
pub fn randomize_parameters(flow: &mut dyn Flow<f64>, scale: f64, rng: &mut SeededRng) {
    for v in flow.params_mut().values_mut() {
        *v = scale * rng.normal::<f64>();
    }
}
