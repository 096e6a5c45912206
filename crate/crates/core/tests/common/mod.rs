#![allow(dead_code)]

use aub_core::alignment::{AlignmentModel, Trainer};
use aub_core::density::{Density, DensityArch, StandardNormal};
use aub_core::flows::{Flow, FlowArch, FlowSequence};
use aub_core::matrix::Matrix;
use aub_core::numeric::{finite_difference_gradient, ParamAccess, SeededRng};

/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps round-off on vanishing
/// components from dominating.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

pub fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    a.iter().zip(n).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix<f64> {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

pub fn realnvp(dim: usize, n_layers: usize, hidden_dim: usize, n_hidden: usize, normalization: bool) -> FlowArch {
    FlowArch::RealNvp {
        dim,
        n_layers,
        hidden_dim,
        n_hidden,
        scale_clamp: 5.0,
        normalization,
    }
}

/// Builds `arch` and replaces every parameter with `N(0, scale^2)` noise.
pub fn random_flow(arch: &FlowArch, scale: f64, rng: &mut SeededRng) -> FlowSequence<f64> {
    let mut f = arch.build::<f64>(rng).unwrap();
    for v in f.params_mut().values_mut() {
        *v = scale * rng.normal::<f64>();
    }
    f
}

pub fn random_density(arch: &DensityArch, scale: f64, rng: &mut SeededRng) -> Box<dyn Density<f64>> {
    let mut d = arch.build::<f64>(rng).unwrap();
    for v in d.params_mut().values_mut() {
        *v = scale * rng.normal::<f64>();
    }
    d
}

/// Analytic gradient of `aub_loss` over every parameter (flows then
/// density) next to its central finite difference.
pub fn aub_gradients(model: &mut AlignmentModel<f64>, batches: &[Matrix<f64>]) -> (Vec<f64>, Vec<f64>) {
    model.zero_grads();
    for (j, b) in batches.iter().enumerate() {
        Trainer::flow_gradient(model, j, b).unwrap();
    }
    Trainer::density_gradient(model, batches).unwrap();
    let analytic = model.gradient_vector();
    let fd = finite_difference_gradient(model, 1e-6, |m| m.aub_loss(batches).unwrap()).unwrap();
    assert_eq!(analytic.len(), model.num_params());
    (analytic, fd)
}

pub fn boxed(f: FlowSequence<f64>) -> Box<dyn Flow<f64>> {
    Box::new(f)
}

/// Small density of a class picked by `kind`, for gradient checks.
pub fn small_density(kind: u8, dim: usize, rng: &mut SeededRng) -> Box<dyn Density<f64>> {
    match kind % 4 {
        0 => Box::new(StandardNormal::new(dim)),
        1 => random_density(&DensityArch::DiagonalGaussian { dim }, 0.4, rng),
        2 => random_density(&DensityArch::GaussianMixture { dim, n_components: 2 }, 0.6, rng),
        _ if dim >= 2 => random_density(&DensityArch::Flow { flow: realnvp(dim, 1, 3, 0, true) }, 0.3, rng),
        _ => random_density(&DensityArch::GaussianMixture { dim, n_components: 3 }, 0.6, rng),
    }
}

/// Small affine or coupling flow picked by `kind`.
pub fn small_flow(kind: u8, dim: usize, rng: &mut SeededRng) -> Box<dyn Flow<f64>> {
    if dim < 2 || kind.is_multiple_of(3) {
        let a: Vec<f64> = (0..dim).map(|_| 0.5 + rng.uniform(0.0, 1.5)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        boxed(FlowSequence::affine(&a, &b).unwrap())
    } else {
        let layers = 1 + (kind as usize % 2);
        boxed(random_flow(&realnvp(dim, layers, 3 + kind as usize % 3, kind as usize % 2, kind.is_multiple_of(2)), 0.35, rng))
    }
}
