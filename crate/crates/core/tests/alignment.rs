mod common;

use aub_core::alignment::oracle::{bound_check, gjsd_quadrature, latent_laws, Analytic, QuadratureSpec};
use aub_core::alignment::{train, AlignmentModel, Mode, TrainConfig, Trainer};
use aub_core::checkpoint::Checkpoint;
use aub_core::data::gen_gaussians;
use aub_core::density::{Density, DensityArch, DiagonalGaussian, GaussianMixture, StandardNormal};
use aub_core::eval::translate;
use aub_core::flows::{Flow, FlowArch, FlowSequence};
use aub_core::matrix::Matrix;
use aub_core::numeric::{OptimizerConfig, SeededRng};
use common::*;
use proptest::prelude::*;

const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

fn affine_pair(q: DensityArch, seed: u64) -> AlignmentModel<f64> {
    let mut rng = SeededRng::new(seed);
    let arch = FlowArch::Affine { dim: 1 };
    let flows: Vec<Box<dyn Flow<f64>>> = vec![boxed(arch.build(&mut rng).unwrap()), boxed(arch.build(&mut rng).unwrap())];
    AlignmentModel::new(flows, q.build(&mut rng).unwrap(), None).unwrap()
}

fn config(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 512,
        flow_optimizer: OptimizerConfig::adam(1e-2),
        density_optimizer: OptimizerConfig::adam(1e-2),
        seed: 2,
        mode,
        patience: None,
    }
}

#[test]
fn standard_normal_metric_is_its_entropy() {
    let x = Analytic::standard_normal(1).sample(100_000, &mut SeededRng::new(1));
    let m = AlignmentModel::new(vec![boxed(FlowSequence::identity(1))], Box::new(StandardNormal::new(1)), None).unwrap();
    let v = m.aub_metric(&[x]).unwrap();
    assert!((v - HALF_LN_2PI_E).abs() < 0.02, "{v}");
}

#[test]
fn two_gaussians_align_and_translate() {
    let ds = gen_gaussians(10_000, &[(vec![0.0], vec![1.0]), (vec![4.0], vec![1.0])], 5).unwrap();
    let mut m = affine_pair(DensityArch::DiagonalGaussian { dim: 1 }, 1);
    train(&mut m, &ds, &config(Mode::Aub, 200)).unwrap();
    let test: Vec<Matrix<f64>> = ds.iter().map(|d| d.test.clone()).collect();
    let v = m.aub_metric(&test).unwrap();
    assert!((v - HALF_LN_2PI_E).abs() < 0.05, "{v}");
    let moved = translate(&m, &test[0], 0, 1).unwrap();
    let mean = moved.column_means()[0];
    assert!((mean - 4.0).abs() < 0.1, "{mean}");
    let sources = [Analytic::gaussian(0.0, 1.0), Analytic::gaussian(4.0, 1.0)];
    let latents = latent_laws(&m, &sources).unwrap();
    let g = gjsd_quadrature(&[&latents[0], &latents[1]], &[0.5, 0.5], &QuadratureSpec::default()).unwrap();
    assert!(g.value() < 0.01, "{g:?}");
}

#[test]
fn fixed_standard_normal_reduces_aub_to_independent_mle() {
    let ds = gen_gaussians(2_000, &[(vec![1.0], vec![2.0]), (vec![-3.0], vec![0.5])], 8).unwrap();
    let mut a = affine_pair(DensityArch::StandardNormal { dim: 1 }, 4);
    let mut b = affine_pair(DensityArch::StandardNormal { dim: 1 }, 4);
    train(&mut a, &ds, &config(Mode::Aub, 30)).unwrap();
    train(&mut b, &ds, &config(Mode::AlignflowMle, 30)).unwrap();
    assert_eq!(a.parameter_vector(), b.parameter_vector());
    let ck = Checkpoint::from_model(&b, Some(Mode::AlignflowMle), 4, "x");
    assert_eq!(ck.header.n_params, 4);
    assert_eq!(ck.header.density, DensityArch::StandardNormal { dim: 1 });
}

#[test]
fn mle_mode_never_touches_the_density() {
    let ds = gen_gaussians(1_000, &[(vec![0.0, 1.0], vec![1.0, 2.0]), (vec![3.0, 0.0], vec![0.5, 1.0])], 3).unwrap();
    let mut rng = SeededRng::new(0);
    let arch = realnvp(2, 2, 4, 1, true);
    let flows: Vec<Box<dyn Flow<f64>>> = vec![boxed(arch.build(&mut rng).unwrap()), boxed(arch.build(&mut rng).unwrap())];
    let mut m = AlignmentModel::new(flows, Box::new(StandardNormal::new(2)), None).unwrap();
    train(&mut m, &ds, &config(Mode::AlignflowMle, 5)).unwrap();
    assert!(m.density().params().is_empty());
    // a learnable density is refused outright
    let flows: Vec<Box<dyn Flow<f64>>> = vec![boxed(arch.build(&mut rng).unwrap()), boxed(arch.build(&mut rng).unwrap())];
    let mut bad = AlignmentModel::new(flows, Box::new(DiagonalGaussian::standard(2)), None).unwrap();
    assert!(train(&mut bad, &ds, &config(Mode::AlignflowMle, 5)).is_err());
}

#[test]
fn lrmf_keeps_second_domain_fixed() {
    let ds = gen_gaussians(1_000, &[(vec![2.0, 0.0], vec![1.0, 1.0]), (vec![0.0, 0.0], vec![1.0, 1.0])], 3).unwrap();
    let mut rng = SeededRng::new(0);
    let flows: Vec<Box<dyn Flow<f64>>> = vec![
        boxed(realnvp(2, 2, 4, 1, true).build(&mut rng).unwrap()),
        boxed(FlowSequence::identity(2)),
    ];
    let mut m = AlignmentModel::new(flows, Box::new(DiagonalGaussian::standard(2)), None).unwrap();
    let before_q = m.density().params().values().to_vec();
    let before_t0 = m.flow(0).params().values().to_vec();
    train(&mut m, &ds, &config(Mode::Lrmf, 10)).unwrap();
    assert_ne!(m.density().params().values(), before_q.as_slice());
    assert_ne!(m.flow(0).params().values(), before_t0.as_slice());
    let x = ds[1].test.clone();
    assert_eq!(m.encode(1, &x).unwrap().0, x);

    let three: Vec<Box<dyn Flow<f64>>> = (0..3).map(|_| boxed(FlowSequence::identity(2))).collect();
    let m3 = AlignmentModel::new(three, Box::new(DiagonalGaussian::standard(2)), None).unwrap();
    assert!(Trainer::new(&m3, config(Mode::Lrmf, 1)).is_err());
}

#[test]
fn training_is_reproducible() {
    let ds = gen_gaussians(1_000, &[(vec![0.0], vec![1.0]), (vec![4.0], vec![1.0])], 5).unwrap();
    let run = || {
        let mut m = affine_pair(DensityArch::GaussianMixture { dim: 1, n_components: 2 }, 1);
        let trace = train(&mut m, &ds, &config(Mode::Aub, 20)).unwrap();
        let losses: Vec<(f64, f64)> = trace.records.iter().map(|r| (r.train_aub, r.val_aub)).collect();
        (m.parameter_vector(), losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn cycle_through_shared_latent_is_exact() {
    let mut rng = SeededRng::new(9);
    let flows: Vec<Box<dyn Flow<f64>>> = (0..3).map(|_| boxed(random_flow(&realnvp(3, 3, 8, 1, true), 0.2, &mut rng))).collect();
    let m = AlignmentModel::new(flows, Box::new(StandardNormal::new(3)), None).unwrap();
    let x = random_matrix(50, 3, &mut rng);
    for (j, jp) in [(0, 1), (1, 2), (2, 0)] {
        let back = translate(&m, &translate(&m, &x, j, jp).unwrap(), jp, j).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-8);
    }
}

fn random_source(rng: &mut SeededRng) -> Analytic {
    if rng.below(4) == 0 {
        let lo = rng.uniform(-2.0, 1.0);
        Analytic::uniform(lo, lo + rng.uniform(0.5, 2.0))
    } else {
        Analytic::gaussian(rng.uniform(-3.0, 3.0), rng.uniform(0.3, 2.0))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bound_dominates_gjsd(seed in any::<u64>(), k in 2usize..=3, mixture in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let flows: Vec<Box<dyn Flow<f64>>> = (0..k)
            .map(|_| boxed(FlowSequence::affine(&[rng.uniform(0.4, 2.0)], &[rng.uniform(-1.0, 1.0)]).unwrap()))
            .collect();
        let q: Box<dyn Density<f64>> = if mixture {
            Box::new(GaussianMixture::from_parts(
                &[vec![rng.uniform(-1.0, 1.0)], vec![rng.uniform(-1.0, 1.0)]],
                &[vec![rng.uniform(-0.5, 1.0)], vec![rng.uniform(-0.5, 1.0)]],
                &[0.0, rng.uniform(-1.0, 1.0)],
            ).unwrap())
        } else {
            Box::new(DiagonalGaussian::new(&[rng.uniform(-1.0, 1.0)], &[rng.uniform(-0.5, 1.0)]).unwrap())
        };
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform(0.2, 1.0)).collect();
        let s: f64 = raw.iter().sum();
        let m = AlignmentModel::new(flows, q, Some(raw.iter().map(|v| v / s).collect())).unwrap();
        let sources: Vec<Analytic> = (0..k).map(|_| random_source(&mut rng)).collect();
        let b = bound_check(&m, &sources, &QuadratureSpec::default()).unwrap();
        prop_assert!(b.upper_bound >= b.gjsd - 1e-6);
        prop_assert!((b.upper_bound - b.gjsd - b.gap).abs() <= 1e-6);
        prop_assert!(b.gap >= -1e-9);
    }

    // With the flows held fixed, the moment-matched Gaussian is the best
    // density in its family, so the density step can only tighten the bound.
    #[test]
    fn moment_matched_density_minimizes_bound(seed in any::<u64>(), k in 1usize..=3, dim in 1usize..=2) {
        let mut rng = SeededRng::new(seed);
        let flows: Vec<Box<dyn Flow<f64>>> = (0..k).map(|_| {
            let a: Vec<f64> = (0..dim).map(|_| rng.uniform(0.3, 2.0)).collect();
            let b: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            boxed(FlowSequence::affine(&a, &b).unwrap())
        }).collect();
        let batches: Vec<Matrix<f64>> = (0..k).map(|_| random_matrix(20, dim, &mut rng)).collect();
        let mut m = AlignmentModel::new(flows, Box::new(DiagonalGaussian::standard(dim)), None).unwrap();
        let w = m.weights().to_vec();
        let mut mean = vec![0.0; dim];
        let mut second = vec![0.0; dim];
        for (j, x) in batches.iter().enumerate() {
            let (z, _) = m.encode(j, x).unwrap();
            for row in z.rows_iter() {
                for c in 0..dim {
                    mean[c] += w[j] * row[c] / z.nrows() as f64;
                    second[c] += w[j] * row[c] * row[c] / z.nrows() as f64;
                }
            }
        }
        let log_var: Vec<f64> = (0..dim).map(|c| (second[c] - mean[c] * mean[c]).ln()).collect();
        let mut best = mean.clone();
        best.extend(&log_var);
        m.density_mut().params_mut().load_values(&best).unwrap();
        let optimum = m.aub_loss(&batches).unwrap();
        for _ in 0..5 {
            let probe: Vec<f64> = best.iter().map(|v| v + 0.2 * rng.normal::<f64>()).collect();
            m.density_mut().params_mut().load_values(&probe).unwrap();
            prop_assert!(m.aub_loss(&batches).unwrap() >= optimum - 1e-12);
        }
    }
}
