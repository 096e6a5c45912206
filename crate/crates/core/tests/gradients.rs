mod common;

use aub_core::alignment::AlignmentModel;
use aub_core::density::{Density, DensityArch, DiagonalGaussian, FlowDensity, GaussianMixture, StandardNormal};
use aub_core::flows::Flow;
use aub_core::matrix::Matrix;
use aub_core::numeric::{finite_difference_gradient, SeededRng};
use common::*;
use proptest::prelude::*;

#[test]
fn single_coupling_layer_on_eight_samples() {
    let mut rng = SeededRng::new(21);
    let flow = random_flow(&realnvp(2, 1, 5, 1, false), 0.4, &mut rng);
    let x = random_matrix(8, 2, &mut rng);
    let mut model = AlignmentModel::new(vec![boxed(flow)], Box::new(StandardNormal::new(2)), None).unwrap();
    let (a, n) = aub_gradients(&mut model, &[x]);
    assert!(max_rel_err(&a, &n) < 1e-4, "{a:?}\n{n:?}");
}

#[test]
fn coupling_stack_input_gradient() {
    let mut rng = SeededRng::new(4);
    let mut flow = random_flow(&realnvp(3, 2, 4, 1, true), 0.3, &mut rng);
    let x = random_matrix(5, 3, &mut rng);
    let gz = random_matrix(5, 3, &mut rng);
    let gld: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    flow.forward_train(&x).unwrap();
    let gx = flow.backward(&gz, &gld, false).unwrap();
    let objective = |x: &Matrix<f64>| -> f64 {
        let (z, ld) = flow.forward(x).unwrap();
        let a: f64 = z.as_slice().iter().zip(gz.as_slice()).map(|(p, q)| p * q).sum();
        a + ld.iter().zip(&gld).map(|(p, q)| p * q).sum::<f64>()
    };
    let mut probe = x.clone();
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + 1e-6;
        let plus = objective(&probe);
        probe.as_mut_slice()[i] = orig - 1e-6;
        let minus = objective(&probe);
        probe.as_mut_slice()[i] = orig;
        let fd = (plus - minus) / 2e-6;
        assert!(rel_err(gx.as_slice()[i], fd) < 1e-4, "coordinate {i}: {} vs {fd}", gx.as_slice()[i]);
    }
}

fn density_param_check(mut q: Box<dyn Density<f64>>, z: &Matrix<f64>) {
    let up: Vec<f64> = (0..z.nrows()).map(|i| 0.3 + 0.1 * i as f64).collect();
    q.params_mut().zero_grads();
    q.log_prob_train(z).unwrap();
    let gz = q.backward(&up, true).unwrap();
    let analytic = q.params().grads().to_vec();
    let objective = |d: &dyn Density<f64>, z: &Matrix<f64>| -> f64 {
        d.log_prob(z).unwrap().iter().zip(&up).map(|(l, u)| l * u).sum()
    };
    let mut store = q.params().clone();
    let fd = finite_difference_gradient(&mut store, 1e-6, |s| {
        let mut probe = q.arch().build::<f64>(&mut SeededRng::new(0)).unwrap();
        probe.params_mut().load_values(s.values()).unwrap();
        objective(probe.as_ref(), z)
    })
    .unwrap();
    assert!(max_rel_err(&analytic, &fd) < 1e-4, "{analytic:?}\n{fd:?}");
    // input gradient against the score
    let (_, score) = q.log_prob_with_score(z).unwrap();
    for (i, (g, s)) in gz.as_slice().iter().zip(score.as_slice()).enumerate() {
        let row = i / z.ncols();
        assert!(rel_err(*g, s * up[row]) < 1e-10, "{g} vs {}", s * up[row]);
    }
}

#[test]
fn diagonal_gaussian_gradients() {
    let mut rng = SeededRng::new(1);
    let q = DiagonalGaussian::new(&[0.2, -0.4, 1.0], &[0.3, -0.2, 0.5]).unwrap();
    density_param_check(Box::new(q), &random_matrix(7, 3, &mut rng));
}

#[test]
fn gaussian_mixture_gradients() {
    let mut rng = SeededRng::new(2);
    let q = random_density(&DensityArch::GaussianMixture { dim: 2, n_components: 3 }, 0.7, &mut rng);
    density_param_check(q, &random_matrix(9, 2, &mut rng));
}

#[test]
fn flow_density_gradients() {
    let mut rng = SeededRng::new(3);
    let f = random_flow(&realnvp(2, 2, 4, 1, true), 0.3, &mut rng);
    density_param_check(Box::new(FlowDensity::new(f)), &random_matrix(6, 2, &mut rng));
}

#[test]
fn standard_normal_score() {
    let z = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
    let (_, s) = StandardNormal::<f64>::new(2).log_prob_with_score(&z).unwrap();
    assert_eq!(s.as_slice(), &[-1.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn aub_gradient_matches_finite_differences(
        seed in any::<u64>(),
        dim in 1usize..=3,
        k in 1usize..=3,
        batch in 2usize..=8,
        q_kind in any::<u8>(),
        f_kinds in proptest::collection::vec(any::<u8>(), 3),
    ) {
        let mut rng = SeededRng::new(seed);
        let flows: Vec<Box<dyn Flow<f64>>> = (0..k).map(|j| small_flow(f_kinds[j], dim, &mut rng)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform(0.2, 1.0)).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let mut model = AlignmentModel::new(flows, small_density(q_kind, dim, &mut rng), Some(w)).unwrap();
        let batches: Vec<Matrix<f64>> = (0..k).map(|_| random_matrix(batch, dim, &mut rng)).collect();
        let (a, n) = aub_gradients(&mut model, &batches);
        prop_assert!(max_rel_err(&a, &n) < 1e-4, "analytic {:?}\nnumeric {:?}", a, n);
    }
}

#[test]
fn single_mixture_component_matches_its_gaussian_gradient() {
    let mix = GaussianMixture::<f64>::from_parts(&[vec![0.5, -1.0]], &[vec![0.2, -0.3]], &[0.0]).unwrap();
    let gauss = DiagonalGaussian::new(&[0.5, -1.0], &[0.2, -0.3]).unwrap();
    let z = Matrix::from_rows(&[vec![0.1, 0.2], vec![-1.5, 2.0]]).unwrap();
    let (la, sa) = mix.log_prob_with_score(&z).unwrap();
    let (lb, sb) = gauss.log_prob_with_score(&z).unwrap();
    for (a, b) in la.iter().zip(&lb).chain(sa.as_slice().iter().zip(sb.as_slice())) {
        assert!((a - b).abs() < 1e-12);
    }
}
