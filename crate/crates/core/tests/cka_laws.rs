use llab_core::cka::{self, cka, cka_grid, cov, OutputMatrix};
use llab_core::corruption::NoiseSpec;
use llab_core::data::{generate_dataset, Task};
use llab_core::model::{build_model, ModelSpec};
use llab_core::train::{train, Regularizer, TrainConfig};
use llab_testkit::naive_cov;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_matrix(r: &mut ChaCha8Rng, m: usize, d: usize) -> OutputMatrix {
    OutputMatrix::new(m, d, (0..m * d).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        cols.push(v);
    }
    let mut q = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            q[i * d + j] = c[i];
        }
    }
    q
}

fn times(x: &OutputMatrix, q: &[f64]) -> OutputMatrix {
    let d = x.cols;
    let mut out = vec![0.0; x.rows * d];
    for i in 0..x.rows {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| x.data[i * d + k] * q[k * d + j]).sum();
        }
    }
    OutputMatrix::new(x.rows, d, out).unwrap()
}

#[test]
fn self_similarity_and_symmetry() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x = random_matrix(&mut r, 10, 4);
        let y = random_matrix(&mut r, 10, 4);
        assert!((cka(&x, &x).unwrap().unwrap() - 1.0).abs() <= 1e-6);
        let (a, b) = (cka(&x, &y).unwrap().unwrap(), cka(&y, &x).unwrap().unwrap());
        assert!((a - b).abs() <= 1e-12);
        assert!((0.0..=1.0 + 1e-12).contains(&a));
    }
}

#[test]
fn scale_translation_and_rotation_invariance() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x = random_matrix(&mut r, 12, 5);
        let c: f64 = r.random_range(0.01..50.0);
        let shift: Vec<f64> = (0..5).map(|_| r.random_range(-10.0..10.0)).collect();
        let y = OutputMatrix::new(12, 5, x.data.iter().enumerate().map(|(i, v)| c * v + shift[i % 5]).collect()).unwrap();
        assert!((cka(&x, &y).unwrap().unwrap() - 1.0).abs() <= 1e-6);
        let q = random_orthogonal(&mut r, 5);
        let z = random_matrix(&mut r, 12, 5);
        let a = cka(&x, &z).unwrap().unwrap();
        let b = cka(&times(&x, &q), &z).unwrap().unwrap();
        assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        assert!((cka(&x, &times(&x, &q)).unwrap().unwrap() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn cov_matches_naive_trace_formula() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for (m, dx, dy) in [(2, 1, 1), (5, 3, 2), (10, 64, 64), (17, 1, 4)] {
        let x = random_matrix(&mut r, m, dx);
        let y = random_matrix(&mut r, m, dy);
        let fast = cov(&x, &y).unwrap();
        let slow = naive_cov(&x.data, dx, &y.data, dy, m);
        assert!((fast - slow).abs() <= 1e-8 * slow.abs().max(1.0), "{} vs {}", fast, slow);
    }
}

#[test]
fn simultaneous_row_permutation_changes_nothing() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = random_matrix(&mut r, 10, 3);
    let y = random_matrix(&mut r, 10, 3);
    let mut perm: Vec<usize> = (0..10).collect();
    perm.shuffle(&mut r);
    let pick = |m: &OutputMatrix| {
        OutputMatrix::new(10, 3, perm.iter().flat_map(|&i| m.data[i * 3..i * 3 + 3].to_vec()).collect()).unwrap()
    };
    let a = cka(&x, &y).unwrap().unwrap();
    let b = cka(&pick(&x), &pick(&y)).unwrap().unwrap();
    assert!((a - b).abs() <= 1e-8);
}

#[test]
fn constant_outputs_are_undefined_not_zero() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(&mut r, 6, 2);
    let c = OutputMatrix::new(6, 2, [0.25, -3.0].repeat(6)).unwrap();
    assert_eq!(cka(&x, &c).unwrap(), None);
    let m = cka::cka_matrix(&[x.clone(), c, x]).unwrap();
    assert_eq!(m.pairwise[0][1], None);
    assert!((m.pairwise[0][2].unwrap() - 1.0).abs() <= 1e-12);
    // Only the defined pair contributes to the summary.
    assert!((m.mean_offdiag.unwrap() - 1.0).abs() <= 1e-12);
}

/// Reported sweep: mean CKA of fixed trained instances as m grows. Asserted
/// only as non-increasing within 0.05.
#[test]
fn sample_count_sweep_on_trained_surrogates() {
    let data = generate_dataset(Task::Autoencode, 160, 11).unwrap();
    let spec = ModelSpec::econ_s();
    let mut trained = Vec::new();
    for seed in 0..3 {
        let (m, p) = build_model(spec.clone(), seed).unwrap();
        let mut cfg = TrainConfig::new(m.name(), Regularizer::None, Some(8), seed);
        cfg.epochs = 3;
        trained.push(train(&m, p, &data, &cfg).unwrap());
    }
    let models: Vec<_> = trained.iter().map(|t| (&t.model, &t.params)).collect();
    let mut means = Vec::new();
    for m in [10, 20, 32] {
        let g = cka_grid(&models, &data.test, m, None, 0).unwrap();
        means.push(g.mean_offdiag.unwrap());
    }
    println!("m sweep mean CKA: {:?}", means);
    for w in means.windows(2) {
        assert!(w[1] <= w[0] + 0.05, "{:?}", means);
    }
    let noisy = cka_grid(&models, &data.test, 10, Some(&NoiseSpec::gaussian(0.1, 3)), 0).unwrap();
    assert!(noisy.noise.is_some());
    assert!(noisy.mean_offdiag.is_some());
}
