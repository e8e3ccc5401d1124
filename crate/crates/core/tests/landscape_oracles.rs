use llab_autodiff::Tensor;
use llab_core::data::{generate_dataset, Split, Task};
use llab_core::hessian::{analyze, HessianConfig};
use llab_core::landscape::{eigen_direction, random_direction, random_pair, scan, steps, ScanRange};
use llab_core::model::{build_model, evaluate, LayerSpec, Model, ModelSpec};
use llab_core::train::{train, Regularizer, TrainConfig};
use rand::{Rng, SeedableRng};

fn cosine(a: &llab_autodiff::ParamVector, b: &llab_autodiff::ParamVector) -> f64 {
    a.dot(b).unwrap() / (a.norm() * b.norm())
}

/// Linear model without bias at its exact optimum: the loss is a quadratic
/// with minimum 0, so every slice along an eigenvector is `½λα²`.
fn linear_optimum() -> (Model, llab_autodiff::ParamVector, Split) {
    let spec = ModelSpec {
        name: "linear".into(),
        layers: vec![LayerSpec::Dense { inputs: 4, outputs: 3, bias: false }],
        input_shape: vec![4],
        output_dim: 3,
        encoder_layers: None,
    };
    let (m, p) = build_model(spec, 2).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let n = 32;
    let x = Tensor::new(vec![n, 4], (0..n * 4).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let y = m.predict(&p, &x).unwrap();
    (m, p, Split::new(x, y))
}

#[test]
fn quadratic_slice_is_the_closed_form_parabola() {
    let (m, p, split) = linear_optimum();
    let cfg = HessianConfig { k: 2, tol: 1e-8, max_iters: 1000, probes: 4, batch_size: 1000, ..HessianConfig::default() };
    let rep = analyze(&m, &p, &split, &cfg).unwrap();
    let lam = rep.eigenvalues[0];
    let sigma = eigen_direction(&rep, 1).unwrap();
    let eta = eigen_direction(&rep, 2).unwrap();
    assert!(sigma.vector.dot(&eta.vector).unwrap().abs() <= 1e-4);
    assert!((sigma.norm - 1.0).abs() <= 1e-6);
    let grid = scan(&m, &p, &split, &sigma, None, ScanRange::DEFAULT_1D, 7).unwrap();
    let base = evaluate(&m, &p, &split, 7).unwrap();
    let prof = grid.profile();
    for (i, a) in grid.alphas.iter().enumerate() {
        let want = base + 0.5 * lam * a * a;
        assert!((prof[i].unwrap() - want).abs() <= 1e-6, "α {}: {} vs {}", a, prof[i].unwrap(), want);
        let mirror = prof[prof.len() - 1 - i].unwrap();
        assert!((prof[i].unwrap() - mirror).abs() <= 1e-6);
    }
}

#[test]
fn origin_cell_is_the_clean_loss_and_scan_leaves_theta_alone() {
    let data = generate_dataset(Task::Autoencode, 60, 4).unwrap();
    let (m, p) = build_model(ModelSpec::econ_s(), 1).unwrap();
    let before = evaluate(&m, &p, &data.test, 5).unwrap();
    let snapshot = p.clone();
    let (s, e) = random_pair(&m, &p, 9).unwrap();
    let range = ScanRange { nu_min: -1.0, nu_max: 1.0, steps: 5 };
    let grid = scan(&m, &p, &data.test, &s, Some(&e), range, 5).unwrap();
    assert_eq!(grid.alphas, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    assert_eq!(grid.losses[2][2].unwrap().to_bits(), before.to_bits());
    assert_eq!(p, snapshot);
    assert_eq!(evaluate(&m, &p, &data.test, 5).unwrap().to_bits(), before.to_bits());
    assert_eq!(grid.csv().lines().count(), 1 + 25);
    let one = scan(&m, &p, &data.test, &s, None, range, 5).unwrap();
    assert_eq!(one.profile()[2].unwrap().to_bits(), before.to_bits());
}

#[test]
fn random_directions_are_filter_normalized_and_nearly_orthogonal() {
    let (m, p) = build_model(ModelSpec::econ_s(), 3).unwrap();
    let a = random_direction(&m, &p, 1).unwrap();
    let b = random_direction(&m, &p, 2).unwrap();
    assert!(cosine(&a.vector, &b.vector).abs() < 0.2);
    for seg in m.weight_segments() {
        let shape = &m.layout().segments()[seg].shape;
        let cols: usize = shape[1..].iter().product();
        let (t, d) = (p.segment(seg), a.vector.segment(seg));
        for f in 0..shape[0] {
            let n = |v: &[f32]| v[f * cols..(f + 1) * cols].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n(t) - n(d)).abs() <= 1e-5 * n(t));
        }
    }
    for seg in m.bias_segments() {
        assert!(a.vector.segment(seg).iter().all(|&x| x == 0.0));
    }
    let (s, e) = random_pair(&m, &p, 4).unwrap();
    assert!(cosine(&s.vector, &e.vector).abs() <= 1e-4);
}

#[test]
fn unit_weights_give_sqrt_fan_in_filters() {
    let spec = ModelSpec::mlp("mlp", &[9, 4, 2], LayerSpec::Relu);
    let (m, p) = build_model(spec, 0).unwrap();
    let ones = p.with_values(vec![1.0; p.len()]).unwrap();
    let d = random_direction(&m, &ones, 5).unwrap();
    let first = d.vector.segment(m.weight_segments()[0]);
    for f in 0..4 {
        let n = first[f * 9..(f + 1) * 9].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 3.0).abs() <= 1e-5);
    }
}

#[test]
fn dead_filters_get_zero_slices() {
    let spec = ModelSpec::mlp("mlp", &[3, 2, 1], LayerSpec::Sigmoid);
    let (m, p) = build_model(spec, 0).unwrap();
    let mut v = p.values().to_vec();
    v[0..3].iter_mut().for_each(|x| *x = 0.0);
    let p = p.with_values(v).unwrap();
    let d = random_direction(&m, &p, 1).unwrap();
    assert_eq!(d.dead_filters, 1);
    assert!(d.vector.values()[0..3].iter().all(|&x| x == 0.0));
    assert!(d.vector.values()[3..6].iter().any(|&x| x != 0.0));
}

#[test]
fn eigen_direction_curvature_matches_top_eigenvalue() {
    let data = generate_dataset(Task::Regress, 120, 2).unwrap();
    let spec = ModelSpec::mlp("mlp", &[256, 12, 1], LayerSpec::Sigmoid);
    let (m, p) = build_model(spec.clone(), 1).unwrap();
    let flat = |s: &Split| s.with_inputs(s.inputs.clone().reshape(vec![s.len(), 256]).unwrap());
    let data = llab_core::data::Dataset { spec: data.spec, train: flat(&data.train), test: flat(&data.test) };
    let mut cfg = TrainConfig::new(m.name(), Regularizer::None, None, 1);
    cfg.epochs = 5;
    let t = train(&m, p, &data, &cfg).unwrap();
    let hc = HessianConfig { k: 1, tol: 1e-7, max_iters: 1000, probes: 2, batch_size: 1000, ..HessianConfig::default() };
    let rep = analyze(&t.model, &t.params, &data.test, &hc).unwrap();
    let sigma = eigen_direction(&rep, 1).unwrap();
    let h = 0.05;
    let grid = scan(&t.model, &t.params, &data.test, &sigma, None, ScanRange { nu_min: -h, nu_max: h, steps: 3 }, 64)
        .unwrap();
    let l = grid.profile();
    let second = (l[0].unwrap() - 2.0 * l[1].unwrap() + l[2].unwrap()) / (h * h);
    let lam = rep.eigenvalues[0];
    println!("second difference {} vs λ₁ {}", second, lam);
    assert!((second - lam).abs() <= 0.05 * lam.abs(), "{} vs {}", second, lam);
}

#[test]
fn overflowing_cells_are_flagged_and_the_scan_continues() {
    let (m, p, split) = linear_optimum();
    let d = random_direction(&m, &p, 0).unwrap();
    let grid = scan(&m, &p, &split, &d, None, ScanRange { nu_min: -1e38, nu_max: 1e38, steps: 3 }, 8).unwrap();
    let prof = grid.profile();
    assert_eq!(prof[0], None);
    assert_eq!(prof[2], None);
    assert!(prof[1].is_some());
    assert_eq!(grid.flagged(), 2);
}

#[test]
fn step_formula() {
    assert_eq!(steps(-1.0, 1.0, 5).unwrap(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    assert!(steps(1.0, 1.0, 5).is_err());
    assert!(steps(-1.0, 1.0, 1).is_err());
}
