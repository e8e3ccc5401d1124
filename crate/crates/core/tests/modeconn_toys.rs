use llab_core::modeconn::{
    self, bernstein, curve_point, from_losses, max_mc, mode_connectivity, train_bends, BendConfig, BezierCurve,
    Connectivity, FullBatch,
};
use llab_core::train::Optimizer;
use llab_testkit::{grid_minimax, Quadratic, TwoBasin};
use rand::{Rng, SeedableRng};

fn basin_config() -> BendConfig {
    BendConfig { k: 2, epochs: 4000, learning_rate: 0.01, optimizer: Optimizer::Adam, seed: 3 }
}

#[test]
fn partition_of_unity_and_endpoints_on_random_t() {
    let q = Quadratic::new(vec![1.0; 9], 3);
    let a = q.params(vec![1.0, -2.0, 0.5]);
    let b = q.params(vec![-3.0, 0.25, 4.0]);
    let c = BezierCurve::new(vec![a.clone(), q.params(vec![7.0, 7.0, -7.0]), q.params(vec![0.0, 1.0, 2.0]), b.clone()])
        .unwrap();
    assert_eq!(curve_point(&c, 0.0).unwrap(), a);
    assert_eq!(curve_point(&c, 1.0).unwrap(), b);
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let t: f64 = r.random_range(0.0..=1.0);
        for k in 1..=10 {
            assert!((bernstein(k, t).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn endpoint_deviation_identity() {
    let r = from_losses([0.75, 2.5], vec![0.0, 0.5, 1.0], vec![0.75, 9.0, 2.5], None).unwrap();
    assert_eq!(r.d_values[0], (2.5 - 0.75) / 2.0);
    assert_eq!(r.d_values[2], -(2.5 - 0.75) / 2.0);
}

#[test]
fn two_basin_toy_matches_grid_oracle() {
    let toy = TwoBasin::new(1.0, 2.0);
    let (a, b) = (toy.point(-1.0, 0.0), toy.point(1.0, 0.0));
    let loss = FullBatch(&toy);
    let oracle = grid_minimax(|x, y| toy.value_at(x, y), -2.0, 4.0, 601, (-1.0, 0.0), (1.0, 0.0));
    let rep = max_mc(&[a.clone(), b.clone()], &loss, &basin_config(), modeconn::DEFAULT_POINTS + 1).unwrap();
    let mc = rep.max_mc;
    println!("two-basin mc {} vs grid barrier {}", mc, oracle);
    assert!(mc < 0.0);
    assert!((mc.abs() - oracle).abs() <= 0.05 * oracle, "mc {} oracle {}", mc, oracle);
    assert_eq!(rep.pairs[0].report.classification, Connectivity::Barrier);
    // The straight segment crosses the ridge much higher than the valley does.
    let lin = BezierCurve::linear(&a, &b, 2).unwrap();
    let straight = mode_connectivity(&lin, &loss, 61, None).unwrap();
    assert!(straight.mc < 2.0 * mc);
}

#[test]
fn bend_training_leaves_endpoints_untouched() {
    let toy = TwoBasin::new(1.0, 2.0);
    let (a, b) = (toy.point(-1.0, 0.0), toy.point(1.0, 0.0));
    let cfg = BendConfig { epochs: 50, ..basin_config() };
    let c = train_bends(&a, &b, &FullBatch(&toy), &cfg).unwrap();
    assert_eq!(c.anchors[0], a);
    assert_eq!(c.anchors[2], b);
    assert_ne!(c.anchors[1], toy.point(0.0, 0.0));
    let again = train_bends(&a, &b, &FullBatch(&toy), &cfg).unwrap();
    assert_eq!(c, again);
}

#[test]
fn convex_quadratic_curve_never_exceeds_linear_path() {
    let q = Quadratic::new(vec![2.0, 0.5, 0.5, 1.0], 2);
    let a = q.params(vec![1.5, -1.0]);
    let b = q.params(vec![-0.5, 2.0]);
    let loss = FullBatch(&q);
    let cfg = BendConfig { k: 3, epochs: 500, learning_rate: 0.01, optimizer: Optimizer::Adam, seed: 1 };
    let trained = train_bends(&a, &b, &loss, &cfg).unwrap();
    let lin = BezierCurve::linear(&a, &b, 1).unwrap();
    let max = |c: &BezierCurve| {
        modeconn::curve_losses(c, &loss, 61).unwrap().1.into_iter().fold(f64::MIN, f64::max)
    };
    assert!(max(&trained) <= max(&lin) + 1e-9);
}

#[test]
fn finer_nested_grids_never_shrink_mc() {
    let toy = TwoBasin::new(1.0, 2.0);
    let (a, b) = (toy.point(-1.0, 0.0), toy.point(1.0, 0.0));
    let cfg = BendConfig { epochs: 200, ..basin_config() };
    let loss = FullBatch(&toy);
    let c = train_bends(&a, &b, &loss, &cfg).unwrap();
    let mut last = 0.0;
    for m in [3, 5, 9, 17, 33, 65] {
        let mc = mode_connectivity(&c, &loss, m, None).unwrap().mc.abs();
        assert!(mc >= last, "m = {}: {} < {}", m, mc, last);
        last = mc;
    }
}

#[test]
fn reversed_curve_gives_same_mc() {
    let toy = TwoBasin::new(0.5, 1.0);
    let (a, b) = (toy.point(-1.0, 0.0), toy.point(1.2, 0.1));
    let loss = FullBatch(&toy);
    let c = train_bends(&a, &b, &loss, &BendConfig { epochs: 100, ..basin_config() }).unwrap();
    let fwd = mode_connectivity(&c, &loss, 61, None).unwrap();
    let back = mode_connectivity(&c.reversed(), &loss, 61, None).unwrap();
    assert!((fwd.mc - back.mc).abs() <= 1e-12);
    assert!((fwd.t_star - (1.0 - back.t_star)).abs() <= 1e-12);
}

#[test]
fn identical_models_with_untrained_bends_give_zero() {
    let toy = TwoBasin::new(1.0, 2.0);
    let a = toy.point(0.3, -0.2);
    let cfg = BendConfig { epochs: 0, ..BendConfig::default() };
    let r = max_mc(&[a.clone(), a], &FullBatch(&toy), &cfg, 60).unwrap();
    assert_eq!(r.max_mc, 0.0);
}

#[test]
fn max_mc_dominates_every_pair_in_magnitude() {
    let toy = TwoBasin::new(1.0, 1.0);
    let pts = [toy.point(-1.0, 0.0), toy.point(1.0, 0.0), toy.point(0.9, 0.3)];
    let cfg = BendConfig { epochs: 100, ..basin_config() };
    let r = max_mc(&pts, &FullBatch(&toy), &cfg, 21).unwrap();
    assert_eq!(r.pairs.len(), 3);
    for p in &r.pairs {
        assert!(r.max_mc.abs() >= p.report.mc.abs());
        assert!(r.max_mc.abs() >= p.max_pair.mc.abs());
    }
}
