use defectkan::bspline::{
    adapt_grid, basis_derivative, basis_eval, fit_least_squares, make_uniform_grid, spline_derivative,
    spline_eval, KnotGrid, SplineCoeffs,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn grid_strategy() -> impl Strategy<Value = KnotGrid> {
    (-3.0..1.0f64, 0.1..4.0f64, 1usize..12, 0usize..6)
        .prop_map(|(lo, width, g, k)| make_uniform_grid(lo, lo + width, g, k).unwrap())
}

proptest! {
    #[test]
    fn partition_of_unity(grid in grid_strategy(), u in 0.0..=1.0f64) {
        let x = grid.lo() + u * (grid.hi() - grid.lo());
        let s: f64 = basis_eval(&grid, x).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn local_contiguous_nonnegative(grid in grid_strategy(), u in 0.0..=1.0f64) {
        let x = grid.lo() + u * (grid.hi() - grid.lo());
        let b = basis_eval(&grid, x);
        prop_assert!(b.iter().all(|&v| v >= 0.0));
        let nz: Vec<usize> = (0..b.len()).filter(|&i| b[i] != 0.0).collect();
        prop_assert!(!nz.is_empty() && nz.len() <= grid.degree() + 1);
        prop_assert_eq!(nz[nz.len() - 1] - nz[0] + 1, nz.len());
    }

    #[test]
    fn spline_eval_is_a_dot_product(
        grid in grid_strategy(),
        u in 0.0..=1.0f64,
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..grid.basis_count()).map(|_| r.random_range(-2.0..2.0)).collect();
        let x = grid.lo() + u * (grid.hi() - grid.lo());
        let naive: f64 = basis_eval(&grid, x).iter().zip(&c).map(|(b, c)| b * c).sum();
        let v = spline_eval(&grid, &SplineCoeffs(c), x).unwrap();
        prop_assert!((v - naive).abs() <= 1e-15 * naive.abs().max(1.0));
    }

    #[test]
    fn polynomial_reproduction(k in 1usize..5, g in 1usize..8, seed in any::<u64>()) {
        let grid = make_uniform_grid(-1.0, 1.0, g, k).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let poly: Vec<f64> = (0..=k).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = |x: f64| poly.iter().rev().fold(0.0, |acc, c| acc * x + c);
        let xs = linspace(-1.0, 1.0, 200);
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let c = fit_least_squares(&grid, &xs, &ys).unwrap();
        for &x in &xs {
            prop_assert!((spline_eval(&grid, &c, x).unwrap() - f(x)).abs() < 1e-6);
        }
    }
}

#[test]
fn partition_of_unity_thousand_points() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for k in 0..=5 {
        let grid = make_uniform_grid(-1.0, 1.0, 5, k).unwrap();
        for _ in 0..1000 {
            let x = r.random_range(-1.0..=1.0);
            let s: f64 = basis_eval(&grid, x).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "k={k} x={x} sum={s}");
        }
    }
}

#[test]
fn derivative_matches_finite_differences() {
    let h = 1e-6;
    for k in 1..=4 {
        let grid = make_uniform_grid(-1.0, 1.0, 5, k).unwrap();
        let knots = grid.knots().to_vec();
        for x in linspace(-0.97, 0.97, 57) {
            // Skip points within h of a knot, where the degree-1 basis has a kink.
            if knots.iter().any(|t| (t - x).abs() < 1e-3) {
                continue;
            }
            let d = basis_derivative(&grid, x);
            let up = basis_eval(&grid, x + h);
            let down = basis_eval(&grid, x - h);
            for m in 0..d.len() {
                let fd = (up[m] - down[m]) / (2.0 * h);
                let rel = (d[m] - fd).abs() / d[m].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-6, "k={k} x={x} m={m}: {} vs {fd}", d[m]);
            }
        }
    }
}

#[test]
fn spline_derivative_of_linear_fit() {
    let grid = make_uniform_grid(-1.0, 1.0, 5, 3).unwrap();
    let xs = linspace(-1.0, 1.0, 50);
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
    let c = fit_least_squares(&grid, &xs, &ys).unwrap();
    for x in linspace(-0.9, 0.9, 19) {
        assert!((spline_derivative(&grid, &c, x).unwrap() - 3.0).abs() < 1e-6);
    }
}

#[test]
fn identity_reproduced_at_interior_points() {
    let grid = make_uniform_grid(-1.0, 1.0, 5, 3).unwrap();
    let xs = linspace(-1.0, 1.0, 200);
    let c = fit_least_squares(&grid, &xs, &xs).unwrap();
    for x in linspace(-0.99, 0.99, 100) {
        assert!((spline_eval(&grid, &c, x).unwrap() - x).abs() < 1e-8);
    }
}

/// Dense unregularized normal equations solved by LU.
#[test]
fn sine_fit_matches_dense_oracle() {
    let grid = make_uniform_grid(-1.0, 1.0, 5, 3).unwrap();
    let xs = linspace(-1.0, 1.0, 200);
    let ys: Vec<f64> = xs.iter().map(|x| (std::f64::consts::PI * x).sin()).collect();
    let nb = grid.basis_count();
    let a = DMatrix::from_fn(xs.len(), nb, |i, j| basis_eval(&grid, xs[i])[j]);
    let y = DVector::from_vec(ys.clone());
    let oracle = (a.transpose() * &a).lu().solve(&(a.transpose() * &y)).unwrap();

    let c = fit_least_squares(&grid, &xs, &ys).unwrap();
    for (i, &x) in xs.iter().enumerate() {
        let ours = ys[i] - spline_eval(&grid, &c, x).unwrap();
        let theirs = ys[i] - (a.row(i) * &oracle)[0];
        assert!((ours - theirs).abs() < 1e-8, "x={x}: {ours} vs {theirs}");
    }
}

fn assert_preserved(grid: &KnotGrid, c: &SplineCoeffs, samples: &[f64], blend: f64) {
    let (new_grid, new_c) = adapt_grid(grid, c, samples, blend).unwrap();
    assert!(new_grid.knots().windows(2).all(|w| w[0] < w[1]));
    for &x in samples {
        let old = spline_eval(grid, c, x).unwrap();
        let new = spline_eval(&new_grid, &new_c, x).unwrap();
        assert!((old - new).abs() < 1e-3, "blend {blend} x {x}: {old} vs {new}");
    }
}

fn clustered_samples(r: &mut ChaCha8Rng) -> Vec<f64> {
    let centre = r.random_range(-0.5..0.5);
    let spread = r.random_range(0.05..0.5);
    (0..64)
        .map(|_| (centre + spread * r.random_range(-1.0..1.0f64)).clamp(-1.0, 1.0))
        .collect()
}

/// Coefficients at the scale a freshly initialized layer holds.
#[test]
fn adapt_grid_preserves_initial_scale_splines() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let grid = make_uniform_grid(-1.0, 1.0, 5, 3).unwrap();
    let scale = 0.1 / 8f64.sqrt();
    for trial in 0..200 {
        let c = SplineCoeffs((0..8).map(|_| scale * r.random_range(-1.0..1.0)).collect());
        let samples = clustered_samples(&mut r);
        assert_preserved(&grid, &c, &samples, [0.0, 0.02, 0.5, 1.0][trial % 4]);
    }
}

#[test]
fn adapt_grid_preserves_smooth_splines() {
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let grid = make_uniform_grid(-1.0, 1.0, 5, 3).unwrap();
    let xs = linspace(-1.0, 1.0, 100);
    for trial in 0..40 {
        let (a, w, p) = (r.random_range(-1.0..1.0), r.random_range(0.5..2.0), r.random_range(0.0..3.0));
        let ys: Vec<f64> = xs.iter().map(|x: &f64| a * (w * x + p).sin()).collect();
        let c = fit_least_squares(&grid, &xs, &ys).unwrap();
        let samples = clustered_samples(&mut r);
        assert_preserved(&grid, &c, &samples, [0.0, 0.02, 0.5, 1.0][trial % 4]);
    }
}
