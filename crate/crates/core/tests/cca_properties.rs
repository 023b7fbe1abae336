mod common;

use cfc_core::cca2d::{self, auto_covariance, corr_gradients, correlation, cross_covariance, inv_sqrt_sym};
use cfc_core::diffcore::FeatureGrid;
use cfc_core::gradcheck::corr_case;
use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn corr(a: &FeatureGrid, b: &FeatureGrid, r1: f64) -> f64 {
    correlation(a, b, r1).unwrap().corr
}

#[test]
fn cross_covariance_matches_naive_sum() {
    let mut r = rng(1);
    let a = uniform_grid(&mut r, 3, 2, 4);
    let b = uniform_grid(&mut r, 3, 2, 4);
    let got = cross_covariance(&a, &b).unwrap();
    assert!((got - naive_cross_cov(&a, &b)).abs().max() <= 1e-12);
}

#[test]
fn self_cross_covariance_is_unregularized_auto() {
    let mut r = rng(2);
    let a = uniform_grid(&mut r, 4, 3, 5);
    let r1 = 0.25;
    let auto = auto_covariance(&a, r1).unwrap() - DMatrix::identity(4, 4) * r1;
    assert!((cross_covariance(&a, &a).unwrap() - auto).abs().max() <= 1e-15);
}

#[test]
fn constant_channels_give_zero_cross_covariance() {
    let mut r = rng(3);
    let a = uniform_grid(&mut r, 3, 3, 4);
    let plane = uniform_grid(&mut r, 3, 3, 1);
    let b = FeatureGrid::from_fn(3, 3, 4, |row, col, _| plane.get(row, col, 0));
    assert_eq!(cross_covariance(&a, &b).unwrap().abs().max(), 0.0);
}

#[test]
fn auto_covariance_spectrum_and_symmetry() {
    let mut r = rng(4);
    for _ in 0..10 {
        let a = uniform_grid(&mut r, 5, 3, 3);
        let s = auto_covariance(&a, 1e-3).unwrap();
        assert_eq!(s, s.transpose());
        let eig = s.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= 1e-3 - 1e-12), "{eig}");
    }
}

#[test]
fn inverse_square_root_identity() {
    let mut r = rng(5);
    let i4 = DMatrix::<f64>::identity(4, 4);
    assert!((inv_sqrt_sym(&i4).unwrap() - &i4).abs().max() <= 1e-15);
    let d = inv_sqrt_sym(&DMatrix::from_diagonal(&nalgebra::dvector![4.0, 9.0])).unwrap();
    assert!((d - DMatrix::from_diagonal(&nalgebra::dvector![0.5, 1.0 / 3.0])).abs().max() <= 1e-15);
    for m in 2..7 {
        let b = DMatrix::from_fn(m, m, |_, _| r.gen_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(m, m) * 0.1;
        let root = inv_sqrt_sym(&a).unwrap();
        assert!((&root * &a * &root - DMatrix::identity(m, m)).abs().max() <= 1e-8);
    }
}

#[test]
fn self_correlation_approaches_dimension() {
    let mut r = rng(6);
    let f = uniform_grid(&mut r, 4, 4, 64);
    let c = corr(&f, &f, 1e-6);
    assert!((4.0 - 0.05 * 4.0..=4.0 + 1e-6).contains(&c), "{c}");
}

#[test]
fn shift_invariance_exact_on_dyadic_data() {
    // Dyadic values make every sum and the channel mean exact, so the
    // shifted centred factors are bit-identical.
    let mut r = rng(7);
    let dy = |r: &mut rand_chacha::ChaCha8Rng| f64::from(r.gen_range(-512i32..512)) / 256.0;
    let fd = FeatureGrid::from_fn(4, 3, 8, |_, _, _| dy(&mut r));
    let fi = FeatureGrid::from_fn(4, 3, 8, |_, _, _| dy(&mut r));
    let b = FeatureGrid::from_fn(4, 3, 1, |_, _, _| dy(&mut r));
    let shifted = FeatureGrid::from_fn(4, 3, 8, |row, col, k| fd.get(row, col, k) + b.get(row, col, 0));
    assert_eq!(corr(&fd, &fi, 1e-3).to_bits(), corr(&shifted, &fi, 1e-3).to_bits());
}

#[test]
fn orthogonal_invariance() {
    let mut r = rng(8);
    for _ in 0..5 {
        let fd = uniform_grid(&mut r, 4, 4, 8);
        let q = random_orthogonal(&mut r, 4);
        let qfd = left_multiply(&q, &fd);
        assert!((corr(&fd, &qfd, 1e-3) - corr(&fd, &fd, 1e-3)).abs() <= 1e-8);
        let fi = uniform_grid(&mut r, 4, 4, 8);
        assert!((corr(&qfd, &fi, 1e-3) - corr(&fd, &fi, 1e-3)).abs() <= 1e-8);
    }
}

#[test]
fn independent_features_decorrelate_with_more_channels() {
    let mut r = rng(9);
    let mean_corr = |r: &mut rand_chacha::ChaCha8Rng, c: usize| {
        (0..8)
            .map(|_| corr(&uniform_grid(r, 4, 4, c), &uniform_grid(r, 4, 4, c), 1e-3))
            .sum::<f64>()
            / 8.0
    };
    let (a, b, c) = (mean_corr(&mut r, 64), mean_corr(&mut r, 256), mean_corr(&mut r, 1024));
    assert!(a > b && b > c, "{a} {b} {c}");
    assert!(c < 0.5, "{c}");
}

#[test]
fn gradient_vanishes_at_perfect_correlation() {
    let mut r = rng(10);
    let f = uniform_grid(&mut r, 4, 3, 16);
    let rep = corr_gradients(&f, &f, 1e-3);
    // Fd = Fi gives repeated unit singular values: the trace-norm gradient
    // is only defined as a subgradient there.
    let rep = match rep {
        Ok(rep) => rep,
        Err(_) => cca2d::corr_gradients_with(&f, &f, 1e-3, cca2d::SpectrumPolicy::Lenient).unwrap(),
    };
    let g = rep.grad_fd.unwrap().max_abs() + rep.grad_fi.unwrap().max_abs();
    let scale = f.max_abs();
    assert!(g <= 1e-2 * scale, "gradient {g}");
}

#[test]
fn finite_differences_4x3x6() {
    let mut r = rng(11);
    for _ in 0..5 {
        let fd = uniform_grid(&mut r, 4, 3, 6);
        let fi = uniform_grid(&mut r, 4, 3, 6);
        let check = corr_case(fd, fi, 1e-3, 1e-4, false).run(&mut r).unwrap();
        assert!(check.pass, "{check:?}");
    }
}

#[test]
fn gradient_ascent_increases_correlation() {
    let mut r = rng(12);
    for _ in 0..10 {
        let fd = uniform_grid(&mut r, 4, 4, 10);
        let fi = uniform_grid(&mut r, 4, 4, 10);
        let rep = corr_gradients(&fd, &fi, 1e-3).unwrap();
        let mut stepped = fd.clone();
        stepped.add_scaled(rep.grad_fd.as_ref().unwrap(), 1e-3);
        assert!(corr(&stepped, &fi, 1e-3) > rep.corr);
    }
}

proptest! {
    #[test]
    fn bounds_and_symmetry(seed in any::<u64>(), m in 1usize..6, n in 1usize..5, c in 2usize..12) {
        let mut r = rng(seed);
        let fd = uniform_grid(&mut r, m, n, c);
        let fi = uniform_grid(&mut r, m, n, c);
        let a = corr(&fd, &fi, 1e-3);
        let b = corr(&fi, &fd, 1e-3);
        prop_assert!(a >= 0.0 && a <= m as f64 + 1e-6);
        prop_assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn svd_factors_reconstruct_m(seed in any::<u64>(), m in 1usize..7, n in 1usize..4, c in 2usize..8) {
        // Includes rank-deficient covariances (m > n·(C − 1)).
        let mut r = rng(seed);
        let rep = correlation(&uniform_grid(&mut r, m, n, c), &uniform_grid(&mut r, m, n, c), 1e-3).unwrap();
        let rebuilt = &rep.u * DMatrix::from_diagonal(&rep.s) * rep.v.transpose();
        prop_assert!((rebuilt - &rep.m).abs().max() <= 1e-12);
        let eye = DMatrix::<f64>::identity(m, m);
        prop_assert!((rep.u.transpose() * &rep.u - &eye).abs().max() <= 1e-12);
        prop_assert!((rep.v.transpose() * &rep.v - &eye).abs().max() <= 1e-12);
        prop_assert!(rep.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn shift_invariance_generic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let fd = uniform_grid(&mut r, 3, 4, 6);
        let fi = uniform_grid(&mut r, 3, 4, 6);
        let b = uniform_grid(&mut r, 3, 4, 1);
        let shifted = FeatureGrid::from_fn(3, 4, 6, |row, col, k| fd.get(row, col, k) + b.get(row, col, 0));
        prop_assert!((corr(&fd, &fi, 1e-3) - corr(&shifted, &fi, 1e-3)).abs() <= 1e-12);
    }
}
