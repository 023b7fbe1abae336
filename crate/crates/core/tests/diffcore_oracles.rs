mod common;

use cfc_core::diffcore::{kernels, mask_maxpool, mask_orpool2, sgd_step, ConvLayer, FeatureGrid, Graph, LayerId, ParamSet};
use cfc_core::gradcheck::{self, GradcheckOptions};
use cfc_core::mask::SparsityMask;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn saconv_value(x: &FeatureGrid, mask: &SparsityMask, layer: ConvLayer) -> FeatureGrid {
    let mut params = ParamSet::new();
    let id = params.push(layer);
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let y = g.saconv(&params, xn, mask, id).unwrap();
    g.value(y).clone()
}

fn max_diff(a: &FeatureGrid, b: &FeatureGrid) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn saconv_matches_naive_oracle_5x5x1() {
    let mut r = rng(11);
    let x = uniform_grid(&mut r, 5, 5, 1);
    let layer = random_layer(&mut r, 3, 1, 1);
    let mask = random_mask(&mut r, 5, 5, 0.5);
    let got = saconv_value(&x, &mask, layer.clone());
    assert!(max_diff(&got, &naive_saconv(&x, &mask, &layer)) <= 1e-12);
}

#[test]
fn saconv_all_ones_mask_is_dense_conv() {
    let mut r = rng(12);
    let x = uniform_grid(&mut r, 6, 7, 3);
    let layer = random_layer(&mut r, 5, 3, 2);
    let got = saconv_value(&x, &SparsityMask::filled(7, 6, true), layer.clone());
    assert_eq!(got, kernels::conv_same(&x, &layer));
}

#[test]
fn saconv_fully_masked_receptive_field_is_bias() {
    let mut r = rng(13);
    let x = uniform_grid(&mut r, 7, 7, 2);
    let layer = random_layer(&mut r, 3, 2, 2);
    // Only the left two columns are observed: columns 4.. see nothing.
    let mask = SparsityMask::from_fn(7, 7, |c, _| c < 2);
    let got = saconv_value(&x, &mask, layer.clone());
    for co in 0..2 {
        for row in 0..7 {
            for col in 3..7 {
                assert_eq!(got.get(row, col, co), layer.bias[co]);
            }
        }
    }
}

#[test]
fn saconv_input_gradient_is_masked() {
    let mut r = rng(14);
    let x = uniform_grid(&mut r, 5, 6, 2);
    let mask = random_mask(&mut r, 6, 5, 0.5);
    let mut params = ParamSet::new();
    let id = params.push(random_layer(&mut r, 3, 2, 3));
    let mut g = Graph::new();
    let xn = g.input(x);
    let y = g.saconv(&params, xn, &mask, id).unwrap();
    let s = g.sum(y);
    g.backward(s, &mut params).unwrap();
    for row in 0..5 {
        for col in 0..6 {
            if !mask.get(col, row) {
                for ch in 0..2 {
                    assert_eq!(g.grad(xn).get(row, col, ch), 0.0);
                }
            }
        }
    }
}

#[test]
fn deconv_matches_scatter_oracle() {
    let mut r = rng(15);
    for _ in 0..10 {
        let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
        let (ci, co) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = uniform_grid(&mut r, rows, cols, ci);
        let layer = random_layer(&mut r, 4, ci, co);
        let got = kernels::deconv2x(&x, &layer);
        assert!(max_diff(&got, &scatter_deconv(&x, &layer)) <= 1e-12);
    }
}

#[test]
fn deconv_single_pixel_keeps_central_taps() {
    // A lone input pixel lands on taps (1..=2, 1..=2) after cropping.
    let mut r = rng(16);
    let layer = random_layer(&mut r, 4, 1, 1);
    let mut zero_bias = layer.clone();
    zero_bias.bias[0] = 0.0;
    let y = kernels::deconv2x(&FeatureGrid::scalar(1.0), &zero_bias);
    assert_eq!(y.data(), &[layer.w(0, 0, 1, 1), layer.w(0, 0, 1, 2), layer.w(0, 0, 2, 1), layer.w(0, 0, 2, 2)]);
}

#[test]
fn deconv_adjoint_identity() {
    let mut r = rng(17);
    for _ in 0..20 {
        let (rows, cols) = (r.gen_range(1..6), r.gen_range(1..6));
        let (ci, co) = (r.gen_range(1..4), r.gen_range(1..4));
        let mut layer = random_layer(&mut r, 4, ci, co);
        layer.bias.iter_mut().for_each(|b| *b = 0.0);
        let x = uniform_grid(&mut r, rows, cols, ci);
        let y = uniform_grid(&mut r, 2 * rows, 2 * cols, co);
        let lhs = kernels::deconv2x(&x, &layer).dot(&y);
        let rhs = x.dot(&kernels::conv_stride2(&y, &layer));
        assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn orpool_examples() {
    let m = SparsityMask::new(2, 2, vec![true, false, false, false]).unwrap();
    assert_eq!(mask_orpool2(&m).unwrap().bits(), &[true]);
    assert!(mask_orpool2(&SparsityMask::filled(3, 2, true)).is_err());
}

#[test]
fn finite_difference_checks_over_seeds() {
    for seed in 0..4 {
        let report = gradcheck::run(&GradcheckOptions {
            seed,
            rows: 5,
            cols: 4,
            channels: 3,
            inject_fault: false,
        })
        .unwrap();
        for c in &report.checks {
            assert!(c.pass, "seed {seed}: {c:?}");
        }
    }
}

#[test]
fn gradcheck_report_is_deterministic() {
    let opts = GradcheckOptions::default();
    assert_eq!(gradcheck::run(&opts).unwrap(), gradcheck::run(&opts).unwrap());
}

#[test]
fn sgd_quadratic_via_graph() {
    // L = w² for a 1x1 kernel acting on x = 1 with zero bias: y = w.
    let mut params = ParamSet::new();
    let id = params.push(ConvLayer::from_weights(1, 1, 1, vec![1.0], vec![0.0]).unwrap());
    let mut g = Graph::new();
    let x = g.input(FeatureGrid::scalar(1.0));
    let y = g.saconv(&params, x, &SparsityMask::filled(1, 1, true), id).unwrap();
    let zero = g.input(FeatureGrid::scalar(0.0));
    let l = g.squared_distance(y, zero, cfc_core::diffcore::Reduction::Sum).unwrap();
    g.backward(l, &mut params).unwrap();
    sgd_step(&mut params, 0.25);
    assert_eq!(params.get(LayerId(0)).weight, vec![0.5]);
    assert_eq!(params.get(LayerId(0)).weight_grad, vec![0.0]);
}

proptest! {
    #[test]
    fn saconv_oracle_random(
        seed in any::<u64>(),
        rows in 1usize..7,
        cols in 1usize..7,
        ci in 1usize..4,
        co in 1usize..3,
        k in prop::sample::select(vec![1usize, 3, 5]),
        p in 0.0f64..=1.0,
    ) {
        let mut r = rng(seed);
        let x = uniform_grid(&mut r, rows, cols, ci);
        let layer = random_layer(&mut r, k, ci, co);
        let mask = random_mask(&mut r, cols, rows, p);
        let got = saconv_value(&x, &mask, layer.clone());
        prop_assert!(max_diff(&got, &naive_saconv(&x, &mask, &layer)) <= 1e-12);
    }

    #[test]
    fn mask_maxpool_is_dilation_and_monotone(
        w in 1usize..12,
        h in 1usize..12,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let a = random_mask(&mut r, w, h, 0.2);
        let extra = random_mask(&mut r, w, h, 0.2);
        let b = SparsityMask::from_fn(w, h, |x, y| a.get(x, y) || extra.get(x, y));
        let da = mask_maxpool(&a);
        prop_assert_eq!(&da, &binary_dilation(&a));
        prop_assert!(da.is_subset_of(&mask_maxpool(&b)));
        prop_assert!(a.is_subset_of(&da));
    }
}
