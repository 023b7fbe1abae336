mod common;

use cfc_core::depth_io::{self, make_synthetic_scene, DepthMap, RgbImage, SceneSample};
use cfc_core::diffcore::{kernels, mask_maxpool, FeatureGrid, Graph, LayerId};
use cfc_core::gradcheck::end_to_end_case;
use cfc_core::mask::SparsityMask;
use cfc_core::model::*;
use cfc_core::sparsify::{split_input, uniform_sparsifier, SplitInput};
use cfc_core::train::{train, TrainConfig};
use common::*;

fn scene_split(seed: u64, size: usize, n: usize) -> (SplitInput, DepthMap) {
    let s = make_synthetic_scene(seed, size, size).unwrap();
    let m = uniform_sparsifier(&s.depth_gt, n, seed).unwrap();
    (split_input(&s.rgb, &s.depth_gt, &m).unwrap(), s.depth_gt)
}

fn scenes(n: usize, offset: u64) -> Vec<SceneSample> {
    (0..n as u64).map(|i| make_synthetic_scene(offset + i, 16, 16).unwrap()).collect()
}

#[test]
fn architecture_shares_rgb_weights() {
    let model = CfcModel::new(NetworkConfig::desk(16, 16), 0).unwrap();
    // depth encoder 3 + one RGB encoder 3 + transformer 2 + decoder 2 + head.
    assert_eq!(model.params.len(), 11);
    let first_up = model.params.get(model.decoder.upsamplers[0]);
    assert_eq!(first_up.c_in, 2 * 32);
    assert_eq!(model.params.get(model.rgb_encoder.stages[0]).c_in, 3);
    assert_eq!(model.params.get(model.depth_encoder.stages[0]).c_in, 1);
}

#[test]
fn all_ones_mask_encoder_is_plain_vgg_forward() {
    let model = CfcModel::new(NetworkConfig::desk(16, 16), 3).unwrap();
    let mut r = rng(1);
    let x = uniform_grid(&mut r, 16, 16, 3);
    let (got, m) = model.encode(Branch::Rgb, &x, &SparsityMask::filled(16, 16, true)).unwrap();
    assert_eq!(m.count(), 16);

    let mut h = x;
    for (i, &id) in model.rgb_encoder.stages.iter().enumerate() {
        h = kernels::conv_same(&h, model.params.get(id));
        h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        if i + 1 < model.rgb_encoder.stages.len() {
            h = FeatureGrid::from_fn(h.rows() / 2, h.cols() / 2, h.channels(), |r, c, k| {
                let hv = &h;
                [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dr, dc)| hv.get(2 * r + dr, 2 * c + dc, k))
                    .fold(f64::NEG_INFINITY, f64::max)
            });
        }
    }
    assert_eq!(got, h);
}

#[test]
fn encoder_mask_follows_dilation() {
    let model = CfcModel::new(NetworkConfig::desk(16, 16), 3).unwrap();
    let (sp, _) = scene_split(2, 16, 6);
    let (_, m) = model.encode(Branch::Depth, &depth_to_grid(&sp.sparse_depth), &sp.mask).unwrap();
    let mut expect = sp.mask.clone();
    for i in 0..3 {
        expect = mask_maxpool(&expect);
        if i < 2 {
            expect = cfc_core::diffcore::mask_orpool2(&expect).unwrap();
        }
    }
    assert_eq!(m, expect);
}

#[test]
fn zero_residuals_give_zero_trans_and_recon() {
    let mut model = CfcModel::new(NetworkConfig::desk(16, 16), 0).unwrap();
    for i in 0..model.params.len() {
        model.params.get_mut(LayerId(i)).zero_weights();
    }
    model.params.get_mut(model.decoder.head).bias[0] = 2.0;
    let rgb = RgbImage::new(16, 16, vec![[0.2, 0.4, 0.6]; 256]).unwrap();
    let gt = DepthMap::new(16, 16, vec![2.0; 256]).unwrap();
    let mask = uniform_sparsifier(&gt, 10, 1).unwrap();
    let split = split_input(&rgb, &gt, &mask).unwrap();
    let (_, _, r) = model.forward_losses(&split, &gt, &LossOptions::default()).unwrap();
    assert_eq!((r.l_trans, r.l_recon, r.l_smooth), (0.0, 0.0, 0.0));
}

#[test]
fn recon_loss_is_local_to_valid_pixels() {
    let model = CfcModel::new(NetworkConfig::desk(16, 16), 4).unwrap();
    let (split, gt) = scene_split(6, 16, 20);
    let pred = model.predict_grid(&split).unwrap();
    let opts = LossOptions::default();
    let (_, _, full) = model.forward_losses(&split, &gt, &opts).unwrap();
    let p = 37;
    let mut holed = gt.data().to_vec();
    holed[p] = 0.0;
    let holed = DepthMap::new(16, 16, holed).unwrap();
    let (_, _, less) = model.forward_losses(&split, &holed, &opts).unwrap();
    let removed = (pred.data()[p] - f64::from(gt.data()[p])).powi(2);
    let lhs = full.l_recon * 256.0 - less.l_recon * 255.0;
    assert!((lhs - removed).abs() <= 1e-9 * removed.max(1.0), "{lhs} vs {removed}");
}

#[test]
fn loss_terms_in_range() {
    let model = CfcModel::new(NetworkConfig::desk(16, 16), 5).unwrap();
    for seed in 0..4 {
        let (split, gt) = scene_split(seed, 16, 20);
        let (_, _, r) = model.forward_losses(&split, &gt, &LossOptions::default()).unwrap();
        assert!(r.l_cca <= 0.0 && r.l_cca >= -4.0 - 1e-6);
        assert!(r.l_trans >= 0.0 && r.l_recon >= 0.0 && r.l_smooth >= 0.0);
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut r = rng(9);
    for seed in 0..3 {
        let check = end_to_end_case(seed, 40).unwrap().run(&mut r).unwrap();
        assert!(check.pass, "{check:?}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut model = CfcModel::new(NetworkConfig::desk(16, 16), 8).unwrap();
    let before = model.clone();
    let cfg = TrainConfig { lr: 0.0, iterations: 1, ..TrainConfig::default() };
    let log = train(&mut model, &scenes(4, 0), &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(log.len(), 1);
    assert!(log[0].l_total.is_finite());
    assert_eq!(model.checkpoint_bytes(), before.checkpoint_bytes());
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = scenes(8, 50);
    let cfg = TrainConfig { iterations: 40, ..TrainConfig::default() };
    let run = || {
        let mut m = CfcModel::new(NetworkConfig::desk(16, 16), 2).unwrap();
        let log = train(&mut m, &data, &cfg, |_, _| Ok(())).unwrap();
        (log, m.checkpoint_bytes())
    };
    let (log_a, ckpt_a) = run();
    let (log_b, ckpt_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
    let (first, last) = (log_a.first().unwrap(), log_a.last().unwrap());
    assert!(last.l_total < first.l_total);
    assert!(last.l_trans < first.l_trans);
}

#[test]
fn concurrent_completion_matches_serial() {
    let model = CfcModel::new(NetworkConfig::desk(16, 16), 1).unwrap();
    let inputs: Vec<_> = (0..4).map(|s| scene_split(s, 16, 20).0).collect();
    let serial: Vec<_> = inputs.iter().map(|s| model.complete(s).unwrap()).collect();
    let parallel: Vec<_> = std::thread::scope(|sc| {
        let handles: Vec<_> = inputs.iter().map(|s| sc.spawn(|| model.complete(s).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, parallel);
}

#[test]
fn saved_model_and_prediction_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = CfcModel::new(NetworkConfig::desk(16, 16), 12).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    model.save(&ckpt).unwrap();
    let back = CfcModel::load(&ckpt).unwrap();
    assert_eq!(back, model);
    let (split, _) = scene_split(3, 16, 20);
    let pred = back.complete(&split).unwrap();
    let path = dir.path().join("p.pfm");
    depth_io::save_pfm(&pred, &path).unwrap();
    assert_eq!(depth_io::load_pfm(&path).unwrap(), model.complete(&split).unwrap());
}

#[test]
fn graph_is_reentrant_per_thread() {
    // Distinct graphs on distinct threads; nothing global is shared.
    std::thread::scope(|sc| {
        for t in 0..4 {
            sc.spawn(move || {
                let mut g = Graph::new();
                let x = g.input(FeatureGrid::filled(2, 2, 1, t as f64));
                let s = g.sum(x);
                assert_eq!(g.value(s).item(), 4.0 * t as f64);
            });
        }
    });
}

#[test]
fn trained_model_beats_mean_depth_baseline() {
    let data = scenes(32, 0);
    let mut model = CfcModel::new(NetworkConfig::desk(16, 16), 0).unwrap();
    train(&mut model, &data, &TrainConfig::default(), |_, _| Ok(())).unwrap();
    let (mut model_se, mut base_se) = (0.0, 0.0);
    for seed in 2000..2016 {
        let s = make_synthetic_scene(seed, 16, 16).unwrap();
        let mask = cfc_core::sparsify::stereo_sparsifier(&s.rgb, &s.depth_gt, 20, seed).unwrap();
        let split = split_input(&s.rgb, &s.depth_gt, &mask).unwrap();
        // Baseline: every pixel set to the mean of the observed sparse depths.
        let obs: Vec<f32> = split.sparse_depth.data().iter().copied().filter(|&d| d > 0.0).collect();
        let mean = obs.iter().sum::<f32>() / obs.len() as f32;
        let flat = DepthMap::new(16, 16, vec![mean; 256]).unwrap();
        let rmse = |p: &DepthMap| cfc_core::metrics::evaluate(p, &s.depth_gt).unwrap().rmse;
        model_se += rmse(&model.complete(&split).unwrap()).powi(2);
        base_se += rmse(&flat).powi(2);
    }
    assert!(model_se < base_se, "model {model_se} vs mean-depth {base_se}");
}
