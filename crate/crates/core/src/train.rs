//! Minibatch SGD training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cca2d;
use crate::depth_io::SceneSample;
use crate::diffcore::sgd_step_filtered;
use crate::error::{Error, Result};
use crate::model::{CfcModel, LossOptions, LossWeights};
use crate::sparsify::{self, split_input, SparsifierKind, SplitInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub sparsifier: SparsifierKind,
    pub n_points: usize,
    pub orb_threshold: f64,
    pub seed: u64,
    pub r1: f64,
    pub weights: LossWeights,
    pub trans_stop_grad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            iterations: 200,
            batch_size: 4,
            sparsifier: SparsifierKind::Stereo,
            n_points: 20,
            orb_threshold: sparsify::DEFAULT_ORB_THRESHOLD,
            seed: 0,
            r1: cca2d::DEFAULT_R1,
            weights: LossWeights::default(),
            trans_stop_grad: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.n_points == 0 {
            return bad("n_points must be at least 1");
        }
        if !(self.r1 > 0.0) {
            return Err(Error::NonPositiveRegularizer(self.r1));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            weights: self.weights,
            r1: self.r1,
            trans_stop_grad: self.trans_stop_grad,
        }
    }
}

/// One line of the training log: batch-mean loss terms before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub corr: f64,
    pub l_trans: f64,
    pub l_recon: f64,
    pub l_smooth: f64,
    pub l_total: f64,
}

/// Seed of the sparsity mask drawn for scene `index`.
pub fn scene_mask_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1)
}

/// Samples one fixed mask per scene and splits it into network inputs.
pub fn prepare_splits(samples: &[SceneSample], cfg: &TrainConfig) -> Result<Vec<SplitInput>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mask = sparsify::sparsify(
                cfg.sparsifier,
                &s.rgb,
                &s.depth_gt,
                cfg.n_points,
                scene_mask_seed(cfg.seed, i),
                cfg.orb_threshold,
            )?;
            split_input(&s.rgb, &s.depth_gt, &mask)
        })
        .collect()
}

/// Trains `model` in place. `on_record` sees every record together with the
/// parameters that produced it (before the update).
///
/// A non-finite loss stops training with [`Error::DivergedLoss`]; the model
/// then holds the last finite parameters.
pub fn train(
    model: &mut CfcModel,
    samples: &[SceneSample],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&IterRecord, &CfcModel) -> Result<()>,
) -> Result<Vec<IterRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let splits = prepare_splits(samples, cfg)?;
    let opts = cfg.loss_options();
    let frozen = model.frozen_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled above"));
        }

        let scale = 1.0 / batch.len() as f64;
        let mut rec = IterRecord {
            iter,
            corr: 0.0,
            l_trans: 0.0,
            l_recon: 0.0,
            l_smooth: 0.0,
            l_total: 0.0,
        };
        for &i in &batch {
            let (mut g, total, r) = model
                .forward_losses(&splits[i], &samples[i].depth_gt, &opts)
                .map_err(|e| match e {
                    Error::NonFinite(_) | Error::NoConvergence(_) => {
                        Error::DivergedLoss { iteration: iter }
                    }
                    e => e,
                })
                .inspect_err(|_| model.params.zero_grad())?;
            let scaled = g.weighted_sum(&[(total, scale)])?;
            g.backward(scaled, &mut model.params)?;
            rec.corr += scale * r.corr;
            rec.l_trans += scale * r.l_trans;
            rec.l_recon += scale * r.l_recon;
            rec.l_smooth += scale * r.l_smooth;
            rec.l_total += scale * r.l_total;
        }
        if !rec.l_total.is_finite() {
            model.params.zero_grad();
            return Err(Error::DivergedLoss { iteration: iter });
        }
        on_record(&rec, model)?;
        records.push(rec);
        sgd_step_filtered(&mut model.params, cfg.lr, |id| !frozen.contains(&id));
        if model.params.layers().iter().any(|l| {
            l.weight.iter().chain(&l.bias).any(|v| !v.is_finite())
        }) {
            return Err(Error::DivergedLoss { iteration: iter });
        }
    }
    Ok(records)
}
