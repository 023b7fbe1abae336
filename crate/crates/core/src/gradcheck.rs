//! Finite-difference verification of every differentiable op.
//!
//! Each check builds a small random graph ending in a scalar, runs the
//! reverse pass, and compares every input / parameter gradient against a
//! central difference. Coordinates whose one-sided differences disagree
//! (a ReLU, max or |·| kink within `h`) are skipped and counted.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cca2d::{self, SpectrumPolicy};
use crate::depth_io::make_synthetic_scene;
use crate::diffcore::{mask_maxpool, ConvLayer, FeatureGrid, Graph, LayerId, NodeId, ParamSet, Reduction};
use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::model::{CfcModel, LossOptions, NetworkConfig};
use crate::sparsify::{split_input, uniform_sparsifier};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end network check, whose loss passes through
/// many kinks and a cascade of eigen-decompositions.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// Flip the sign of the analytic correlation gradient. Exists only to
    /// prove the checker notices a wrong gradient.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            rows: 6,
            cols: 6,
            channels: 4,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
    pub n_skipped: usize,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub dims: [usize; 3],
    pub step: f64,
    pub checks: Vec<OpCheck>,
    pub pass: bool,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Builder<'a> = dyn Fn(&mut Graph, &ParamSet, &[NodeId]) -> Result<NodeId> + 'a;

/// A scalar function of some input grids and a parameter set.
pub struct Case<'a> {
    pub name: String,
    pub inputs: Vec<FeatureGrid>,
    pub params: ParamSet,
    pub build: Box<Builder<'a>>,
    /// Check only this many randomly chosen coordinates.
    pub max_coords: Option<usize>,
    pub tolerance: f64,
    /// Multiply every analytic gradient by this (1.0 except for fault injection).
    pub analytic_scale: f64,
}

#[derive(Clone, Copy)]
enum Coord {
    Input(usize, usize),
    Weight(usize, usize),
    Bias(usize, usize),
}

impl Case<'_> {
    fn eval(&self, inputs: &[FeatureGrid], params: &ParamSet) -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| g.input(x.clone())).collect();
        let loss = (self.build)(&mut g, params, &ids)?;
        Ok(g.value(loss).item())
    }

    fn perturbed(&self, coord: Coord, delta: f64) -> Result<f64> {
        let mut inputs = self.inputs.clone();
        let mut params = self.params.clone();
        match coord {
            Coord::Input(i, j) => inputs[i].data_mut()[j] += delta,
            Coord::Weight(l, j) => params.get_mut(LayerId(l)).weight[j] += delta,
            Coord::Bias(l, j) => params.get_mut(LayerId(l)).bias[j] += delta,
        }
        self.eval(&inputs, &params)
    }

    pub fn run(&self, rng: &mut impl Rng) -> Result<OpCheck> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.inputs.iter().map(|x| g.input(x.clone())).collect();
        let loss = (self.build)(&mut g, &self.params, &ids)?;
        let mut params = self.params.clone();
        params.zero_grad();
        g.backward(loss, &mut params)?;
        let f0 = g.value(loss).item();

        let mut coords = Vec::new();
        let mut analytic = Vec::new();
        for (i, &id) in ids.iter().enumerate() {
            for (j, &v) in g.grad(id).data().iter().enumerate() {
                coords.push(Coord::Input(i, j));
                analytic.push(v);
            }
        }
        for (l, layer) in params.layers().iter().enumerate() {
            for (j, &v) in layer.weight_grad.iter().enumerate() {
                coords.push(Coord::Weight(l, j));
                analytic.push(v);
            }
            for (j, &v) in layer.bias_grad.iter().enumerate() {
                coords.push(Coord::Bias(l, j));
                analytic.push(v);
            }
        }
        let chosen: Vec<usize> = match self.max_coords {
            Some(k) if k < coords.len() => {
                let mut v = sample(rng, coords.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..coords.len()).collect(),
        };

        let h = FD_STEP;
        let (mut max_rel, mut max_abs, mut checked, mut skipped) = (0.0f64, 0.0f64, 0, 0);
        for k in chosen {
            let plus = self.perturbed(coords[k], h)?;
            let minus = self.perturbed(coords[k], -h)?;
            let (fwd, bwd) = ((plus - f0) / h, (f0 - minus) / h);
            // A kink inside [x − h, x + h] shows up as disagreeing one-sided slopes.
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-2) {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k] * self.analytic_scale;
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
        if !(max_rel.is_finite() && max_abs.is_finite()) {
            return Err(Error::DivergedLoss { iteration: 0 });
        }
        Ok(OpCheck {
            name: self.name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            n_checked: checked,
            n_skipped: skipped,
            tolerance: self.tolerance,
            pass: checked > 0 && max_rel <= self.tolerance,
        })
    }
}

fn normal_grid(rng: &mut impl Rng, rows: usize, cols: usize, ch: usize) -> FeatureGrid {
    FeatureGrid::from_fn(rows, cols, ch, |_, _, _| crate::diffcore::standard_normal(rng))
}

fn random_layer(rng: &mut impl Rng, k: usize, c_in: usize, c_out: usize) -> ConvLayer {
    let mut l = ConvLayer::he_normal(k, c_in, c_out, k * k * c_in, rng);
    l.bias.iter_mut().for_each(|b| *b = 0.1 * crate::diffcore::standard_normal(rng));
    l
}

fn random_mask(rng: &mut impl Rng, w: usize, h: usize, p: f64) -> SparsityMask {
    SparsityMask::from_fn(w, h, |_, _| rng.gen_bool(p))
}

/// Keeps values away from zero so no ReLU kink lies within the FD step.
fn away_from_zero(mut g: FeatureGrid) -> FeatureGrid {
    for v in g.data_mut() {
        if v.abs() < 1e-3 {
            *v = if *v < 0.0 { -1e-3 - v.abs() } else { 1e-3 + *v };
        }
    }
    g
}

/// `⟨y, R⟩` for a fixed random `R`, turning any op into a scalar.
fn project(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let (r, c, ch) = g.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = normal_grid(&mut rng, r, c, ch);
    g.dot(y, w)
}

/// Correlation objective as a single op with externally computed local gradients.
pub fn corr_case<'a>(
    fd: FeatureGrid,
    fi: FeatureGrid,
    r1: f64,
    tolerance: f64,
    inject_fault: bool,
) -> Case<'a> {
    Case {
        name: "correlation".into(),
        inputs: vec![fd, fi],
        params: ParamSet::new(),
        build: Box::new(move |g, _, ids| {
            let rep = cca2d::corr_gradients_with(
                g.value(ids[0]),
                g.value(ids[1]),
                r1,
                SpectrumPolicy::Strict,
            )?;
            g.scalar_fn(
                rep.corr,
                vec![
                    (ids[0], rep.grad_fd.expect("requested")),
                    (ids[1], rep.grad_fi.expect("requested")),
                ],
            )
        }),
        max_coords: None,
        tolerance,
        analytic_scale: if inject_fault { -1.0 } else { 1.0 },
    }
}

/// All op-level cases at the given dims.
pub fn op_cases(opts: &GradcheckOptions) -> Result<Vec<Case<'static>>> {
    let GradcheckOptions {
        seed,
        rows,
        cols,
        channels,
        inject_fault,
    } = *opts;
    if rows < 2 || cols < 2 || channels < 2 {
        return Err(Error::DimensionTooSmall(format!(
            "gradcheck dims {rows}x{cols}x{channels}; need at least 2x2x2"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = DEFAULT_TOLERANCE;
    let mut cases = Vec::new();
    let case = |name: &str, inputs, params, build: Box<Builder<'static>>| Case {
        name: name.into(),
        inputs,
        params,
        build,
        max_coords: None,
        tolerance: tol,
        analytic_scale: 1.0,
    };

    // SAConv on a random mask.
    let mask = random_mask(&mut rng, cols, rows, 0.6);
    let mut params = ParamSet::new();
    params.push(random_layer(&mut rng, 3, channels, 3));
    let x = normal_grid(&mut rng, rows, cols, channels);
    let ps = rng.gen();
    cases.push(case(
        "saconv",
        vec![x],
        params,
        Box::new(move |g, p, ids| {
            let y = g.saconv(p, ids[0], &mask, LayerId(0))?;
            project(g, y, ps)
        }),
    ));

    let x = away_from_zero(normal_grid(&mut rng, rows, cols, channels));
    let ps = rng.gen();
    cases.push(case(
        "relu",
        vec![x],
        ParamSet::new(),
        Box::new(move |g, _, ids| {
            let y = g.relu(ids[0]);
            project(g, y, ps)
        }),
    ));

    let (er, ec) = (rows - rows % 2, cols - cols % 2);
    let x = normal_grid(&mut rng, er, ec, channels);
    let dmask = random_mask(&mut rng, ec, er, 0.5);
    let ps = rng.gen();
    cases.push(case(
        "downsample2",
        vec![x],
        ParamSet::new(),
        Box::new(move |g, _, ids| {
            let (y, _) = g.downsample2(ids[0], &dmask)?;
            project(g, y, ps)
        }),
    ));

    let mut params = ParamSet::new();
    params.push(random_layer(&mut rng, 4, channels, 2));
    let x = normal_grid(&mut rng, rows, cols, channels);
    let ps = rng.gen();
    cases.push(case(
        "deconv",
        vec![x],
        params,
        Box::new(move |g, p, ids| {
            let y = g.deconv(p, ids[0], LayerId(0))?;
            project(g, y, ps)
        }),
    ));

    let a = normal_grid(&mut rng, rows, cols, channels);
    let b = normal_grid(&mut rng, rows, cols, 1);
    let ps = rng.gen();
    cases.push(case(
        "concat_channels",
        vec![a, b],
        ParamSet::new(),
        Box::new(move |g, _, ids| {
            let y = g.concat_channels(ids[0], ids[1])?;
            project(g, y, ps)
        }),
    ));

    let a = normal_grid(&mut rng, rows, cols, channels);
    let b = normal_grid(&mut rng, rows, cols, channels);
    cases.push(case(
        "squared_distance",
        vec![a, b],
        ParamSet::new(),
        Box::new(|g, _, ids| g.squared_distance(ids[0], ids[1], Reduction::Mean)),
    ));

    let pred = normal_grid(&mut rng, rows, cols, 1);
    let target = normal_grid(&mut rng, rows, cols, 1);
    let mut valid = random_mask(&mut rng, cols, rows, 0.7);
    valid.set(0, 0, true);
    cases.push(case(
        "masked_mse",
        vec![pred],
        ParamSet::new(),
        Box::new(move |g, _, ids| g.masked_mse(ids[0], target.clone(), &valid)),
    ));

    let x = normal_grid(&mut rng, rows.max(3), cols.max(3), 1);
    cases.push(case(
        "laplacian_l1",
        vec![x],
        ParamSet::new(),
        Box::new(|g, _, ids| Ok(g.laplacian_l1(ids[0]))),
    ));

    // Three SAConv + ReLU + dilation stages.
    let mut params = ParamSet::new();
    let widths = [channels, 4, 4, 2];
    for w in widths.windows(2) {
        params.push(random_layer(&mut rng, 3, w[0], w[1]));
    }
    let x = normal_grid(&mut rng, rows, cols, channels);
    let mask = random_mask(&mut rng, cols, rows, 0.4);
    let ps = rng.gen();
    cases.push(case(
        "saconv_net_3layer",
        vec![x],
        params,
        Box::new(move |g, p, ids| {
            let mut x = ids[0];
            let mut m = mask.clone();
            for l in 0..3 {
                let y = g.saconv(p, x, &m, LayerId(l))?;
                x = g.relu(y);
                m = mask_maxpool(&m);
            }
            project(g, x, ps)
        }),
    ));

    let fd = normal_grid(&mut rng, rows, cols, channels.max(rows + 1));
    let fi = normal_grid(&mut rng, rows, cols, channels.max(rows + 1));
    cases.push(corr_case(fd, fi, cca2d::DEFAULT_R1, tol, inject_fault));
    Ok(cases)
}

/// End-to-end check of the training loss on a two-stage network.
pub fn end_to_end_case(seed: u64, coords: usize) -> Result<Case<'static>> {
    let mut net = NetworkConfig::desk(8, 8);
    net.channel_schedule = vec![4, 8];
    let model = CfcModel::new(net, seed)?;
    let scene = make_synthetic_scene(seed, 8, 8)?;
    let mask = uniform_sparsifier(&scene.depth_gt, 12, seed)?;
    let split = split_input(&scene.rgb, &scene.depth_gt, &mask)?;
    let gt = scene.depth_gt.clone();
    let params = model.params.clone();
    Ok(Case {
        name: "model_end_to_end".into(),
        inputs: Vec::new(),
        params,
        build: Box::new(move |g, p, _| {
            let mut m = model.clone();
            m.params = p.clone();
            let (sub, total, _) = m.forward_losses(&split, &gt, &LossOptions::default())?;
            // The model builds its own graph; it replaces the empty one handed in.
            *g = sub;
            Ok(total)
        }),
        max_coords: Some(coords),
        tolerance: END_TO_END_TOLERANCE,
        analytic_scale: 1.0,
    })
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut checks = Vec::new();
    for case in op_cases(opts)? {
        checks.push(case.run(&mut rng)?);
    }
    checks.push(end_to_end_case(opts.seed, 60)?.run(&mut rng)?);
    let pass = checks.iter().all(|c| c.pass);
    Ok(GradcheckReport {
        seed: opts.seed,
        dims: [opts.rows, opts.cols, opts.channels],
        step: FD_STEP,
        checks,
        pass,
    })
}
