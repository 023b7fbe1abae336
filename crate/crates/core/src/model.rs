//! Two-branch encoder / transformer / decoder completion network.
//!
//! ```text
//! sparse depth ──► depth encoder ─────────────── F_sD ──┐
//! sparse RGB ────► RGB encoder ─► F_sI ─► transformer ─► F̂_sD   (training losses)
//! compl. RGB ────► RGB encoder ─► F_cI ─► transformer ─► F̂_cD ──┤
//!                                              concat(F_sD, F̂_cD) ─► decoder ─► D̂
//! ```
//!
//! Both RGB paths use the same encoder and transformer layers (one
//! [`LayerId`] per layer, so one storage). Encoders are stacks of
//! SAConv + ReLU + mask dilation stages with 2x2 downsampling between
//! stages; the decoder mirrors the encoder with stride-2 transposed
//! convolutions and ends in a 3x3 convolution to one channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cca2d::{self, SpectrumPolicy};
use crate::depth_io::{DepthMap, RgbImage};
use crate::diffcore::{
    checkpoint, kernels, mask_maxpool, ConvLayer, FeatureGrid, Graph, LayerId, NodeId, ParamSet,
    Reduction,
};
use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::sparsify::SplitInput;

/// Which inputs feed the network (the four ablation settings).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputConfig {
    /// Sparse depth plus complementary RGB (the full model).
    #[default]
    ComplementaryRgbSparseDepth,
    /// Sparse depth plus the full RGB frame in the decoder branch.
    DenseRgbSparseDepth,
    /// Sparse depth only: RGB encoder and transformer zeroed and frozen.
    SparseDepthOnly,
    /// Full RGB only: depth encoder zeroed and frozen.
    DenseRgbOnly,
}

impl InputConfig {
    pub fn uses_rgb(self) -> bool {
        self != InputConfig::SparseDepthOnly
    }

    pub fn uses_depth(self) -> bool {
        self != InputConfig::DenseRgbOnly
    }

    /// Whether the correlation and transformer losses are defined.
    pub fn has_cross_modal_losses(self) -> bool {
        self.uses_rgb() && self.uses_depth()
    }
}

impl std::str::FromStr for InputConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crgb+sd" | "complementary_rgb_sparse_depth" => Ok(Self::ComplementaryRgbSparseDepth),
            "rgb+sd" | "dense_rgb_sparse_depth" => Ok(Self::DenseRgbSparseDepth),
            "sd" | "sparse_depth_only" => Ok(Self::SparseDepthOnly),
            "rgb" | "dense_rgb_only" => Ok(Self::DenseRgbOnly),
            other => Err(Error::InvalidConfig(format!("unknown input config {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Encoder widths, one SAConv stage per entry; the last is the bottleneck width C.
    pub channel_schedule: Vec<usize>,
    pub input_rows: usize,
    pub input_cols: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_transformer_depth")]
    pub transformer_depth: usize,
    #[serde(default)]
    pub input_config: InputConfig,
}

fn default_kernel() -> usize {
    3
}

fn default_transformer_depth() -> usize {
    2
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk(16, 16)
    }
}

impl NetworkConfig {
    /// Desk-scale network: widths `[8, 16, 32]`, bottleneck at 1/4 resolution.
    pub fn desk(rows: usize, cols: usize) -> Self {
        Self {
            channel_schedule: vec![8, 16, 32],
            input_rows: rows,
            input_cols: cols,
            kernel_size: 3,
            transformer_depth: 2,
            input_config: InputConfig::default(),
        }
    }

    /// VGG16-width network on a 224x912 crop. Not exercised by the tests.
    pub fn full_scale() -> Self {
        Self {
            channel_schedule: vec![64, 128, 256, 512, 512],
            input_rows: 224,
            input_cols: 912,
            kernel_size: 3,
            transformer_depth: 2,
            input_config: InputConfig::default(),
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.channel_schedule.last().unwrap_or(&0)
    }

    pub fn downsamples(&self) -> usize {
        self.channel_schedule.len().saturating_sub(1)
    }

    pub fn bottleneck_dims(&self) -> (usize, usize) {
        let f = 1 << self.downsamples();
        (self.input_rows / f, self.input_cols / f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channel_schedule.is_empty() {
            return bad("channel schedule is empty".into());
        }
        if self.channel_schedule.contains(&0) {
            return bad("channel widths must be at least 1".into());
        }
        if self.bottleneck_channels() < 2 {
            return bad("bottleneck needs at least 2 channels for the covariance".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.transformer_depth == 0 {
            return bad("transformer needs at least one layer".into());
        }
        let f = 1usize << self.downsamples();
        if self.input_rows == 0
            || self.input_cols == 0
            || !self.input_rows.is_multiple_of(f)
            || !self.input_cols.is_multiple_of(f)
        {
            return bad(format!(
                "input {}x{} must be divisible by {f}",
                self.input_rows, self.input_cols
            ));
        }
        Ok(())
    }
}

/// Weights of the loss terms other than the correlation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_trans: f64,
    pub w_recon: f64,
    pub w_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_trans: 1.0,
            w_recon: 1.0,
            w_smooth: 0.1,
        }
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub corr: f64,
    pub l_cca: f64,
    pub l_trans: f64,
    pub l_recon: f64,
    pub l_smooth: f64,
    pub l_total: f64,
}

/// Options for building the training graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub r1: f64,
    /// Treat `F_sD` as a constant target in the transformer loss.
    pub trans_stop_grad: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            r1: cca2d::DEFAULT_R1,
            trans_stop_grad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stages: Vec<LayerId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub upsamplers: Vec<LayerId>,
    pub head: LayerId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Depth,
    Rgb,
}

/// Node handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub f_sd: NodeId,
    pub f_si: NodeId,
    pub fhat_sd: NodeId,
    pub fhat_cd: NodeId,
    pub prediction: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfcModel {
    config: NetworkConfig,
    pub params: ParamSet,
    pub depth_encoder: Encoder,
    pub rgb_encoder: Encoder,
    pub transformer: Vec<LayerId>,
    pub decoder: Decoder,
}

pub fn depth_to_grid(d: &DepthMap) -> FeatureGrid {
    FeatureGrid::new(
        d.height(),
        d.width(),
        1,
        d.data().iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("depth map has positive dims")
}

pub fn rgb_to_grid(rgb: &RgbImage) -> FeatureGrid {
    FeatureGrid::from_fn(rgb.height(), rgb.width(), 3, |r, c, k| {
        f64::from(rgb.get(c, r)[k])
    })
}

impl CfcModel {
    /// Builds a model with He-normal weights drawn from `seed`. Ablation
    /// configs get their unused branch zeroed.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let k = config.kernel_size;
        let conv = |params: &mut ParamSet, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng| {
            params.push(ConvLayer::he_normal(k, c_in, c_out, k * k * c_in, rng))
        };

        let encoder = |params: &mut ParamSet, c_in: usize, rng: &mut ChaCha8Rng| {
            let mut prev = c_in;
            let mut stages = Vec::new();
            for &w in &config.channel_schedule {
                stages.push(conv(params, prev, w, rng));
                prev = w;
            }
            Encoder { stages }
        };
        let depth_encoder = encoder(&mut params, 1, &mut rng);
        let rgb_encoder = encoder(&mut params, 3, &mut rng);

        let c = config.bottleneck_channels();
        let transformer = (0..config.transformer_depth)
            .map(|_| conv(&mut params, c, c, &mut rng))
            .collect();

        let mut upsamplers = Vec::new();
        let mut prev = 2 * c;
        for s in (0..config.downsamples()).rev() {
            let out = config.channel_schedule[s];
            let fan_in = prev * (kernels::DECONV_KERNEL / kernels::DECONV_STRIDE).pow(2);
            upsamplers.push(params.push(ConvLayer::he_normal(
                kernels::DECONV_KERNEL,
                prev,
                out,
                fan_in,
                &mut rng,
            )));
            prev = out;
        }
        // Linear output layer: unit-variance init instead of He.
        let head = params.push(ConvLayer::he_normal(k, prev, 1, 2 * k * k * prev, &mut rng));

        let mut model = Self {
            config,
            params,
            depth_encoder,
            rgb_encoder,
            transformer,
            decoder: Decoder { upsamplers, head },
        };
        for id in model.frozen_layers() {
            model.params.get_mut(id).zero_weights();
        }
        Ok(model)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Layers held at zero by the input configuration.
    pub fn frozen_layers(&self) -> Vec<LayerId> {
        let mut out = Vec::new();
        if !self.config.input_config.uses_rgb() {
            out.extend(&self.rgb_encoder.stages);
            out.extend(&self.transformer);
        }
        if !self.config.input_config.uses_depth() {
            out.extend(&self.depth_encoder.stages);
        }
        out
    }

    /// Zeroes every weight and bias of the RGB encoder and transformer.
    pub fn zero_rgb_branch(&mut self) {
        for &id in self.rgb_encoder.stages.iter().chain(&self.transformer) {
            self.params.get_mut(id).zero_weights();
        }
    }

    fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.config.input_rows || cols != self.config.input_cols {
            return Err(Error::ShapeMismatch(format!(
                "input {rows}x{cols} but the network expects {}x{}",
                self.config.input_rows, self.config.input_cols
            )));
        }
        Ok(())
    }

    fn encoder(&self, branch: Branch) -> &Encoder {
        match branch {
            Branch::Depth => &self.depth_encoder,
            Branch::Rgb => &self.rgb_encoder,
        }
    }

    /// Encoder stages on `graph`; returns the bottleneck node and mask.
    pub fn encode_on(
        &self,
        graph: &mut Graph,
        branch: Branch,
        input: NodeId,
        mask: &SparsityMask,
    ) -> Result<(NodeId, SparsityMask)> {
        let stages = &self.encoder(branch).stages;
        let mut x = input;
        let mut m = mask.clone();
        for (i, &layer) in stages.iter().enumerate() {
            let y = graph.saconv(&self.params, x, &m, layer)?;
            x = graph.relu(y);
            m = mask_maxpool(&m);
            if i + 1 < stages.len() {
                let (pooled, pm) = graph.downsample2(x, &m)?;
                x = pooled;
                m = pm;
            }
        }
        Ok((x, m))
    }

    /// Runs one encoder on a depth (1-channel) or RGB (3-channel) grid.
    pub fn encode(
        &self,
        branch: Branch,
        input: &FeatureGrid,
        mask: &SparsityMask,
    ) -> Result<(FeatureGrid, SparsityMask)> {
        self.check_input(input.rows(), input.cols())?;
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let (f, m) = self.encode_on(&mut g, branch, x, mask)?;
        Ok((g.value(f).clone(), m))
    }

    pub fn transform_on(
        &self,
        graph: &mut Graph,
        f_rgb: NodeId,
        mask: &SparsityMask,
    ) -> Result<NodeId> {
        let mut x = f_rgb;
        let mut m = mask.clone();
        for (i, &layer) in self.transformer.iter().enumerate() {
            x = graph.saconv(&self.params, x, &m, layer)?;
            if i + 1 < self.transformer.len() {
                x = graph.relu(x);
                m = mask_maxpool(&m);
            }
        }
        Ok(x)
    }

    /// Maps RGB-domain bottleneck features to the depth domain.
    pub fn transform_rgb_to_depth(
        &self,
        f_rgb: &FeatureGrid,
        mask: &SparsityMask,
    ) -> Result<FeatureGrid> {
        let mut g = Graph::new();
        let x = g.input(f_rgb.clone());
        let y = self.transform_on(&mut g, x, mask)?;
        Ok(g.value(y).clone())
    }

    fn decode_on(&self, graph: &mut Graph, bottleneck: NodeId) -> Result<NodeId> {
        let mut x = bottleneck;
        for &layer in &self.decoder.upsamplers {
            let y = graph.deconv(&self.params, x, layer)?;
            x = graph.relu(y);
        }
        let v = graph.value(x);
        let all = SparsityMask::filled(v.cols(), v.rows(), true);
        graph.saconv(&self.params, x, &all, self.decoder.head)
    }

    /// Builds the full forward pass for one split input on `graph`.
    pub fn forward_on(&self, graph: &mut Graph, split: &SplitInput) -> Result<ForwardNodes> {
        let (rows, cols) = (split.sparse_depth.height(), split.sparse_depth.width());
        self.check_input(rows, cols)?;
        let sd = graph.input(depth_to_grid(&split.sparse_depth));
        let (f_sd, _) = self.encode_on(graph, Branch::Depth, sd, &split.mask)?;

        let si = graph.input(rgb_to_grid(&split.sparse_rgb));
        let (f_si, m_si) = self.encode_on(graph, Branch::Rgb, si, &split.mask)?;
        let fhat_sd = self.transform_on(graph, f_si, &m_si)?;

        let (c_img, c_mask) = match self.config.input_config {
            InputConfig::ComplementaryRgbSparseDepth | InputConfig::SparseDepthOnly => {
                (rgb_to_grid(&split.comp_rgb), split.comp_mask.clone())
            }
            InputConfig::DenseRgbSparseDepth | InputConfig::DenseRgbOnly => {
                let full = add_rgb(&split.sparse_rgb, &split.comp_rgb);
                (full, SparsityMask::filled(cols, rows, true))
            }
        };
        let ci = graph.input(c_img);
        let (f_ci, m_ci) = self.encode_on(graph, Branch::Rgb, ci, &c_mask)?;
        let fhat_cd = self.transform_on(graph, f_ci, &m_ci)?;

        let bottleneck = graph.concat_channels(f_sd, fhat_cd)?;
        let prediction = self.decode_on(graph, bottleneck)?;
        Ok(ForwardNodes {
            f_sd,
            f_si,
            fhat_sd,
            fhat_cd,
            prediction,
        })
    }

    /// Dense prediction as a raw grid (may contain negative values).
    pub fn predict_grid(&self, split: &SplitInput) -> Result<FeatureGrid> {
        let mut g = Graph::new();
        let nodes = self.forward_on(&mut g, split)?;
        let out = g.value(nodes.prediction).clone();
        if !out.is_finite() {
            return Err(Error::DivergedLoss { iteration: 0 });
        }
        Ok(out)
    }

    /// Completes a depth map. Negative network outputs are clamped to 0.
    pub fn complete(&self, split: &SplitInput) -> Result<DepthMap> {
        let out = self.predict_grid(split)?;
        DepthMap::new(
            out.cols(),
            out.rows(),
            out.data().iter().map(|&v| v.max(0.0) as f32).collect(),
        )
    }

    /// Builds the training graph and returns it with the total-loss node.
    ///
    /// `L_total = −corr(F_sD, F_sI) + w_t‖F_sD − F̂_sD‖² + w_r L_recon + w_s L_smooth`,
    /// where the transformer loss is averaged over elements, `L_recon` is
    /// the mean squared error over valid groundtruth pixels and `L_smooth`
    /// the mean absolute Laplacian of the prediction. Ablation configs drop
    /// the two cross-modal terms.
    pub fn forward_losses(
        &self,
        split: &SplitInput,
        depth_gt: &DepthMap,
        opts: &LossOptions,
    ) -> Result<(Graph, NodeId, LossReport)> {
        let mut g = Graph::new();
        let nodes = self.forward_on(&mut g, split)?;
        let w = opts.weights;

        let report = cca2d::corr_gradients_with(
            g.value(nodes.f_sd),
            g.value(nodes.f_si),
            opts.r1,
            SpectrumPolicy::Lenient,
        )?;
        let corr = report.corr;
        let cross_modal = self.config.input_config.has_cross_modal_losses();

        let mut terms = Vec::new();
        let corr_node = g.scalar_fn(
            corr,
            vec![
                (nodes.f_sd, report.grad_fd.expect("gradients requested")),
                (nodes.f_si, report.grad_fi.expect("gradients requested")),
            ],
        )?;
        let target = if opts.trans_stop_grad {
            g.detach(nodes.f_sd)
        } else {
            nodes.f_sd
        };
        let trans = g.squared_distance(target, nodes.fhat_sd, Reduction::Mean)?;
        if cross_modal {
            terms.push((corr_node, -1.0));
            terms.push((trans, w.w_trans));
        }
        let gt = depth_to_grid(depth_gt);
        if gt.shape() != g.value(nodes.prediction).shape() {
            return Err(Error::ShapeMismatch("groundtruth vs prediction".into()));
        }
        let recon = g.masked_mse(nodes.prediction, gt, &depth_gt.validity())?;
        let smooth = g.laplacian_l1(nodes.prediction);
        terms.push((recon, w.w_recon));
        terms.push((smooth, w.w_smooth));
        let total = g.weighted_sum(&terms)?;

        let l_trans = g.value(trans).item();
        let report = LossReport {
            corr,
            l_cca: -corr,
            l_trans,
            l_recon: g.value(recon).item(),
            l_smooth: g.value(smooth).item(),
            l_total: g.value(total).item(),
        };
        Ok((g, total, report))
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::encode_params(&self.params, &meta)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::depth_io::write_file(path.as_ref(), &self.checkpoint_bytes())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = checkpoint::decode_params(bytes)?;
        let config: NetworkConfig = serde_json::from_str(&meta)
            .map_err(|e| Error::Checkpoint(format!("bad config metadata: {e}")))?;
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len()
            || params
                .layers()
                .iter()
                .zip(model.params.layers())
                .any(|(a, b)| (a.kernel, a.c_in, a.c_out) != (b.kernel, b.c_in, b.c_out))
        {
            return Err(Error::Checkpoint(
                "layer dimensions do not match the stored config".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&crate::depth_io::read_file(path.as_ref())?)
    }
}

fn add_rgb(a: &RgbImage, b: &RgbImage) -> FeatureGrid {
    let (ga, gb) = (rgb_to_grid(a), rgb_to_grid(b));
    let mut out = ga;
    out.add_assign(&gb);
    out
}
