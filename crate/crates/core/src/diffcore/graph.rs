use super::grid::FeatureGrid;
use super::kernels;
use super::params::{LayerId, ParamSet};
use crate::error::{Error, Result};
use crate::mask::SparsityMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// How an elementwise loss is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    SaConv {
        input: NodeId,
        mask: Vec<bool>,
        masked_input: FeatureGrid,
        layer: LayerId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Deconv {
        input: NodeId,
        layer: LayerId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Dot {
        input: NodeId,
        weights: FeatureGrid,
    },
    SquaredDistance {
        a: NodeId,
        b: NodeId,
        scale: f64,
    },
    MaskedMse {
        pred: NodeId,
        target: FeatureGrid,
        valid: Vec<bool>,
        count: usize,
    },
    LaplacianL1 {
        input: NodeId,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
    ScalarFn {
        inputs: Vec<(NodeId, FeatureGrid)>,
    },
}

#[derive(Debug)]
struct Node {
    value: FeatureGrid,
    grad: FeatureGrid,
    op: Op,
}

/// Append-only reverse-mode computation graph.
///
/// Nodes are stored in creation order, which is a topological order, so
/// `backward` simply walks the tape in reverse. Layer weights live in a
/// [`ParamSet`] owned by the caller; ops record a [`LayerId`] and the
/// backward pass accumulates into that layer's gradient buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &FeatureGrid, b: &FeatureGrid) -> Error {
    Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

/// 3x3 binary dilation (max pooling with stride 1 and same padding).
pub fn mask_maxpool(mask: &SparsityMask) -> SparsityMask {
    let (w, h) = (mask.width(), mask.height());
    SparsityMask::from_fn(w, h, |x, y| {
        let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| mask.get(xx, yy)))
    })
}

/// 2x2, stride-2 OR pooling of a mask with even dimensions.
pub fn mask_orpool2(mask: &SparsityMask) -> Result<SparsityMask> {
    let (w, h) = (mask.width(), mask.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::OddDimension { rows: h, cols: w });
    }
    Ok(SparsityMask::from_fn(w / 2, h / 2, |x, y| {
        mask.get(2 * x, 2 * y)
            || mask.get(2 * x + 1, 2 * y)
            || mask.get(2 * x, 2 * y + 1)
            || mask.get(2 * x + 1, 2 * y + 1)
    }))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FeatureGrid, op: Op) -> NodeId {
        let (r, c, ch) = value.shape();
        self.nodes.push(Node {
            value,
            grad: FeatureGrid::zeros(r, c, ch),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a leaf holding `value`; its gradient is available after `backward`.
    pub fn input(&mut self, value: FeatureGrid) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf copy of `x`'s current value: gradients stop here.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.input(v)
    }

    pub fn value(&self, id: NodeId) -> &FeatureGrid {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &FeatureGrid {
        &self.nodes[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    /// Sparsity-aware convolution: `conv(x ⊙ mask) + bias`, mask broadcast over channels.
    pub fn saconv(
        &mut self,
        params: &ParamSet,
        x: NodeId,
        mask: &SparsityMask,
        layer: LayerId,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let conv = params.get(layer);
        if mask.width() != xv.cols() || mask.height() != xv.rows() {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs features {}x{}",
                mask.height(),
                mask.width(),
                xv.rows(),
                xv.cols()
            )));
        }
        if conv.c_in != xv.channels() {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} input channels, got {}",
                conv.c_in,
                xv.channels()
            )));
        }
        if conv.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "same-padded convolution needs an odd kernel, got {}",
                conv.kernel
            )));
        }
        let mut masked = xv.clone();
        let bits = mask.bits().to_vec();
        for c in 0..masked.channels() {
            for (v, &keep) in masked.plane_mut(c).iter_mut().zip(&bits) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        let out = kernels::conv_same(&masked, conv);
        Ok(self.push(
            out,
            Op::SaConv {
                input: x,
                mask: bits,
                masked_input: masked,
                layer,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { input: x })
    }

    /// 2x2 stride-2 max pooling on features (first maximum in row-major order
    /// wins ties) together with OR pooling on the mask.
    pub fn downsample2(&mut self, x: NodeId, mask: &SparsityMask) -> Result<(NodeId, SparsityMask)> {
        let xv = self.value(x);
        let (rows, cols, channels) = xv.shape();
        if rows % 2 != 0 || cols % 2 != 0 {
            return Err(Error::OddDimension { rows, cols });
        }
        if mask.width() != cols || mask.height() != rows {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs features {rows}x{cols}",
                mask.height(),
                mask.width()
            )));
        }
        let (orows, ocols) = (rows / 2, cols / 2);
        let mut out = FeatureGrid::zeros(orows, ocols, channels);
        let mut argmax = Vec::with_capacity(orows * ocols * channels);
        for c in 0..channels {
            for r in 0..orows {
                for k in 0..ocols {
                    let mut best_idx = xv.index(2 * r, 2 * k, c);
                    let mut best = xv.data()[best_idx];
                    for (dr, dk) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = xv.index(2 * r + dr, 2 * k + dk, c);
                        if xv.data()[idx] > best {
                            best = xv.data()[idx];
                            best_idx = idx;
                        }
                    }
                    out.set(r, k, c, best);
                    argmax.push(best_idx);
                }
            }
        }
        let pooled = mask_orpool2(mask)?;
        Ok((self.push(out, Op::MaxPool2 { input: x, argmax }), pooled))
    }

    /// Transposed convolution doubling both spatial dimensions.
    pub fn deconv(&mut self, params: &ParamSet, x: NodeId, layer: LayerId) -> Result<NodeId> {
        let xv = self.value(x);
        let conv = params.get(layer);
        if conv.c_in != xv.channels() {
            return Err(Error::ShapeMismatch(format!(
                "deconv expects {} input channels, got {}",
                conv.c_in,
                xv.channels()
            )));
        }
        if conv.kernel != kernels::DECONV_KERNEL {
            return Err(Error::InvalidConfig(format!(
                "deconv kernel must be {}, got {}",
                kernels::DECONV_KERNEL,
                conv.kernel
            )));
        }
        let out = kernels::deconv2x(xv, conv);
        Ok(self.push(out, Op::Deconv { input: x, layer }))
    }

    /// Stacks the channels of `a` then `b`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(shape_err("concat", av, bv));
        }
        let mut data = Vec::with_capacity(av.data().len() + bv.data().len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = FeatureGrid::new(av.rows(), av.cols(), av.channels() + bv.channels(), data)?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(FeatureGrid::scalar(s), Op::Sum { input: x })
    }

    /// Scalar `<x, weights>` for a fixed weight grid.
    pub fn dot(&mut self, x: NodeId, weights: FeatureGrid) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.same_shape(&weights) {
            return Err(shape_err("dot", xv, &weights));
        }
        let s = xv.dot(&weights);
        Ok(self.push(FeatureGrid::scalar(s), Op::Dot { input: x, weights }))
    }

    /// `‖a − b‖²`, summed or averaged over elements.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId, reduction: Reduction) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(shape_err("squared distance", av, bv));
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / av.data().len() as f64,
        };
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(FeatureGrid::scalar(scale * s), Op::SquaredDistance { a, b, scale }))
    }

    /// Mean squared error of a single-channel prediction against a fixed
    /// target, restricted to pixels where `valid` is set.
    pub fn masked_mse(
        &mut self,
        pred: NodeId,
        target: FeatureGrid,
        valid: &SparsityMask,
    ) -> Result<NodeId> {
        let pv = self.value(pred);
        if !pv.same_shape(&target) || pv.channels() != 1 {
            return Err(shape_err("masked mse", pv, &target));
        }
        if valid.width() != pv.cols() || valid.height() != pv.rows() {
            return Err(Error::ShapeMismatch("masked mse validity mask".into()));
        }
        let count = valid.count();
        if count == 0 {
            return Err(Error::NoValidPixels);
        }
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(valid.bits())
            .filter(|(_, &v)| v)
            .map(|((p, t), _)| (p - t) * (p - t))
            .sum();
        let bits = valid.bits().to_vec();
        Ok(self.push(
            FeatureGrid::scalar(s / count as f64),
            Op::MaskedMse {
                pred,
                target,
                valid: bits,
                count,
            },
        ))
    }

    /// Mean absolute response of the 5-point Laplacian over interior pixels
    /// of every channel. Grids smaller than 3x3 have no interior and give 0.
    pub fn laplacian_l1(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols, channels) = xv.shape();
        let mut total = 0.0;
        let count = laplacian_interior_count(rows, cols, channels);
        for c in 0..channels {
            for r in 1..rows.saturating_sub(1) {
                for k in 1..cols.saturating_sub(1) {
                    total += laplacian_at(xv, r, k, c).abs();
                }
            }
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(FeatureGrid::scalar(v), Op::LaplacianL1 { input: x })
    }

    /// Linear combination of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut s = 0.0;
        for &(id, w) in terms {
            let v = self.value(id);
            if !v.is_scalar() {
                return Err(Error::NonScalarLoss {
                    rows: v.rows(),
                    cols: v.cols(),
                    channels: v.channels(),
                });
            }
            s += w * v.item();
        }
        Ok(self.push(
            FeatureGrid::scalar(s),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        ))
    }

    /// Scalar function of several nodes whose gradients were computed
    /// externally at forward time (`local_grad[i] = ∂value/∂input[i]`).
    pub fn scalar_fn(&mut self, value: f64, inputs: Vec<(NodeId, FeatureGrid)>) -> Result<NodeId> {
        for (id, g) in &inputs {
            let v = self.value(*id);
            if !v.same_shape(g) {
                return Err(shape_err("scalar fn local gradient", v, g));
            }
        }
        Ok(self.push(FeatureGrid::scalar(value), Op::ScalarFn { inputs }))
    }

    /// Accumulates `∂loss/∂node` into every node reachable from `loss` and
    /// into the gradient buffers of every layer used along the way.
    /// Repeated calls without `zero_grad` add up.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
                channels: lv.channels(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<FeatureGrid>> = vec![None; n];
        grads[loss.0] = Some(FeatureGrid::scalar(1.0));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads, params);
            self.nodes[id].grad.add_assign(&g);
        }
        Ok(())
    }

    fn propagate(
        &self,
        id: usize,
        g: &FeatureGrid,
        grads: &mut [Option<FeatureGrid>],
        params: &mut ParamSet,
    ) {
        let node = &self.nodes[id];
        let mut add = |target: NodeId, contribution: FeatureGrid| match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        };
        match &node.op {
            Op::Leaf => {}
            Op::SaConv {
                input,
                mask,
                masked_input,
                layer,
            } => {
                let l = params.get_mut(*layer);
                let (mut gw, mut gb) = (std::mem::take(&mut l.weight_grad), std::mem::take(&mut l.bias_grad));
                let mut gx = kernels::conv_same_backward(masked_input, l, g, &mut gw, &mut gb);
                l.weight_grad = gw;
                l.bias_grad = gb;
                for c in 0..gx.channels() {
                    for (v, &keep) in gx.plane_mut(c).iter_mut().zip(mask) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
                add(*input, gx);
            }
            Op::Relu { input } => {
                let xv = self.value(*input);
                let mut gx = g.clone();
                for (d, &x) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                add(*input, gx);
            }
            Op::MaxPool2 { input, argmax } => {
                let (r, c, ch) = self.value(*input).shape();
                let mut gx = FeatureGrid::zeros(r, c, ch);
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += d;
                }
                add(*input, gx);
            }
            Op::Deconv { input, layer } => {
                let xv = self.value(*input);
                let l = params.get_mut(*layer);
                let (mut gw, mut gb) = (std::mem::take(&mut l.weight_grad), std::mem::take(&mut l.bias_grad));
                kernels::deconv2x_param_grads(xv, l, g, &mut gw, &mut gb);
                l.weight_grad = gw;
                l.bias_grad = gb;
                add(*input, kernels::conv_stride2(g, l));
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).channels();
                let cb = self.value(*b).channels();
                add(*a, g.channel_slice(0, ca).expect("concat split"));
                add(*b, g.channel_slice(ca, cb).expect("concat split"));
            }
            Op::Sum { input } => {
                let (r, c, ch) = self.value(*input).shape();
                add(*input, FeatureGrid::filled(r, c, ch, g.item()));
            }
            Op::Dot { input, weights } => {
                let mut gx = weights.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= g.item());
                add(*input, gx);
            }
            Op::SquaredDistance { a, b, scale } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * scale * g.item();
                let mut ga = av.clone();
                for (d, y) in ga.data_mut().iter_mut().zip(bv.data()) {
                    *d = k * (*d - y);
                }
                let mut gb = ga.clone();
                gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                add(*a, ga);
                add(*b, gb);
            }
            Op::MaskedMse {
                pred,
                target,
                valid,
                count,
            } => {
                let pv = self.value(*pred);
                let k = 2.0 * g.item() / *count as f64;
                let mut gp = pv.clone();
                for ((d, t), &v) in gp.data_mut().iter_mut().zip(target.data()).zip(valid) {
                    *d = if v { k * (*d - t) } else { 0.0 };
                }
                add(*pred, gp);
            }
            Op::LaplacianL1 { input } => {
                let xv = self.value(*input);
                let (rows, cols, channels) = xv.shape();
                let count = laplacian_interior_count(rows, cols, channels);
                let mut gx = FeatureGrid::zeros(rows, cols, channels);
                if count > 0 {
                    let k = g.item() / count as f64;
                    for c in 0..channels {
                        for r in 1..rows - 1 {
                            for q in 1..cols - 1 {
                                let s = k * sign(laplacian_at(xv, r, q, c));
                                let d = gx.data_mut();
                                let at = |rr: usize, qq: usize| (c * rows + rr) * cols + qq;
                                d[at(r, q)] -= 4.0 * s;
                                d[at(r - 1, q)] += s;
                                d[at(r + 1, q)] += s;
                                d[at(r, q - 1)] += s;
                                d[at(r, q + 1)] += s;
                            }
                        }
                    }
                }
                add(*input, gx);
            }
            Op::WeightedSum { terms } => {
                for &(t, w) in terms {
                    add(t, FeatureGrid::scalar(w * g.item()));
                }
            }
            Op::ScalarFn { inputs } => {
                for (t, local) in inputs {
                    let mut gx = local.clone();
                    gx.data_mut().iter_mut().for_each(|v| *v *= g.item());
                    add(*t, gx);
                }
            }
        }
    }
}

fn laplacian_interior_count(rows: usize, cols: usize, channels: usize) -> usize {
    rows.saturating_sub(2) * cols.saturating_sub(2) * channels
}

#[inline]
fn laplacian_at(x: &FeatureGrid, r: usize, c: usize, ch: usize) -> f64 {
    x.get(r - 1, c, ch) + x.get(r + 1, c, ch) + x.get(r, c - 1, ch) + x.get(r, c + 1, ch)
        - 4.0 * x.get(r, c, ch)
}

/// Subgradient of |x| taking 0 at 0.
#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
