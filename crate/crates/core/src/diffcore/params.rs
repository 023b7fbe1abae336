use rand::Rng;

use crate::error::{Error, Result};

/// Convolution (or transposed convolution) weights with their gradients.
///
/// Weights are laid out `[c_out][c_in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub weight_grad: Vec<f64>,
    pub bias_grad: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(kernel: usize, c_in: usize, c_out: usize) -> Self {
        let n = kernel * kernel * c_in * c_out;
        Self {
            kernel,
            c_in,
            c_out,
            weight: vec![0.0; n],
            bias: vec![0.0; c_out],
            weight_grad: vec![0.0; n],
            bias_grad: vec![0.0; c_out],
        }
    }

    pub fn from_weights(
        kernel: usize,
        c_in: usize,
        c_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weight.len() != kernel * kernel * c_in * c_out || bias.len() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "layer {kernel}x{kernel}x{c_in}x{c_out} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite layer weight".into()));
        }
        let mut layer = Self::zeros(kernel, c_in, c_out);
        layer.weight = weight;
        layer.bias = bias;
        Ok(layer)
    }

    /// He-normal weights scaled for `fan_in` inputs, zero bias.
    pub fn he_normal<R: Rng>(kernel: usize, c_in: usize, c_out: usize, fan_in: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(kernel, c_in, c_out);
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        for w in &mut layer.weight {
            *w = std * standard_normal(rng);
        }
        layer
    }

    #[inline]
    pub fn w(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((co * self.c_in + ci) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.iter_mut().for_each(|g| *g = 0.0);
        self.bias_grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn zero_weights(&mut self) {
        self.weight.iter_mut().for_each(|g| *g = 0.0);
        self.bias.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Handle of a layer inside a [`ParamSet`]. Reusing a handle in two places
/// of a network shares one storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    layers: Vec<ConvLayer>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: ConvLayer) -> LayerId {
        self.layers.push(layer);
        LayerId(self.layers.len() - 1)
    }

    pub fn get(&self, id: LayerId) -> &ConvLayer {
        &self.layers[id.0]
    }

    pub fn get_mut(&mut self, id: LayerId) -> &mut ConvLayer {
        &mut self.layers[id.0]
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(ConvLayer::zero_grad);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn into_layers(self) -> Vec<ConvLayer> {
        self.layers
    }

    pub fn from_layers(layers: Vec<ConvLayer>) -> Self {
        Self { layers }
    }
}

/// Plain SGD: `w -= lr * dL/dw` for every weight and bias, then zero the gradients.
pub fn sgd_step(params: &mut ParamSet, lr: f64) {
    sgd_step_filtered(params, lr, |_| true);
}

/// SGD restricted to the layers selected by `update`; gradients of every
/// layer are zeroed afterwards.
pub fn sgd_step_filtered(params: &mut ParamSet, lr: f64, update: impl Fn(LayerId) -> bool) {
    for (i, layer) in params.layers.iter_mut().enumerate() {
        if update(LayerId(i)) {
            for (w, g) in layer.weight.iter_mut().zip(&layer.weight_grad) {
                *w -= lr * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(&layer.bias_grad) {
                *b -= lr * g;
            }
        }
        layer.zero_grad();
    }
}

/// Box-Muller standard normal draw.
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_grad_or_zero_lr_is_identity() {
        let mut p = ParamSet::new();
        let id = p.push(ConvLayer::from_weights(1, 1, 1, vec![0.7], vec![-0.2]).unwrap());
        let before = p.clone();
        sgd_step(&mut p, 0.5);
        assert_eq!(p, before);
        p.get_mut(id).weight_grad[0] = 3.0;
        sgd_step(&mut p, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_quadratic_closed_form() {
        // L = w^2, dL/dw = 2w; w0 = 1, lr = 0.25 -> w1 = 0.5
        let mut p = ParamSet::new();
        let id = p.push(ConvLayer::from_weights(1, 1, 1, vec![1.0], vec![0.0]).unwrap());
        let w = p.get(id).weight[0];
        p.get_mut(id).weight_grad[0] = 2.0 * w;
        sgd_step(&mut p, 0.25);
        assert_eq!(p.get(id).weight[0], 0.5);
        assert_eq!(p.get(id).weight_grad[0], 0.0);
    }
}
