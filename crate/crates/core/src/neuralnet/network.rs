use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::layers::{self, conv_output_size, Phase};
use super::loss::{softmax, softmax_cross_entropy};
use super::tensor::{Scalar, Tensor};
use crate::rng::{derive, KeyedRng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv { kernel: usize, stride: usize, pad: usize, maps: usize },
    Dense { units: usize },
    Relu,
    Dropout { rate: f64 },
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Side of the square single-channel input.
    pub input_side: usize,
    pub layers: Vec<LayerSpec>,
    pub dropout_active: bool,
    pub l2_lambda: f64,
    pub class_count: usize,
}

impl NetConfig {
    /// ZFNet-style stack with its pools replaced by stride-2 convolutions and
    /// 256-unit dense layers, for 224x224 inputs.
    pub fn standard(class_count: usize) -> Self {
        Self::strided(224, 1, class_count)
    }

    /// Reduced variant: 64x64 input and a quarter of the feature maps.
    pub fn desk(class_count: usize) -> Self {
        Self::strided(64, 4, class_count)
    }

    /// The strided all-convolutional stack for `input_side` inputs, with
    /// every convolution's map count divided by `map_divisor`.
    pub fn strided(input_side: usize, map_divisor: usize, class_count: usize) -> Self {
        let d = map_divisor.max(1);
        let convs = [(7, 2, 3, 96), (3, 2, 1, 96), (5, 2, 2, 256), (3, 2, 1, 256), (3, 1, 1, 384), (3, 1, 1, 384), (3, 1, 1, 256), (3, 2, 1, 256)];
        let mut layers = Vec::new();
        for (kernel, stride, pad, maps) in convs {
            layers.push(LayerSpec::Conv { kernel, stride, pad, maps: (maps / d).max(1) });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Flatten);
        for _ in 0..2 {
            layers.push(LayerSpec::Dense { units: 256 });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dropout { rate: 0.4 });
        }
        layers.push(LayerSpec::Dense { units: class_count });
        Self { input_side, layers, dropout_active: true, l2_lambda: 5e-4, class_count }
    }

    /// Activation shape after each layer, for a batch of one. Fails with the
    /// offending layer index when the chain is inconsistent.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let err = |layer: usize, reason: alloc::string::String| Error::Construction { layer, reason };
        let mut shape = vec![1usize, self.input_side, self.input_side];
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            shape = match (*spec, shape.as_slice()) {
                (LayerSpec::Conv { kernel, stride, pad, maps }, &[_, h, w]) => {
                    if kernel == 0 {
                        return Err(err(i, "kernel must be at least 1".into()));
                    }
                    if !(1..=2).contains(&stride) {
                        return Err(err(i, alloc::format!("stride {stride} not in {{1, 2}}")));
                    }
                    if maps == 0 {
                        return Err(err(i, "convolution needs at least one map".into()));
                    }
                    let oh = conv_output_size(h, kernel, stride, pad);
                    let ow = conv_output_size(w, kernel, stride, pad);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => vec![maps, oh, ow],
                        _ => return Err(err(i, alloc::format!("kernel {kernel} does not fit {h}x{w}"))),
                    }
                }
                (LayerSpec::Conv { .. }, s) => {
                    return Err(err(i, alloc::format!("convolution needs a 3-d activation, got {s:?}")))
                }
                (LayerSpec::Dense { units }, &[_]) => {
                    if units == 0 {
                        return Err(err(i, "dense layer needs at least one unit".into()));
                    }
                    vec![units]
                }
                (LayerSpec::Dense { .. }, s) => {
                    return Err(err(i, alloc::format!("dense layer needs a flat activation, got {s:?}")))
                }
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Relu, s) => s.to_vec(),
                (LayerSpec::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err(i, alloc::format!("dropout rate {rate} not in [0, 1)")));
                    }
                    s.to_vec()
                }
            };
            shapes.push(shape.clone());
        }
        if shape != [self.class_count] {
            return Err(err(
                self.layers.len().saturating_sub(1),
                alloc::format!("network ends in {:?}, expected {} class outputs", shape, self.class_count),
            ));
        }
        Ok(shapes)
    }

    /// Weight tensor shape of each layer (`None` for parameter-free layers).
    pub fn weight_shapes(&self) -> Result<Vec<Option<Vec<usize>>>> {
        let shapes = self.activation_shapes()?;
        let mut prev = vec![1usize, self.input_side, self.input_side];
        let mut out = Vec::with_capacity(self.layers.len());
        for (spec, shape) in self.layers.iter().zip(shapes) {
            out.push(match *spec {
                LayerSpec::Conv { kernel, maps, .. } => Some(vec![maps, prev[0], kernel, kernel]),
                LayerSpec::Dense { units } => Some(vec![units, prev[0]]),
                _ => None,
            });
            prev = shape;
        }
        Ok(out)
    }

    /// Sizes of the dense layers, in order.
    pub fn dense_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect()
    }
}

/// Connections in a fully-connected chain: the sum of adjacent size products.
pub fn count_dense_connections(sizes: &[usize]) -> u64 {
    sizes.windows(2).map(|w| w[0] as u64 * w[1] as u64).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv { stride: usize, pad: usize, weights: Tensor<T>, bias: Vec<T> },
    Dense { weights: Tensor<T>, bias: Vec<T> },
    Relu,
    Dropout { rate: f64 },
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn weights(&self) -> Option<(&Tensor<T>, &[T])> {
        match self {
            Layer::Conv { weights, bias, .. } | Layer::Dense { weights, bias } => Some((weights, bias)),
            _ => None,
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        let cb = |b: &[T]| b.iter().map(|v| U::of(v.as_f64())).collect();
        match self {
            Layer::Conv { stride, pad, weights, bias } => {
                Layer::Conv { stride: *stride, pad: *pad, weights: weights.cast(), bias: cb(bias) }
            }
            Layer::Dense { weights, bias } => Layer::Dense { weights: weights.cast(), bias: cb(bias) },
            Layer::Relu => Layer::Relu,
            Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
            Layer::Flatten => Layer::Flatten,
        }
    }
}

/// Parameters of a built network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: NetConfig,
    pub seed: u64,
    pub layers: Vec<Layer<T>>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    /// Input of each layer; `inputs[i]` feeds `layers[i]`.
    pub inputs: Vec<Tensor<T>>,
    /// Dropout multipliers per layer (only set for live dropout layers).
    pub masks: Vec<Option<Vec<T>>>,
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

/// Per-layer parameter gradients (`None` for parameter-free layers).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<(Tensor<T>, Vec<T>)>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for (w, b) in self.layers.iter().flatten() {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }
}

/// Loss of one optimization step, split into its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub data: f64,
    pub l2: f64,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.data + self.l2
    }
}

/// He-normal initialization (`std = sqrt(2 / fan_in)`), zero biases, every
/// layer drawing from its own keyed stream.
pub fn build_network<T: Scalar>(cfg: &NetConfig, seed: u64) -> Result<Network<T>> {
    if cfg.class_count == 0 {
        return Err(Error::Config("class_count must be positive".into()));
    }
    if !(cfg.l2_lambda >= 0.0) {
        return Err(Error::Config(alloc::format!("l2_lambda {} must be non-negative", cfg.l2_lambda)));
    }
    let shapes = cfg.weight_shapes()?;
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (i, (spec, shape)) in cfg.layers.iter().zip(shapes).enumerate() {
        let mut rng = KeyedRng::new(seed, i as u64);
        let mut he = |shape: Vec<usize>| {
            let fan_in: usize = shape[1..].iter().product();
            let std = libm::sqrt(2.0 / fan_in as f64);
            Tensor::from_fn(shape, |_| T::of(rng.normal() * std))
        };
        let layer = match (*spec, shape) {
            (LayerSpec::Conv { stride, pad, maps, .. }, Some(shape)) => {
                Layer::Conv { stride, pad, weights: he(shape), bias: vec![T::zero(); maps] }
            }
            (LayerSpec::Dense { units }, Some(shape)) => Layer::Dense { weights: he(shape), bias: vec![T::zero(); units] },
            (LayerSpec::Dropout { rate }, _) => Layer::Dropout { rate },
            (LayerSpec::Flatten, _) => Layer::Flatten,
            _ => Layer::Relu,
        };
        layers.push(layer);
    }
    Ok(Network { config: cfg.clone(), seed, layers })
}

impl<T: Scalar> Network<T> {
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { config: self.config.clone(), seed: self.seed, layers: self.layers.iter().map(Layer::cast).collect() }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::weights).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Weight and bias slices of every parameterized layer, in layer order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Conv { weights, bias, .. } | Layer::Dense { weights, bias } = layer {
                out.push(weights.data_mut());
                out.push(bias.as_mut_slice());
            }
        }
        out
    }

    fn dropout_live(&self, phase: Phase) -> bool {
        self.config.dropout_active && matches!(phase, Phase::Train { .. })
    }

    /// Runs `batch` (`[N, 1, side, side]`) through the network.
    pub fn forward(&self, batch: &Tensor<T>, phase: Phase) -> Result<ForwardPass<T>> {
        let side = self.config.input_side;
        match batch.shape() {
            &[_, 1, h, w] if h == side && w == side => {}
            s => {
                return Err(Error::Dimension(alloc::format!(
                    "network expects [batch, 1, {side}, {side}] input, got {s:?}"
                )))
            }
        }
        let live = self.dropout_live(phase);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, mask) = match layer {
                Layer::Conv { stride, pad, weights, bias } => {
                    (layers::conv2d_forward(&x, weights, bias, *stride, *pad)?, None)
                }
                Layer::Dense { weights, bias } => (layers::dense_forward(&x, weights, bias)?, None),
                Layer::Relu => (layers::relu_forward(&x), None),
                Layer::Flatten => (layers::flatten(&x)?, None),
                Layer::Dropout { rate } => {
                    let p = match phase {
                        Phase::Train { seed } if live => Phase::Train { seed: derive(seed, i as u64) },
                        _ => Phase::Eval,
                    };
                    layers::dropout_forward(&x, *rate, p)?
                }
            };
            inputs.push(core::mem::replace(&mut x, y));
            masks.push(mask);
        }
        let probabilities = softmax(&x)?;
        Ok(ForwardPass { inputs, masks, logits: x, probabilities })
    }

    /// Class probabilities in evaluation mode.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(batch, Phase::Eval)?.probabilities)
    }

    /// Back-propagates `grad_logits` through the cached forward pass.
    pub fn backward(&self, pass: &ForwardPass<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<(Tensor<T>, Vec<T>)>> = vec![None; self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &pass.inputs[i];
            g = match layer {
                Layer::Conv { stride, pad, weights, .. } => {
                    let (gx, gw, gb) = layers::conv2d_backward(x, weights, &g, *stride, *pad)?;
                    grads[i] = Some((gw, gb));
                    gx
                }
                Layer::Dense { weights, .. } => {
                    let (gx, gw, gb) = layers::dense_backward(x, weights, &g)?;
                    grads[i] = Some((gw, gb));
                    gx
                }
                Layer::Relu => layers::relu_backward(x, &g)?,
                Layer::Flatten => layers::flatten_backward(&g, x.shape())?,
                Layer::Dropout { .. } => layers::dropout_backward(&g, pass.masks[i].as_deref()),
            };
        }
        Ok(Gradients { layers: grads, input: g })
    }

    /// One optimization step on a labelled batch: forward, cross-entropy
    /// (plus the L2 term when `l2_lambda > 0`), backward and an Adam update.
    pub fn train_step(
        &mut self,
        adam: &mut AdamState<T>,
        batch: &Tensor<T>,
        labels: &[usize],
        phase: Phase,
    ) -> Result<StepLoss> {
        let pass = self.forward(batch, phase)?;
        let (data_loss, grad_logits) = softmax_cross_entropy(&pass.logits, labels)?;
        let mut grads = self.backward(&pass, &grad_logits)?;
        let (l2, l2_grads) = l2_penalty(self, self.config.l2_lambda);
        for (slot, extra) in grads.layers.iter_mut().zip(l2_grads) {
            if let (Some((gw, _)), Some(extra)) = (slot.as_mut(), extra) {
                for (a, b) in gw.data_mut().iter_mut().zip(extra.data()) {
                    *a += *b;
                }
            }
        }
        let gslices = grads.slices();
        let mut params = self.param_slices_mut();
        adam.step(&mut params, &gslices)?;
        Ok(StepLoss { data: data_loss.as_f64(), l2: l2.as_f64() })
    }
}

/// `(lambda / 2) * sum ||W||²` over convolution and dense weights (biases
/// excluded), with its gradient `lambda * W` per parameterized layer.
pub fn l2_penalty<T: Scalar>(net: &Network<T>, lambda: f64) -> (T, Vec<Option<Tensor<T>>>) {
    let lam = T::of(lambda);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        match layer.weights() {
            Some((w, _)) if lambda != 0.0 => {
                total += w.data().iter().map(|&v| v * v).sum::<T>();
                grads.push(Some(w.map(|v| v * lam)));
            }
            Some(_) | None => grads.push(None),
        }
    }
    if lambda == 0.0 {
        return (T::zero(), grads);
    }
    (total * lam * T::of(0.5), grads)
}
