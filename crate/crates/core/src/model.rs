//! Auxiliary classifier: a small fully convolutional backbone ending in a
//! three-channel class head, GAP + sigmoid prediction and the multi-label
//! soft-margin classification loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, ensure_dims, Error, Result};
use crate::tensor::{NamedTensor, Real, Tensor, Var};
use crate::tensor::Graph;

/// Clamp applied to predictions before taking logs in the classification loss.
pub const CLS_EPS: f64 = 1e-7;

/// Classes of the expanded label set, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Before = 0,
    After = 1,
    Background = 2,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Before, Class::After, Class::Background];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Before => "before",
            Class::After => "after",
            Class::Background => "background",
        }
    }

    pub fn from_name(s: &str) -> Option<Class> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One-hot target over the three classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelVector([f32; 3]);

impl LabelVector {
    pub fn one_hot(class: Class) -> Self {
        let mut z = [0.0; 3];
        z[class.index()] = 1.0;
        LabelVector(z)
    }

    pub fn values(&self) -> [f32; 3] {
        self.0
    }

    pub fn class(&self) -> Class {
        let i = self.0.iter().position(|&v| v == 1.0).unwrap_or(0);
        Class::ALL[i]
    }

    fn as_real<T: Real>(&self) -> [T; 3] {
        self.0.map(|v| T::lit(v as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// conv + ReLU blocks, padded with `kernel / 2`.
    pub blocks: Vec<ConvBlock>,
    /// Output channels of the 1×1 head.
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let block = |out_channels, kernel, stride| ConvBlock {
            out_channels,
            kernel,
            stride,
        };
        BackboneConfig {
            in_channels: 3,
            blocks: vec![block(16, 3, 2), block(32, 3, 2), block(32, 3, 1)],
            num_classes: 3,
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes != 3 {
            return Err(Error::Config(format!(
                "backbone needs >= 1 input channel and exactly 3 classes, got {} and {}",
                self.in_channels, self.num_classes
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.kernel % 2 == 0 || b.stride == 0 {
                return Err(Error::Config(format!(
                    "block {i}: channels/stride must be positive and kernel odd, got {b:?}"
                )));
            }
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut c = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            shapes.push((format!("block{i}.weight"), vec![b.out_channels, c, b.kernel, b.kernel]));
            shapes.push((format!("block{i}.bias"), vec![b.out_channels]));
            c = b.out_channels;
        }
        shapes.push(("head.weight".into(), vec![self.num_classes, c, 1, 1]));
        shapes.push(("head.bias".into(), vec![self.num_classes]));
        shapes
    }
}

/// Backbone parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Real = f32> {
    config: BackboneConfig,
    params: Vec<NamedTensor<T>>,
}

impl<T: Real> Backbone<T> {
    /// Glorot-uniform weights from a seeded generator, zero biases.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if shape.len() == 4 {
                    let receptive = shape[2] * shape[3];
                    let fan_in = shape[1] * receptive;
                    let fan_out = shape[0] * receptive;
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..=bound)))
                } else {
                    Tensor::zeros(&shape)
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Ok(Backbone { config, params })
    }

    /// Rebuilds a backbone from checkpoint tensors, checking names and shapes.
    pub fn from_named(config: BackboneConfig, tensors: Vec<NamedTensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        ensure_contract!(
            expected.len() == tensors.len(),
            "checkpoint has {} tensors, architecture needs {}",
            tensors.len(),
            expected.len()
        );
        for ((name, shape), nt) in expected.iter().zip(&tensors) {
            ensure_dims!(
                *name == nt.name && shape.as_slice() == nt.tensor.shape(),
                "checkpoint tensor {} {:?} does not match expected {} {:?}",
                nt.name,
                nt.tensor.shape(),
                name,
                shape
            );
        }
        Ok(Backbone {
            config,
            params: tensors,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn stride(&self) -> usize {
        self.config.total_stride()
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Sets the head's weights and bias to zero, making every feature map zero.
    pub fn zero_head(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.tensor.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Registers every parameter as a gradient-tracked leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> BoundBackbone<'g, T> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.param(p.tensor.clone()))
            .collect();
        BoundBackbone {
            config: self.config.clone(),
            vars,
        }
    }

    /// Forward pass without gradient tracking; returns `1 × 3 × H/s × W/s`.
    pub fn features_of(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let graph = Graph::new();
        let bound = self.bind(&graph);
        let f = bound.features(image)?;
        let out = (*f.value()).clone();
        Ok(out)
    }
}

/// Backbone parameters registered on one graph.
pub struct BoundBackbone<'g, T: Real = f32> {
    config: BackboneConfig,
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> BoundBackbone<'g, T> {
    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.vars[0].graph()
    }

    pub fn stride(&self) -> usize {
        self.config.total_stride()
    }

    /// Feature space `f = F(x)` of a `1 × C × H × W` image, where H and W
    /// must be divisible by twice the total stride.
    pub fn features(&self, image: &Tensor<T>) -> Result<Var<'g, T>> {
        let (_, c, h, w) = image.dims4()?;
        let s = self.stride();
        ensure_contract!(
            h % (2 * s) == 0 && w % (2 * s) == 0,
            "image {h}x{w} must have both sides divisible by {} (2 x total stride {s})",
            2 * s
        );
        ensure_dims!(
            c == self.config.in_channels,
            "image has {c} channels, backbone expects {}",
            self.config.in_channels
        );
        self.features_unchecked(image)
    }

    /// Forward pass without the divisibility contract; used for puzzle patches,
    /// which only need to be divisible by the stride.
    pub(crate) fn features_unchecked(&self, image: &Tensor<T>) -> Result<Var<'g, T>> {
        let graph = self.graph();
        let mut x = graph.constant(image.clone());
        for (i, b) in self.config.blocks.iter().enumerate() {
            x = x
                .conv2d(&self.vars[2 * i], b.stride, b.kernel / 2)?
                .bias_add(&self.vars[2 * i + 1])?
                .relu();
        }
        let n = self.vars.len();
        x.conv2d(&self.vars[n - 2], 1, 0)?.bias_add(&self.vars[n - 1])
    }
}

/// `ẑ = σ(GAP(f))`, shape `[1, 3]`.
pub fn predict<'g, T: Real>(features: &Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(features.global_avg_pool()?.sigmoid())
}

/// Multi-label soft-margin loss summed over the three classes.
pub fn classification_loss<'g, T: Real>(prediction: &Var<'g, T>, label: LabelVector) -> Result<Var<'g, T>> {
    prediction.soft_margin_loss(&label.as_real::<T>(), T::lit(CLS_EPS))
}

/// [`classification_loss`] of `predict(features)`, evaluated on the pooled
/// logits so the gradient survives sigmoid saturation.
pub fn classification_loss_from_features<'g, T: Real>(features: &Var<'g, T>, label: LabelVector) -> Result<Var<'g, T>> {
    features
        .global_avg_pool()?
        .soft_margin_loss_logits(&label.as_real::<T>(), T::lit(CLS_EPS))
}

/// Index of the largest entry (ties go to the lower class index).
pub fn argmax_class<T: Real>(scores: &[T]) -> Class {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().take(3) {
        if v > scores[best] {
            best = i;
        }
    }
    Class::ALL[best]
}
