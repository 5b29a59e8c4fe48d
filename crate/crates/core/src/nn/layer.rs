use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::session::Session;
use super::store::{ParamKind, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear,
    Flatten,
    GlobalAvgPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Batch,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

/// One block: a linear map (conv, transposed conv, dense) followed by an
/// optional normalization and an activation. Shape-only kinds carry no params.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
    pub norm: NormKind,
    pub activation: Activation,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl LayerSpec {
    pub fn conv(fan_in: usize, fan_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                kernel,
                stride,
                pad,
            },
            fan_in,
            fan_out,
            bias: true,
            norm: NormKind::None,
            activation: Activation::Identity,
        }
    }

    pub fn conv_transpose(
        fan_in: usize,
        fan_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            kind: LayerKind::ConvTranspose2d {
                kernel,
                stride,
                pad,
            },
            ..Self::conv(fan_in, fan_out, kernel, stride, pad)
        }
    }

    pub fn linear(fan_in: usize, fan_out: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            fan_in,
            fan_out,
            bias: true,
            norm: NormKind::None,
            activation: Activation::Identity,
        }
    }

    pub fn flatten() -> Self {
        Self {
            kind: LayerKind::Flatten,
            fan_in: 0,
            fan_out: 0,
            bias: false,
            norm: NormKind::None,
            activation: Activation::Identity,
        }
    }

    pub fn global_avg_pool() -> Self {
        Self {
            kind: LayerKind::GlobalAvgPool,
            ..Self::flatten()
        }
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let has_params = matches!(
            self.kind,
            LayerKind::Conv2d { .. } | LayerKind::ConvTranspose2d { .. } | LayerKind::Linear
        );
        if has_params && (self.fan_in == 0 || self.fan_out == 0) {
            return Err(Error::Param(format!("{self:?}: zero fan-in/fan-out")));
        }
        if let LayerKind::Conv2d { kernel, stride, .. }
        | LayerKind::ConvTranspose2d { kernel, stride, .. } = self.kind
        {
            if kernel == 0 || stride == 0 {
                return Err(Error::Param(format!("{self:?}: zero kernel or stride")));
            }
        }
        let spatial = matches!(
            self.kind,
            LayerKind::Conv2d { .. } | LayerKind::ConvTranspose2d { .. }
        );
        if self.norm != NormKind::None && !spatial {
            return Err(Error::Param(format!(
                "{self:?}: normalization needs a spatial layer"
            )));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !(0.0..1.0).contains(&slope) {
                return Err(Error::Param(format!("leaky slope {slope} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Fan-in used for initialization scaling.
    pub fn init_fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d { kernel, .. } | LayerKind::ConvTranspose2d { kernel, .. } => {
                self.fan_in * kernel * kernel
            }
            _ => self.fan_in,
        }
    }

    /// Half-width of the uniform weight distribution, giving std `1/sqrt(fan_in)`.
    pub fn init_bound(&self) -> f64 {
        (3.0 / self.init_fan_in() as f64).sqrt()
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv2d { kernel, .. } => {
                Some(vec![self.fan_out, self.fan_in, kernel, kernel])
            }
            LayerKind::ConvTranspose2d { kernel, .. } => {
                Some(vec![self.fan_in, self.fan_out, kernel, kernel])
            }
            LayerKind::Linear => Some(vec![self.fan_out, self.fan_in]),
            _ => None,
        }
    }

    /// Trainable scalar count of this block.
    pub fn param_count(&self) -> usize {
        let Some(shape) = self.weight_shape() else {
            return 0;
        };
        let mut n: usize = shape.iter().product();
        if self.bias {
            n += self.fan_out;
        }
        if self.norm == NormKind::Batch {
            n += 2 * self.fan_out;
        }
        n
    }

    /// True when the block is linear or piecewise linear in its input.
    pub fn piecewise_linear(&self) -> bool {
        self.norm == NormKind::None
            && matches!(
                self.activation,
                Activation::Identity | Activation::Relu | Activation::LeakyRelu { .. }
            )
    }
}

/// Tensors of one block, keyed by slot suffix. Fan-in-scaled uniform weights,
/// zero biases, unit/zero batch-norm affine terms, zero/unit running statistics.
pub fn init_params<T: Float>(
    spec: &LayerSpec,
    seed: u64,
) -> Result<Vec<(&'static str, ParamKind, Tensor<T>)>> {
    spec.validate()?;
    let mut out = Vec::new();
    let Some(shape) = spec.weight_shape() else {
        return Ok(out);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = spec.init_bound();
    let n: usize = shape.iter().product();
    let w: Vec<T> = (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    out.push(("weight", ParamKind::Trainable, Tensor::new(shape, w)?));
    if spec.bias {
        out.push((
            "bias",
            ParamKind::Trainable,
            Tensor::zeros(vec![spec.fan_out]),
        ));
    }
    if spec.norm == NormKind::Batch {
        let c = spec.fan_out;
        out.push(("gamma", ParamKind::Trainable, Tensor::ones(vec![c])));
        out.push(("beta", ParamKind::Trainable, Tensor::zeros(vec![c])));
        out.push(("running_mean", ParamKind::Buffer, Tensor::zeros(vec![c])));
        out.push(("running_var", ParamKind::Buffer, Tensor::ones(vec![c])));
    }
    Ok(out)
}

/// FNV-1a, used to derive per-slot seeds from names.
pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Slot prefix, e.g. `enc_src.0`.
    pub prefix: String,
}

impl Layer {
    pub fn slot(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    /// Slots of this block's parameters and buffers.
    pub fn slots(&self) -> Vec<String> {
        if self.spec.weight_shape().is_none() {
            return Vec::new();
        }
        let mut out = vec![self.slot("weight")];
        if self.spec.bias {
            out.push(self.slot("bias"));
        }
        if self.spec.norm == NormKind::Batch {
            for s in ["gamma", "beta", "running_mean", "running_var"] {
                out.push(self.slot(s));
            }
        }
        out
    }

    fn forward<T: Float>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let s = &self.spec;
        let bias = if s.bias && s.weight_shape().is_some() {
            Some(sess.param(&self.slot("bias"))?)
        } else {
            None
        };
        let mut y = match s.kind {
            LayerKind::Conv2d { stride, pad, .. } => {
                let w = sess.param(&self.slot("weight"))?;
                sess.graph.conv2d(x, w, bias, stride, pad)?
            }
            LayerKind::ConvTranspose2d { stride, pad, .. } => {
                let w = sess.param(&self.slot("weight"))?;
                sess.graph.conv_transpose2d(x, w, bias, stride, pad, 0)?
            }
            LayerKind::Linear => {
                let w = sess.param(&self.slot("weight"))?;
                sess.graph.linear(x, w, bias)?
            }
            LayerKind::Flatten => sess.graph.flatten(x)?,
            LayerKind::GlobalAvgPool => sess.graph.global_avg_pool(x)?,
        };
        y = match s.norm {
            NormKind::None => y,
            NormKind::Instance => sess.graph.instance_norm2d(y, BN_EPS)?,
            NormKind::Batch => sess.batch_norm(self, y)?,
        };
        match s.activation {
            Activation::Identity => Ok(y),
            Activation::Relu => sess.graph.relu(y),
            Activation::LeakyRelu { slope } => sess.graph.leaky_relu(y, slope),
            Activation::Tanh => sess.graph.tanh(y),
            Activation::Sigmoid => sess.graph.sigmoid(y),
        }
    }
}

/// A feed-forward stack of blocks whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Registers fresh parameters for every block under `name.{index}.*`.
    pub fn build<T: Float>(
        name: &str,
        specs: &[LayerSpec],
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = Layer {
                spec: *spec,
                prefix: format!("{name}.{i}"),
            };
            for (suffix, kind, tensor) in init_params::<T>(spec, seed ^ name_hash(&layer.prefix))? {
                store.register(&layer.slot(suffix), tensor, kind)?;
            }
            layers.push(layer);
        }
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    pub fn forward<T: Float>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(sess, h))
    }

    /// Slots of every parameter and buffer of this network.
    pub fn slots(&self) -> Vec<String> {
        self.layers.iter().flat_map(Layer::slots).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Whether [`crate::autodiff::Graph::input_gradient`] can differentiate through this network.
    pub fn supports_double_backprop(&self) -> bool {
        self.layers.iter().all(|l| l.spec.piecewise_linear())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let spec = LayerSpec::conv(3, 8, 4, 2, 1);
        let a = init_params::<f32>(&spec, 11).unwrap();
        let b = init_params::<f32>(&spec, 11).unwrap();
        for ((_, _, x), (_, _, y)) in a.iter().zip(&b) {
            assert!(x
                .data()
                .iter()
                .zip(y.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let c = init_params::<f32>(&spec, 12).unwrap();
        assert_ne!(a[0].2.data(), c[0].2.data());
    }

    #[test]
    fn bias_starts_at_zero() {
        let spec = LayerSpec::linear(10, 4);
        let p = init_params::<f64>(&spec, 3).unwrap();
        let (name, _, bias) = &p[1];
        assert_eq!(*name, "bias");
        assert!(bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_std_tracks_fan_in() {
        let spec = LayerSpec::linear(64, 64);
        let p = init_params::<f64>(&spec, 2024).unwrap();
        let w = p[0].2.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 1.0 / 64f64.sqrt();
        assert!((std / target - 1.0).abs() < 0.2, "std {std} vs {target}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(LayerSpec::linear(0, 3).validate().is_err());
        assert!(LayerSpec::linear(4, 3)
            .with_norm(NormKind::Batch)
            .validate()
            .is_err());
        assert!(LayerSpec::conv(1, 2, 4, 0, 1).validate().is_err());
    }
}
