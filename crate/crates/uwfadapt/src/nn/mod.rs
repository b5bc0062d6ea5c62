//! Minimal double-precision neural-network substrate.
//!
//! Everything in this crate trains small convolutional networks on CPU, so
//! the substrate stays deliberately compact: a `Layer` enum with explicit
//! forward/backward passes, a `Net` that chains layers, and flat parameter
//! access so losses can be verified against central finite differences.
//!
//! All math is f64 and fully deterministic: identical seeds give identical
//! parameters, activations, and outputs on the same platform.

mod conv;
mod layers;
mod loss;
mod optim;

pub use conv::Conv2d;
pub use layers::{CoordConcat, GlobalAvgPool, LeakyRelu, Relu, Sigmoid, SoftmaxChannels, Tanh, Upsample2x};
pub use loss::{
    bce_map, cross_entropy_probs, cross_entropy_soft, l1_pair, l2_rowsum_masked, mse_map,
    mse_to_const, probs_matrix, probs_to_batch, row_max,
};
pub use optim::{Adadelta, Adam};

use crate::error::{Error, Result};
use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Activation batch, shape `(n, c, h, w)`.
pub type Batch = Array4<f64>;

/// Mutable value view plus read-only gradient view for one parameter tensor.
pub struct ParamRef<'a> {
    pub value: ArrayViewMutD<'a, f64>,
    pub grad: ArrayViewD<'a, f64>,
}

/// Architecture description; enough to rebuild a `Net` and reload weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    LeakyRelu {
        alpha: f64,
    },
    Sigmoid,
    Tanh,
    /// Softmax over the channel axis at every spatial position.
    SoftmaxChannels,
    Upsample2x,
    GlobalAvgPool,
    /// Appends x, y and radius coordinate channels in `[-1, 1]`.
    CoordConcat,
    /// Adds the block input to the output of the inner layer chain, which
    /// must preserve the input shape.
    Residual {
        inner: Vec<LayerSpec>,
    },
}

pub enum Layer {
    Conv(Conv2d),
    Relu(Relu),
    LeakyRelu(LeakyRelu),
    Sigmoid(Sigmoid),
    Tanh(Tanh),
    SoftmaxChannels(SoftmaxChannels),
    Upsample2x(Upsample2x),
    GlobalAvgPool(GlobalAvgPool),
    CoordConcat(CoordConcat),
    Residual(ResidualBlock),
}

impl Layer {
    fn from_spec(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Layer {
        match spec {
            LayerSpec::Conv {
                in_c,
                out_c,
                kernel,
                stride,
                pad,
            } => Layer::Conv(Conv2d::new(*in_c, *out_c, *kernel, *stride, *pad, rng)),
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::LeakyRelu { alpha } => Layer::LeakyRelu(LeakyRelu::new(*alpha)),
            LayerSpec::Sigmoid => Layer::Sigmoid(Sigmoid::default()),
            LayerSpec::Tanh => Layer::Tanh(Tanh::default()),
            LayerSpec::SoftmaxChannels => Layer::SoftmaxChannels(SoftmaxChannels::default()),
            LayerSpec::Upsample2x => Layer::Upsample2x(Upsample2x::default()),
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::default()),
            LayerSpec::CoordConcat => Layer::CoordConcat(CoordConcat::default()),
            LayerSpec::Residual { inner } => Layer::Residual(ResidualBlock {
                layers: inner.iter().map(|s| Layer::from_spec(s, rng)).collect(),
            }),
        }
    }

    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        match self {
            Layer::Conv(l) => l.forward(x, train),
            Layer::Relu(l) => l.forward(x),
            Layer::LeakyRelu(l) => l.forward(x),
            Layer::Sigmoid(l) => l.forward(x),
            Layer::Tanh(l) => l.forward(x),
            Layer::SoftmaxChannels(l) => l.forward(x),
            Layer::Upsample2x(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::CoordConcat(l) => l.forward(x),
            Layer::Residual(l) => l.forward(x, train),
        }
    }

    fn backward(&mut self, grad: &Batch) -> Batch {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::LeakyRelu(l) => l.backward(grad),
            Layer::Sigmoid(l) => l.backward(grad),
            Layer::Tanh(l) => l.backward(grad),
            Layer::SoftmaxChannels(l) => l.backward(grad),
            Layer::Upsample2x(l) => l.backward(grad),
            Layer::GlobalAvgPool(l) => l.backward(grad),
            Layer::CoordConcat(l) => l.backward(grad),
            Layer::Residual(l) => l.backward(grad),
        }
    }

    fn param_refs(&mut self) -> Vec<ParamRef<'_>> {
        match self {
            Layer::Conv(l) => l.param_refs(),
            Layer::Residual(l) => l.layers.iter_mut().flat_map(Layer::param_refs).collect(),
            _ => Vec::new(),
        }
    }

    fn param_values(&self) -> Vec<ArrayViewD<'_, f64>> {
        match self {
            Layer::Conv(l) => l.param_values(),
            Layer::Residual(l) => l.layers.iter().flat_map(Layer::param_values).collect(),
            _ => Vec::new(),
        }
    }

    fn zero_grad(&mut self) {
        match self {
            Layer::Conv(l) => l.zero_grad(),
            Layer::Residual(l) => l.layers.iter_mut().for_each(Layer::zero_grad),
            _ => {}
        }
    }
}

/// Skip connection: `y = x + f(x)` for an inner layer chain `f` that
/// preserves the input shape.
pub struct ResidualBlock {
    layers: Vec<Layer>,
}

impl ResidualBlock {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train);
        }
        assert_eq!(cur.dim(), x.dim(), "residual branch must preserve shape");
        cur + x
    }

    fn backward(&mut self, grad: &Batch) -> Batch {
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur + grad
    }
}

/// A sequential network built from a [`LayerSpec`] list.
pub struct Net {
    spec: Vec<LayerSpec>,
    layers: Vec<Layer>,
}

impl Net {
    pub fn new(spec: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Net {
        let layers = spec.iter().map(|s| Layer::from_spec(s, rng)).collect();
        Net { spec, layers }
    }

    pub fn spec(&self) -> &[LayerSpec] {
        &self.spec
    }

    /// Forward pass. With `train = true`, activations needed by
    /// [`Net::backward`] are cached.
    pub fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train);
        }
        cur
    }

    /// Backward pass; accumulates parameter gradients and returns the
    /// gradient with respect to the network input.
    pub fn backward(&mut self, grad_out: &Batch) -> Batch {
        let mut cur = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grad();
        }
    }

    pub fn param_refs(&mut self) -> Vec<ParamRef<'_>> {
        self.layers.iter_mut().flat_map(|l| l.param_refs()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.param_values())
            .map(|v| v.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            for view in layer.param_values() {
                out.extend(view.iter());
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for mut p in layer.param_refs() {
                let n = p.value.len();
                for (dst, src) in p.value.iter_mut().zip(&flat[offset..offset + n]) {
                    *dst = *src;
                }
                offset += n;
            }
        }
        Ok(())
    }

    pub fn flat_grads(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for p in layer.param_refs() {
                out.extend(p.grad.iter());
            }
        }
        out
    }

    pub fn to_saved(&self) -> SavedNet {
        SavedNet {
            spec: self.spec.clone(),
            params: self.flat_params(),
        }
    }

    pub fn from_saved(saved: &SavedNet) -> Result<Net> {
        let mut rng = crate::seeding::rng_for(0, "net-restore");
        let mut net = Net::new(saved.spec.clone(), &mut rng);
        net.set_flat_params(&saved.params)?;
        Ok(net)
    }
}

/// Serializable network snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedNet {
    pub spec: Vec<LayerSpec>,
    pub params: Vec<f64>,
}
