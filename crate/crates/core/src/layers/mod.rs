//! Forward and backward passes for the non-normalization layers, plus the
//! [`Layer`] enum the network is assembled from.

pub mod conv;
pub mod dense;
pub mod pool;
pub mod residual;

use std::collections::BTreeMap;

pub use conv::{ConvCache, ConvGrads, ConvLayer};
pub use dense::{argmax, softmax, softmax_xent, FcGrads, FcLayer, XentOutput};
pub use pool::{global_avgpool_backward, global_avgpool_forward, MaxPool, MaxPoolCache};
pub use residual::{ResidualBlock, ResidualCache};

use crate::batchnorm::{BatchNormLayer, BnCache, BnMode};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Gradients keyed by parameter name.
pub type Gradients<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Layer<T = f32> {
    Conv(ConvLayer<T>),
    BatchNorm(BatchNormLayer<T>),
    Relu,
    MaxPool(MaxPool),
    Residual(ResidualBlock<T>),
    GlobalAvgPool,
    Fc(FcLayer<T>),
}

/// What a layer saved during the forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T = f32> {
    Conv(ConvCache<T>),
    BatchNorm(BnCache<T>),
    Relu(Tensor<T>),
    MaxPool(MaxPoolCache),
    Residual(Box<ResidualCache<T>>),
    GlobalAvgPool(Vec<usize>),
    Fc(Tensor<T>),
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Residual(_) => "residual",
            Layer::GlobalAvgPool => "global_avgpool",
            Layer::Fc(_) => "fc",
        }
    }

    /// Number of weighted (conv or fc) layers, counting both convs of a residual block.
    pub fn weighted_layers(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::Fc(_) => 1,
            Layer::Residual(_) => 2,
            _ => 0,
        }
    }

    pub fn forward(&self, input: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, LayerCache<T>)> {
        Ok(match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward(input)?;
                (y, LayerCache::Conv(cache))
            }
            Layer::BatchNorm(bn) => {
                let (y, cache) = bn.normalize(input, mode)?;
                (y, LayerCache::BatchNorm(cache))
            }
            Layer::Relu => (input.relu()?, LayerCache::Relu(input.clone())),
            Layer::MaxPool(p) => {
                let (y, cache) = p.forward(input)?;
                (y, LayerCache::MaxPool(cache))
            }
            Layer::Residual(b) => {
                let (y, cache) = b.forward(input, mode)?;
                (y, LayerCache::Residual(Box::new(cache)))
            }
            Layer::GlobalAvgPool => (
                global_avgpool_forward(input)?,
                LayerCache::GlobalAvgPool(input.dims().to_vec()),
            ),
            Layer::Fc(fc) => (fc.forward(input)?, LayerCache::Fc(input.clone())),
        })
    }

    pub fn backward(&self, cache: &LayerCache<T>, grad_out: &Tensor<T>, grads: &mut Gradients<T>) -> Result<Tensor<T>> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(cache)) => {
                let g = c.backward(cache, grad_out)?;
                grads.insert(format!("{}.weight", c.name), g.weight);
                if let Some(b) = g.bias {
                    grads.insert(format!("{}.bias", c.name), b);
                }
                Ok(g.input)
            }
            (Layer::BatchNorm(bn), LayerCache::BatchNorm(cache)) => {
                let g = bn.backward(cache, grad_out)?;
                grads.insert(format!("{}.gamma", bn.name), g.gamma);
                grads.insert(format!("{}.beta", bn.name), g.beta);
                Ok(g.input)
            }
            (Layer::Relu, LayerCache::Relu(input)) => Tensor::relu_backward(grad_out, input),
            (Layer::MaxPool(p), LayerCache::MaxPool(cache)) => p.backward(cache, grad_out),
            (Layer::Residual(b), LayerCache::Residual(cache)) => b.backward(cache, grad_out, grads),
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool(dims)) => global_avgpool_backward(dims, grad_out),
            (Layer::Fc(fc), LayerCache::Fc(input)) => {
                let g = fc.backward(input, grad_out)?;
                grads.insert(format!("{}.weight", fc.name), g.weight);
                grads.insert(format!("{}.bias", fc.name), g.bias);
                Ok(g.input)
            }
            (layer, _) => Err(Error::InvalidShape(format!(
                "cache does not belong to a {} layer",
                layer.kind()
            ))),
        }
    }

    /// Batch-norm layers in this layer, in forward order.
    pub fn batchnorms(&self) -> Vec<&BatchNormLayer<T>> {
        match self {
            Layer::BatchNorm(bn) => vec![bn],
            Layer::Residual(b) => vec![&b.bn1, &b.bn2],
            _ => vec![],
        }
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        match self {
            Layer::BatchNorm(bn) => vec![bn],
            Layer::Residual(b) => vec![&mut b.bn1, &mut b.bn2],
            _ => vec![],
        }
    }
}

impl<T: Real> LayerCache<T> {
    /// Batch-norm caches in the same order as [`Layer::batchnorms`].
    pub fn batchnorm_caches(&self) -> Vec<&BnCache<T>> {
        match self {
            LayerCache::BatchNorm(c) => vec![c],
            LayerCache::Residual(c) => vec![&c.bn1, &c.bn2],
            _ => vec![],
        }
    }
}
