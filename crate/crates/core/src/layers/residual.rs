use crate::batchnorm::{BatchNormLayer, BnCache, BnMode};
use crate::error::{Error, Result};
use crate::layers::conv::{ConvCache, ConvLayer};
use crate::layers::Gradients;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Two 3x3 conv + BN stages around an identity skip:
/// `relu(x + bn2(conv2(relu(bn1(conv1(x))))))`.
///
/// When the block widens the channel count the skip carries `x` into the first
/// `in_channels` channels and zeros into the rest; spatial extent is unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T = f32> {
    pub name: String,
    pub conv1: ConvLayer<T>,
    pub bn1: BatchNormLayer<T>,
    pub conv2: ConvLayer<T>,
    pub bn2: BatchNormLayer<T>,
}

#[derive(Debug, Clone)]
pub struct ResidualCache<T = f32> {
    pub input_dims: Vec<usize>,
    pub conv1: ConvCache<T>,
    pub bn1: BnCache<T>,
    pub hidden: Tensor<T>,
    pub conv2: ConvCache<T>,
    pub bn2: BnCache<T>,
    pub sum: Tensor<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, rng: &mut Rng) -> Result<Self> {
        if in_channels > out_channels {
            return Err(Error::Spec(format!(
                "residual block cannot narrow {in_channels} -> {out_channels} channels"
            )));
        }
        let name = name.into();
        Ok(ResidualBlock {
            conv1: ConvLayer::he(format!("{name}.conv1"), in_channels, out_channels, 3, 1, 1, rng)?,
            bn1: BatchNormLayer::new(format!("{name}.bn1"), out_channels)?,
            conv2: ConvLayer::he(format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1, rng)?,
            bn2: BatchNormLayer::new(format!("{name}.bn2"), out_channels)?,
            name,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&self, input: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, ResidualCache<T>)> {
        let (a, conv1) = self.conv1.forward(input)?;
        let (b, bn1) = self.bn1.normalize(&a, mode)?;
        let hidden = b.relu()?;
        let (c, conv2) = self.conv2.forward(&hidden)?;
        let (branch, bn2) = self.bn2.normalize(&c, mode)?;
        let skip = self.pad_skip(input, branch.dims())?;
        let sum = branch.add(&skip)?;
        let out = sum.relu()?;
        Ok((
            out,
            ResidualCache {
                input_dims: input.dims().to_vec(),
                conv1,
                bn1,
                hidden,
                conv2,
                bn2,
                sum,
            },
        ))
    }

    fn pad_skip(&self, input: &Tensor<T>, out_dims: &[usize]) -> Result<Tensor<T>> {
        let d = input.dims();
        if d.len() != 4 || d[0] != out_dims[0] || d[2] != out_dims[2] || d[3] != out_dims[3] {
            return Err(Error::ShapeMismatch {
                op: "residual_forward",
                left: d.to_vec(),
                right: out_dims.to_vec(),
            });
        }
        if d[1] == out_dims[1] {
            return Ok(input.clone());
        }
        let (cin, cout, plane) = (d[1], out_dims[1], d[2] * d[3]);
        let mut data = vec![T::zero(); d[0] * cout * plane];
        for b in 0..d[0] {
            data[b * cout * plane..(b * cout + cin) * plane]
                .copy_from_slice(&input.data()[b * cin * plane..(b + 1) * cin * plane]);
        }
        Tensor::from_op(out_dims, data, "residual_skip")
    }

    /// Returns the input gradient; parameter gradients are inserted into `grads`.
    pub fn backward(
        &self,
        cache: &ResidualCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let g = Tensor::relu_backward(grad_out, &cache.sum)?;
        let bn2 = self.bn2.backward(&cache.bn2, &g)?;
        let conv2 = self.conv2.backward(&cache.conv2, &bn2.input)?;
        let gh = Tensor::relu_backward(&conv2.input, &cache.hidden)?;
        let bn1 = self.bn1.backward(&cache.bn1, &gh)?;
        let conv1 = self.conv1.backward(&cache.conv1, &bn1.input)?;

        let mut gi = conv1.input.into_vec();
        let (cin, cout) = (self.in_channels(), self.out_channels());
        let plane = cache.input_dims[2] * cache.input_dims[3];
        for b in 0..cache.input_dims[0] {
            let dst = &mut gi[b * cin * plane..(b + 1) * cin * plane];
            let src = &g.data()[b * cout * plane..(b * cout + cin) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        grads.insert(format!("{}.weight", self.conv1.name), conv1.weight);
        grads.insert(format!("{}.gamma", self.bn1.name), bn1.gamma);
        grads.insert(format!("{}.beta", self.bn1.name), bn1.beta);
        grads.insert(format!("{}.weight", self.conv2.name), conv2.weight);
        grads.insert(format!("{}.gamma", self.bn2.name), bn2.gamma);
        grads.insert(format!("{}.beta", self.bn2.name), bn2.beta);
        Tensor::from_op(&cache.input_dims, gi, "residual_backward")
    }
}
