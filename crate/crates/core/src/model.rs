//! Architecture descriptions and the sequential residual network built from them.

use serde::{Deserialize, Serialize};

use crate::batchnorm::{BatchNormLayer, BnMode};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, FcLayer, Gradients, Layer, LayerCache, MaxPool, ResidualBlock};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub width: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// 3x3 / stride 2 max pool before the stage's blocks.
    pub pool: bool,
    pub blocks: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `channels, height, width` of one input image.
    pub input: [usize; 3],
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub classes: usize,
}

fn stages(widths: &[usize], blocks: &[usize], pool_first: bool) -> Vec<StageSpec> {
    widths
        .iter()
        .zip(blocks)
        .enumerate()
        .map(|(i, (&width, &blocks))| StageSpec {
            pool: pool_first || i > 0,
            blocks,
            width,
        })
        .collect()
}

impl ModelSpec {
    pub const NAMES: [&'static str; 5] = ["cifar-20", "cifar-44", "resnet-34", "cifar-8", "toy-6"];

    /// Named architecture. `input` overrides the default image shape.
    ///
    /// * `cifar-20`, `cifar-44`: 36x36 input, 3x3/64 stem, three stages of
    ///   64/128/256 channels with 3 or 7 blocks, max pool between stages.
    /// * `resnet-34`: 112x112 input, 5x5/96 stem, max pool before each
    ///   of four stages of 96/192/384/768 channels with 3/4/6/3 blocks.
    /// * `cifar-8`: one block per stage, 16/32/64 channels, 36x36 input.
    /// * `toy-6`: 12x12 input, 3x3/16 stem, one 16-channel block, pool, one
    ///   32-channel block.
    pub fn named(name: &str, classes: usize, input: Option<[usize; 3]>) -> Result<Self> {
        let conv3 = |width| StemSpec {
            kernel: 3,
            width,
            stride: 1,
            pad: 1,
        };
        let (default_input, stem, stage_list) = match name {
            "cifar-20" => ([3, 36, 36], conv3(64), stages(&[64, 128, 256], &[3, 3, 3], false)),
            "cifar-44" => ([3, 36, 36], conv3(64), stages(&[64, 128, 256], &[7, 7, 7], false)),
            "resnet-34" => (
                [3, 112, 112],
                StemSpec {
                    kernel: 5,
                    width: 96,
                    stride: 1,
                    pad: 2,
                },
                stages(&[96, 192, 384, 768], &[3, 4, 6, 3], true),
            ),
            "cifar-8" => ([3, 36, 36], conv3(16), stages(&[16, 32, 64], &[1, 1, 1], false)),
            "toy-6" => ([3, 12, 12], conv3(16), stages(&[16, 32], &[1, 1], false)),
            other => return Err(Error::Spec(format!("unknown model '{other}'"))),
        };
        let spec = ModelSpec {
            name: name.to_string(),
            input: input.unwrap_or(default_input),
            stem,
            stages: stage_list,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Spec(format!("{} classes; need at least 2", self.classes)));
        }
        if self.stages.is_empty() {
            return Err(Error::Spec("no stages".into()));
        }
        if self.stem.width == 0 || self.input.contains(&0) {
            return Err(Error::Spec("zero stem width or input extent".into()));
        }
        let mut width = self.stem.width;
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.width == 0 {
                return Err(Error::Spec(format!("stage {i} needs positive width and block count")));
            }
            if s.width < width {
                return Err(Error::Spec(format!("stage {i} narrows {width} -> {}", s.width)));
            }
            width = s.width;
        }
        Ok(())
    }

    /// `1 stem + 2 per block + 1 fc`.
    pub fn weighted_layers(&self) -> usize {
        2 + 2 * self.stages.iter().map(|s| s.blocks).sum::<usize>()
    }
}

/// A network parameter exposed for in-place updates.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    /// Conv and fc weights take weight decay; BN scale/shift and biases do not.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    pub fn build(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let stem = &spec.stem;
        let mut layers = vec![
            Layer::Conv(ConvLayer::he(
                "stem.conv",
                spec.input[0],
                stem.width,
                stem.kernel,
                stem.stride,
                stem.pad,
                rng,
            )?),
            Layer::BatchNorm(BatchNormLayer::new("stem.bn", stem.width)?),
            Layer::Relu,
        ];
        let mut width = stem.width;
        for (si, stage) in spec.stages.iter().enumerate() {
            if stage.pool {
                layers.push(Layer::MaxPool(MaxPool::default()));
            }
            for bi in 0..stage.blocks {
                let block = ResidualBlock::new(format!("stage{}.block{bi}", si + 1), width, stage.width, rng)?;
                layers.push(Layer::Residual(block));
                width = stage.width;
            }
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Fc(FcLayer::he("fc", width, spec.classes, rng)?));
        let net = Network {
            spec: spec.clone(),
            layers,
        };
        let mut dims = vec![1];
        dims.extend_from_slice(&spec.input);
        net.trace_shapes(&dims)?;
        Ok(net)
    }

    pub fn weighted_layers(&self) -> usize {
        self.layers.iter().map(|l| l.weighted_layers()).sum()
    }

    /// Output shape after every layer, without running any arithmetic.
    pub fn trace_shapes(&self, input_dims: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut dims = input_dims.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            dims = match layer {
                Layer::Conv(c) => c.output_dims(&dims)?,
                Layer::Residual(b) => {
                    let d = b.conv1.output_dims(&dims)?;
                    if d[2..] != dims[2..] {
                        return Err(Error::Spec(format!("{} changes spatial extent", b.name)));
                    }
                    d
                }
                Layer::MaxPool(p) => p.output_dims(&dims)?,
                Layer::GlobalAvgPool => vec![dims[0], dims[1]],
                Layer::Fc(fc) => {
                    if dims.len() != 2 || dims[1] != fc.inputs() {
                        return Err(Error::Spec(format!(
                            "fc expects {} features, got {dims:?}",
                            fc.inputs()
                        )));
                    }
                    vec![dims[0], fc.outputs()]
                }
                Layer::BatchNorm(_) | Layer::Relu => dims,
            };
            out.push(dims.clone());
        }
        Ok(out)
    }

    /// Forward pass that leaves the network untouched.
    pub fn run(&self, input: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, mode)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Forward pass; `Train` mode also folds batch statistics into the running averages.
    pub fn forward(&mut self, input: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        let (logits, caches) = self.run(input, mode)?;
        if mode == BnMode::Train {
            for (layer, cache) in self.layers.iter_mut().zip(&caches) {
                for (bn, c) in layer.batchnorms_mut().into_iter().zip(cache.batchnorm_caches()) {
                    bn.absorb(c);
                }
            }
        }
        Ok((logits, caches))
    }

    pub fn logits(&self, input: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        Ok(self.run(input, mode)?.0)
    }

    pub fn backward(&self, caches: &[LayerCache<T>], grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_with_input(caches, grad_logits).map(|(g, _)| g)
    }

    /// Parameter gradients plus the gradient with respect to the network input.
    pub fn backward_with_input(
        &self,
        caches: &[LayerCache<T>],
        grad_logits: &Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::Spec(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut grads = Gradients::new();
        let mut g = grad_logits.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            g = layer.backward(cache, &g, &mut grads)?;
        }
        Ok((grads, g))
    }

    pub fn batchnorms(&self) -> Vec<&BatchNormLayer<T>> {
        self.layers.iter().flat_map(|l| l.batchnorms()).collect()
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        self.layers.iter_mut().flat_map(|l| l.batchnorms_mut()).collect()
    }

    /// Trainable parameters in layer order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => push_conv(&mut out, c),
                Layer::BatchNorm(bn) => push_bn(&mut out, bn),
                Layer::Residual(b) => {
                    push_conv(&mut out, &b.conv1);
                    push_bn(&mut out, &b.bn1);
                    push_conv(&mut out, &b.conv2);
                    push_bn(&mut out, &b.bn2);
                }
                Layer::Fc(fc) => {
                    out.push((format!("{}.weight", fc.name), &fc.weight));
                    out.push((format!("{}.bias", fc.name), &fc.bias));
                }
                Layer::Relu | Layer::MaxPool(_) | Layer::GlobalAvgPool => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        fn conv<'a, T>(out: &mut Vec<ParamMut<'a, T>>, c: &'a mut ConvLayer<T>) {
            out.push(ParamMut {
                name: format!("{}.weight", c.name),
                value: &mut c.weight,
                decay: true,
            });
            if let Some(b) = c.bias.as_mut() {
                out.push(ParamMut {
                    name: format!("{}.bias", c.name),
                    value: b,
                    decay: false,
                });
            }
        }
        fn bn<'a, T>(out: &mut Vec<ParamMut<'a, T>>, bn: &'a mut BatchNormLayer<T>) {
            out.push(ParamMut {
                name: format!("{}.gamma", bn.name),
                value: &mut bn.gamma,
                decay: false,
            });
            out.push(ParamMut {
                name: format!("{}.beta", bn.name),
                value: &mut bn.beta,
                decay: false,
            });
        }
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => conv(&mut out, c),
                Layer::BatchNorm(b) => bn(&mut out, b),
                Layer::Residual(b) => {
                    conv(&mut out, &mut b.conv1);
                    bn(&mut out, &mut b.bn1);
                    conv(&mut out, &mut b.conv2);
                    bn(&mut out, &mut b.bn2);
                }
                Layer::Fc(fc) => {
                    out.push(ParamMut {
                        name: format!("{}.weight", fc.name),
                        value: &mut fc.weight,
                        decay: true,
                    });
                    out.push(ParamMut {
                        name: format!("{}.bias", fc.name),
                        value: &mut fc.bias,
                        decay: false,
                    });
                }
                Layer::Relu | Layer::MaxPool(_) | Layer::GlobalAvgPool => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

fn push_conv<'a, T: Real>(out: &mut Vec<(String, &'a Tensor<T>)>, c: &'a ConvLayer<T>) {
    out.push((format!("{}.weight", c.name), &c.weight));
    if let Some(b) = &c.bias {
        out.push((format!("{}.bias", c.name), b));
    }
}

fn push_bn<'a, T: Real>(out: &mut Vec<(String, &'a Tensor<T>)>, bn: &'a BatchNormLayer<T>) {
    out.push((format!("{}.gamma", bn.name), &bn.gamma));
    out.push((format!("{}.beta", bn.name), &bn.beta));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(dims: &[usize], rng: &mut Rng) -> Tensor<f32> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.next_gaussian() as f32).collect()).unwrap()
    }

    #[test]
    fn depth_of_named_specs() {
        let mut rng = Rng::new(0);
        for (name, depth) in [
            ("cifar-20", 20),
            ("cifar-44", 44),
            ("resnet-34", 34),
            ("cifar-8", 8),
            ("toy-6", 6),
        ] {
            let spec = ModelSpec::named(name, 10, None).unwrap();
            assert_eq!(spec.weighted_layers(), depth, "{name}");
            if name != "resnet-34" {
                let net = Network::<f32>::build(&spec, &mut rng).unwrap();
                assert_eq!(net.weighted_layers(), depth, "{name}");
                let convs = net.layers.iter().map(|l| l.weighted_layers()).sum::<usize>() - 1;
                assert_eq!(convs, depth - 1);
            }
        }
    }

    #[test]
    fn cifar20_stage_extents() {
        let spec = ModelSpec::named("cifar-20", 10, None).unwrap();
        let net = Network::<f32>::build(&spec, &mut Rng::new(1)).unwrap();
        let shapes = net.trace_shapes(&[4, 3, 36, 36]).unwrap();
        let spatial: Vec<usize> = shapes.iter().filter(|d| d.len() == 4).map(|d| d[2]).collect();
        let mut distinct = spatial.clone();
        distinct.dedup();
        assert_eq!(distinct, [36, 18, 9]);
        assert_eq!(shapes.last().unwrap(), &vec![4, 10]);
    }

    #[test]
    fn resnet34_stage_extents() {
        let spec = ModelSpec::named("resnet-34", 50, None).unwrap();
        let net = Network::<f32>::build(&spec, &mut Rng::new(1)).unwrap();
        let shapes = net.trace_shapes(&[1, 3, 112, 112]).unwrap();
        let mut spatial: Vec<usize> = shapes.iter().filter(|d| d.len() == 4).map(|d| d[2]).collect();
        spatial.dedup();
        assert_eq!(spatial, [112, 56, 28, 14, 7]);
        assert_eq!(shapes.last().unwrap(), &vec![1, 50]);
    }

    #[test]
    fn cifar20_forward_produces_logits() {
        let spec = ModelSpec::named("cifar-20", 10, None).unwrap();
        let mut rng = Rng::new(2);
        let net = Network::<f32>::build(&spec, &mut rng).unwrap();
        let x = random(&[4, 3, 36, 36], &mut rng);
        assert_eq!(net.logits(&x, BnMode::EvalBatchStats).unwrap().dims(), &[4, 10]);
    }

    #[test]
    fn param_count_is_formula_constant() {
        // cifar-20, 10 classes:
        // stem 3*64*9 + bn 128; stage1 6*64*64*9 + 6*128;
        // stage2 64*128*9 + 5*128*128*9 + 6*256; stage3 128*256*9 + 5*256*256*9 + 6*512;
        // fc 256*10 + 10
        let spec = ModelSpec::named("cifar-20", 10, None).unwrap();
        let net = Network::<f32>::build(&spec, &mut Rng::new(0)).unwrap();
        assert_eq!(net.param_count(), 4_286_026);
        // toy-6, 10 classes:
        // stem 3*16*9 + 32; block 2*16*16*9 + 64; block 16*32*9 + 32*32*9 + 128; fc 32*10 + 10
        let spec = ModelSpec::named("toy-6", 10, None).unwrap();
        let net = Network::<f32>::build(&spec, &mut Rng::new(0)).unwrap();
        assert_eq!(net.param_count(), 19_418);
    }

    #[test]
    fn he_init_keeps_activation_scale() {
        let spec = ModelSpec::named("cifar-8", 10, None).unwrap();
        let mut rng = Rng::new(3);
        let net = Network::<f32>::build(&spec, &mut rng).unwrap();
        let x = random(&[8, 3, 36, 36], &mut rng);
        let Layer::Conv(stem) = &net.layers[0] else { panic!() };
        let (pre, _) = stem.forward(&x).unwrap();
        let var = |t: &Tensor<f32>| {
            let n = t.len() as f64;
            let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            t.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n
        };
        let ratio = var(&pre) / var(&x);
        assert!((0.25..=4.0).contains(&ratio), "stem variance ratio {ratio}");
        let mut h = x.clone();
        for layer in &net.layers {
            if let Layer::Residual(b) = layer {
                let (pre, _) = b.conv1.forward(&h).unwrap();
                let second_moment = h.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / h.len() as f64;
                let r = var(&pre) / second_moment;
                assert!((0.25..=4.0).contains(&r), "{} variance ratio {r}", b.name);
            }
            if matches!(layer, Layer::GlobalAvgPool) {
                break;
            }
            h = layer.forward(&h, BnMode::EvalBatchStats).unwrap().0;
        }
    }

    #[test]
    fn unique_param_names() {
        let spec = ModelSpec::named("cifar-44", 10, None).unwrap();
        let net = Network::<f32>::build(&spec, &mut Rng::new(0)).unwrap();
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn invalid_specs() {
        assert!(ModelSpec::named("nope", 10, None).is_err());
        assert!(ModelSpec::named("toy-6", 1, None).is_err());
        let mut spec = ModelSpec::named("toy-6", 10, None).unwrap();
        spec.stages[1].width = 8;
        assert!(spec.validate().is_err());
    }
}
