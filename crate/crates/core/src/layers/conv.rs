use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{exec_mode, gemm, gemm_at, gemm_bt, ExecMode, PatchGeometry, Real, Tensor};

/// Square-kernel 2-D cross-correlation with zero padding, computed as im2col + matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub name: String,
    /// `out_channels x in_channels x k x k`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T = f32> {
    pub input: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> ConvLayer<T> {
    /// He-initialized weights, `N(0, 2 / (in_channels * k^2))`, no bias.
    pub fn he(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if ![1, 3, 5].contains(&kernel) {
            return Err(Error::Spec(format!("unsupported kernel size {kernel}")));
        }
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let n = out_channels * fan_in;
        let data = (0..n).map(|_| T::lit(std * rng.next_gaussian())).collect();
        Ok(ConvLayer {
            name: name.into(),
            weight: Tensor::from_vec(&[out_channels, in_channels, kernel, kernel], data)?,
            bias: None,
            stride,
            pad,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<(usize, PatchGeometry)> {
        match input.dims() {
            &[n, c, h, w] if c == self.in_channels() => {
                Ok((n, PatchGeometry::new(c, h, w, self.kernel(), self.stride, self.pad)?))
            }
            d => Err(Error::ShapeMismatch {
                op: "conv_forward",
                left: d.to_vec(),
                right: self.weight.dims().to_vec(),
            }),
        }
    }

    pub fn output_dims(&self, input_dims: &[usize]) -> Result<Vec<usize>> {
        let &[n, c, h, w] = input_dims else {
            return Err(Error::InvalidShape(format!(
                "conv expects 4-D input, got {input_dims:?}"
            )));
        };
        let geo = PatchGeometry::new(c, h, w, self.kernel(), self.stride, self.pad)?;
        Ok(vec![n, self.out_channels(), geo.out_height, geo.out_width])
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (n, geo) = self.geometry(input)?;
        let (oc, rows, pos) = (self.out_channels(), geo.rows(), geo.positions());
        let img = input.len() / n;
        let w = self.weight.data();
        let bias = self.bias.as_ref().map(|b| b.data());
        let run = |(b, out): (usize, &mut [T])| {
            let mut cols = vec![T::zero(); rows * pos];
            geo.unfold(&input.data()[b * img..(b + 1) * img], &mut cols);
            gemm(oc, rows, pos, w, &cols, out);
            if let Some(bias) = bias {
                for (o, &bv) in bias.iter().enumerate() {
                    out[o * pos..(o + 1) * pos].iter_mut().for_each(|v| *v += bv);
                }
            }
        };
        let mut out = vec![T::zero(); n * oc * pos];
        match exec_mode() {
            ExecMode::Deterministic => out.chunks_mut(oc * pos).enumerate().for_each(run),
            ExecMode::Fast => out.par_chunks_mut(oc * pos).enumerate().for_each(run),
        }
        let output = Tensor::from_op(&[n, oc, geo.out_height, geo.out_width], out, "conv_forward")?;
        Ok((output, ConvCache { input: input.clone() }))
    }

    pub fn backward(&self, cache: &ConvCache<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        let input = &cache.input;
        let (n, geo) = self.geometry(input)?;
        let (oc, rows, pos) = (self.out_channels(), geo.rows(), geo.positions());
        if grad_out.dims() != [n, oc, geo.out_height, geo.out_width] {
            return Err(Error::ShapeMismatch {
                op: "conv_backward",
                left: grad_out.dims().to_vec(),
                right: vec![n, oc, geo.out_height, geo.out_width],
            });
        }
        let img = input.len() / n;
        let w = self.weight.data();
        // per image: (grad_input, grad_weight partial)
        let per_image = |b: usize| -> (Vec<T>, Vec<T>) {
            let go = &grad_out.data()[b * oc * pos..(b + 1) * oc * pos];
            let mut cols = vec![T::zero(); rows * pos];
            geo.unfold(&input.data()[b * img..(b + 1) * img], &mut cols);
            let mut gw = vec![T::zero(); oc * rows];
            gemm_bt(oc, pos, rows, go, &cols, &mut gw);
            let mut gcols = vec![T::zero(); rows * pos];
            gemm_at(rows, oc, pos, w, go, &mut gcols);
            let mut gi = vec![T::zero(); img];
            geo.fold(&gcols, &mut gi);
            (gi, gw)
        };
        let parts: Vec<(Vec<T>, Vec<T>)> = match exec_mode() {
            ExecMode::Deterministic => (0..n).map(per_image).collect(),
            ExecMode::Fast => (0..n).into_par_iter().map(per_image).collect(),
        };
        let mut grad_input = Vec::with_capacity(input.len());
        let mut grad_weight = vec![T::zero(); oc * rows];
        for (gi, gw) in parts {
            grad_input.extend_from_slice(&gi);
            for (acc, v) in grad_weight.iter_mut().zip(gw) {
                *acc += v;
            }
        }
        let grad_bias = match &self.bias {
            Some(_) => {
                let mut gb = vec![T::zero(); oc];
                for b in 0..n {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        let base = (b * oc + o) * pos;
                        *acc += grad_out.data()[base..base + pos].iter().fold(T::zero(), |s, &v| s + v);
                    }
                }
                Some(Tensor::from_op(&[oc], gb, "conv_backward")?)
            }
            None => None,
        };
        Ok(ConvGrads {
            input: Tensor::from_op(input.dims(), grad_input, "conv_backward")?,
            weight: Tensor::from_op(self.weight.dims(), grad_weight, "conv_backward")?,
            bias: grad_bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::set_exec_mode;

    fn random(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.next_gaussian()).collect()).unwrap()
    }

    fn layer(weight: Tensor<f64>, stride: usize, pad: usize) -> ConvLayer<f64> {
        ConvLayer {
            name: "conv".into(),
            weight,
            bias: None,
            stride,
            pad,
        }
    }

    /// Direct six-loop cross-correlation.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, c, h, wd] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
        let [oc, _, k, _] = [w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * oc * oh * ow];
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((b * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, oc, oh, ow], out).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let x = random(&[2, 1, 3, 3], &mut rng);
        let conv = layer(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(), 1, 0);
        assert_eq!(conv.forward(&x).unwrap().0, x);
    }

    #[test]
    fn averaging_kernel_on_constant_field() {
        let x = Tensor::full(&[1, 1, 5, 5], 5.0f64).unwrap();
        let conv = layer(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0).unwrap(), 1, 1);
        let (y, _) = conv.forward(&x).unwrap();
        for oy in 1..4 {
            for ox in 1..4 {
                assert!((y.data()[oy * 5 + ox] - 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = Rng::new(2);
        for (stride, pad, k) in [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1)] {
            let x = random(&[2, 3, 4, 4], &mut rng);
            let w = random(&[5, 3, k, k], &mut rng);
            let conv = layer(w.clone(), stride, pad);
            let Ok((y, _)) = conv.forward(&x) else { continue };
            let expect = naive(&x, &w, stride, pad);
            for (a, b) in y.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(3);
        let conv = ConvLayer::<f64>::he("c", 2, 3, 3, 1, 1, &mut rng).unwrap();
        let x = random(&[2, 2, 4, 4], &mut rng);
        let (y, cache) = conv.forward(&x).unwrap();
        let g = conv.backward(&cache, &Tensor::zeros(y.dims()).unwrap()).unwrap();
        assert!(g.input.data().iter().chain(g.weight.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_weight_grad_is_correlation() {
        let mut rng = Rng::new(4);
        let x = random(&[2, 1, 3, 3], &mut rng);
        let conv = layer(Tensor::from_vec(&[1, 1, 1, 1], vec![0.7]).unwrap(), 1, 0);
        let (_, cache) = conv.forward(&x).unwrap();
        let go = random(&[2, 1, 3, 3], &mut rng);
        let g = conv.backward(&cache, &go).unwrap();
        let expect: f64 = x.data().iter().zip(go.data()).map(|(a, b)| a * b).sum();
        assert!((g.weight.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_small_instance() {
        let mut rng = Rng::new(5);
        let conv = ConvLayer::<f64>::he("c", 1, 2, 3, 1, 1, &mut rng).unwrap();
        let x = random(&[1, 1, 3, 3], &mut rng);
        let (y, cache) = conv.forward(&x).unwrap();
        let r = random(y.dims(), &mut rng);
        let g = conv.backward(&cache, &r).unwrap();
        let loss = |c: &ConvLayer<f64>, x: &Tensor<f64>| {
            c.forward(x)
                .unwrap()
                .0
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-3;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((num - g.input.data()[i]).abs() < 1e-4 * num.abs().max(1.0));
        }
        for i in 0..conv.weight.len() {
            let (mut cp, mut cm) = (conv.clone(), conv.clone());
            cp.weight.data_mut()[i] += h;
            cm.weight.data_mut()[i] -= h;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((num - g.weight.data()[i]).abs() < 1e-4 * num.abs().max(1.0));
        }
    }

    #[test]
    fn fast_mode_is_bit_identical() {
        let mut rng = Rng::new(6);
        let conv = ConvLayer::<f32>::he("c", 3, 4, 3, 1, 1, &mut rng).unwrap();
        let x = random(&[5, 3, 6, 6], &mut rng).cast::<f32>();
        let (y1, c1) = conv.forward(&x).unwrap();
        let g1 = conv.backward(&c1, &y1).unwrap();
        set_exec_mode(ExecMode::Fast);
        let (y2, c2) = conv.forward(&x).unwrap();
        let g2 = conv.backward(&c2, &y2).unwrap();
        set_exec_mode(ExecMode::Deterministic);
        assert_eq!(y1, y2);
        assert_eq!(g1.weight, g2.weight);
        assert_eq!(g1.input, g2.input);
    }

    #[test]
    fn rejects_bad_kernel_and_channels() {
        let mut rng = Rng::new(7);
        assert!(ConvLayer::<f32>::he("c", 1, 1, 2, 1, 0, &mut rng).is_err());
        let conv = ConvLayer::<f32>::he("c", 2, 1, 3, 1, 1, &mut rng).unwrap();
        assert!(conv.forward(&Tensor::zeros(&[1, 3, 4, 4]).unwrap()).is_err());
    }
}
