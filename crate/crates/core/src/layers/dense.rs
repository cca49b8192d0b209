use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, gemm_at, gemm_bt, Real, Tensor};

/// Affine map `y = x W^T + b` over a `batch x in` input.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer<T = f32> {
    pub name: String,
    /// `out x in`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FcGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> FcLayer<T> {
    /// Weights `N(0, 2 / in)`, zero bias.
    pub fn he(name: impl Into<String>, inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        let std = (2.0 / inputs as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| T::lit(std * rng.next_gaussian()))
            .collect();
        Ok(FcLayer {
            name: name.into(),
            weight: Tensor::from_vec(&[outputs, inputs], data)?,
            bias: Tensor::zeros(&[outputs])?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.dims()[0]
    }

    fn batch(&self, input: &Tensor<T>) -> Result<usize> {
        match input.dims() {
            &[m, k] if k == self.inputs() => Ok(m),
            d => Err(Error::ShapeMismatch {
                op: "fc",
                left: d.to_vec(),
                right: self.weight.dims().to_vec(),
            }),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.batch(input)?;
        let (k, o) = (self.inputs(), self.outputs());
        let mut out: Vec<T> = (0..m).flat_map(|_| self.bias.data().iter().copied()).collect();
        gemm_bt(m, k, o, input.data(), self.weight.data(), &mut out);
        Tensor::from_op(&[m, o], out, "fc_forward")
    }

    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<FcGrads<T>> {
        let m = self.batch(input)?;
        let (k, o) = (self.inputs(), self.outputs());
        if grad_out.dims() != [m, o] {
            return Err(Error::ShapeMismatch {
                op: "fc_backward",
                left: grad_out.dims().to_vec(),
                right: vec![m, o],
            });
        }
        let mut gi = vec![T::zero(); m * k];
        gemm(m, o, k, grad_out.data(), self.weight.data(), &mut gi);
        let mut gw = vec![T::zero(); o * k];
        gemm_at(o, m, k, grad_out.data(), input.data(), &mut gw);
        let mut gb = vec![T::zero(); o];
        for row in grad_out.data().chunks(o) {
            for (acc, &g) in gb.iter_mut().zip(row) {
                *acc += g;
            }
        }
        Ok(FcGrads {
            input: Tensor::from_op(&[m, k], gi, "fc_backward")?,
            weight: Tensor::from_op(&[o, k], gw, "fc_backward")?,
            bias: Tensor::from_op(&[o], gb, "fc_backward")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct XentOutput<T = f32> {
    /// Mean negative log-likelihood over the batch.
    pub loss: T,
    /// `(p - onehot) / m`
    pub grad: Tensor<T>,
    pub probabilities: Tensor<T>,
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, c] = logits.dims() else {
        return Err(Error::InvalidShape(format!(
            "softmax expects 2-D logits, got {:?}",
            logits.dims()
        )));
    };
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z = exps.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::from_op(logits.dims(), out, "softmax")
}

pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<XentOutput<T>> {
    let &[m, c] = logits.dims() else {
        return Err(Error::InvalidShape(format!(
            "softmax_xent expects 2-D logits, got {:?}",
            logits.dims()
        )));
    };
    if labels.len() != m {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            left: logits.dims().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let probs = softmax(logits)?;
    let mut loss = 0f64;
    let inv_m = T::lit(1.0 / m as f64);
    let mut grad = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64();
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        grad[i * c + label] -= T::one();
        grad[i * c..(i + 1) * c].iter_mut().for_each(|g| *g *= inv_m);
    }
    Ok(XentOutput {
        loss: T::lit(loss / m as f64),
        grad: Tensor::from_op(logits.dims(), grad, "softmax_xent")?,
        probabilities: probs,
    })
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.next_gaussian()).collect()).unwrap()
    }

    #[test]
    fn identity_weights_pass_through() {
        let fc = FcLayer {
            name: "fc".into(),
            weight: Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]).unwrap(),
        };
        let x = Tensor::from_vec(&[1, 2], vec![3.0, -4.0]).unwrap();
        assert_eq!(fc.forward(&x).unwrap(), x);
    }

    #[test]
    fn batch_equals_stacked_singletons() {
        let mut rng = Rng::new(1);
        let fc = FcLayer::<f64>::he("fc", 4, 3, &mut rng).unwrap();
        let x = random(&[2, 4], &mut rng);
        let y = fc.forward(&x).unwrap();
        let rows: Vec<_> = (0..2)
            .map(|i| fc.forward(&x.slice_outer(i, 1).unwrap()).unwrap())
            .collect();
        assert_eq!(Tensor::stack_outer(&rows).unwrap(), y);
    }

    #[test]
    fn fc_finite_differences() {
        let mut rng = Rng::new(2);
        let mut fc = FcLayer::<f64>::he("fc", 4, 3, &mut rng).unwrap();
        fc.bias = random(&[3], &mut rng);
        let x = random(&[2, 4], &mut rng);
        let r = random(&[2, 3], &mut rng);
        let g = fc.backward(&x, &r).unwrap();
        let loss = |f: &FcLayer<f64>, x: &Tensor<f64>| f.forward(x).unwrap().mul(&r).unwrap().sum();
        let h = 1e-3;
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let num = (loss(&fc, &a) - loss(&fc, &b)) / (2.0 * h);
            assert!((num - g.input.data()[i]).abs() < 1e-8);
        }
        for i in 0..fc.weight.len() {
            let (mut a, mut b) = (fc.clone(), fc.clone());
            a.weight.data_mut()[i] += h;
            b.weight.data_mut()[i] -= h;
            let num = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!((num - g.weight.data()[i]).abs() < 1e-8);
        }
        for i in 0..3 {
            let expect: f64 = (0..2).map(|b| r.data()[b * 3 + i]).sum();
            assert!((expect - g.bias.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let logits = Tensor::<f64>::zeros(&[3, 10]).unwrap();
        let out = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_true_logit_is_stable() {
        let logits = Tensor::from_vec(&[1, 3], vec![1000.0f32, 0.0, -5.0]).unwrap();
        let out = softmax_xent(&logits, &[0]).unwrap();
        assert!(out.loss.is_finite() && out.loss.abs() < 1e-6);
        assert!(out.grad.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::<f32>::zeros(&[1, 3]).unwrap();
        assert!(matches!(
            softmax_xent(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn xent_finite_differences() {
        let mut rng = Rng::new(3);
        let logits = random(&[3, 4], &mut rng);
        let labels = [1, 3, 0];
        let out = softmax_xent(&logits, &labels).unwrap();
        let h = 1e-3;
        for i in 0..logits.len() {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let num = (softmax_xent(&a, &labels).unwrap().loss - softmax_xent(&b, &labels).unwrap().loss) / (2.0 * h);
            assert!((num - out.grad.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }
}
