use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Max pooling with square windows.
///
/// The output extent is `ceil((size - window) / stride) + 1`. Windows that run
/// past the bottom or right edge only see the in-bounds positions, which is the
/// same as padding with negative infinity. This gives 36 -> 18 -> 9 and
/// 112 -> 56 -> 28 -> 14 -> 7 for a 3x3 window with stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
}

impl Default for MaxPool {
    fn default() -> Self {
        MaxPool { window: 3, stride: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub input_dims: Vec<usize>,
    /// Flat input index of the winner for every output element.
    pub argmax: Vec<usize>,
}

impl MaxPool {
    pub fn output_extent(&self, size: usize) -> usize {
        size.saturating_sub(self.window).div_ceil(self.stride) + 1
    }

    pub fn output_dims(&self, input_dims: &[usize]) -> Result<Vec<usize>> {
        match input_dims {
            &[n, c, h, w] => Ok(vec![n, c, self.output_extent(h), self.output_extent(w)]),
            d => Err(Error::InvalidShape(format!("max pool expects 4-D input, got {d:?}"))),
        }
    }

    /// Ties resolve to the first maximum in row-major window order.
    pub fn forward<T: Real>(&self, input: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache)> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidShape(
                "max pool window and stride must be positive".into(),
            ));
        }
        let out_dims = self.output_dims(input.dims())?;
        let [n, c, h, w] = [input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]];
        let (oh, ow) = (out_dims[2], out_dims[3]);
        let x = input.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let y0 = oy * self.stride;
                let y1 = (y0 + self.window).min(h);
                for ox in 0..ow {
                    let x0 = ox * self.stride;
                    let x1 = (x0 + self.window).min(w);
                    let mut best = base + y0 * w + x0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let idx = base + iy * w + ix;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((
            Tensor::from_op(&out_dims, out, "maxpool_forward")?,
            MaxPoolCache {
                input_dims: input.dims().to_vec(),
                argmax,
            },
        ))
    }

    pub fn backward<T: Real>(&self, cache: &MaxPoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.len() != cache.argmax.len() {
            return Err(Error::ShapeMismatch {
                op: "maxpool_backward",
                left: grad_out.dims().to_vec(),
                right: self.output_dims(&cache.input_dims)?,
            });
        }
        let mut gi = vec![T::zero(); cache.input_dims.iter().product()];
        for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
            gi[idx] += g;
        }
        Tensor::from_op(&cache.input_dims, gi, "maxpool_backward")
    }
}

/// Per-channel spatial mean: `n x c x h x w -> n x c`.
pub fn global_avgpool_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input.dims() else {
        return Err(Error::InvalidShape(format!(
            "global pool expects 4-D input, got {:?}",
            input.dims()
        )));
    };
    let plane = h * w;
    let scale = T::lit(1.0 / plane as f64);
    let out = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().fold(T::zero(), |s, &v| s + v) * scale)
        .collect();
    Tensor::from_op(&[n, c], out, "global_avgpool_forward")
}

pub fn global_avgpool_backward<T: Real>(input_dims: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_dims else {
        return Err(Error::InvalidShape(format!(
            "global pool expects 4-D input, got {input_dims:?}"
        )));
    };
    if grad_out.dims() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "global_avgpool_backward",
            left: grad_out.dims().to_vec(),
            right: vec![n, c],
        });
    }
    let scale = T::lit(1.0 / (h * w) as f64);
    let gi = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, h * w))
        .collect();
    Tensor::from_op(input_dims, gi, "global_avgpool_backward")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn extents_follow_the_architecture_tables() {
        let p = MaxPool::default();
        let chain: Vec<usize> = [36, 18].iter().map(|&s| p.output_extent(s)).collect();
        assert_eq!(chain, [18, 9]);
        let chain: Vec<usize> = [112, 56, 28, 14].iter().map(|&s| p.output_extent(s)).collect();
        assert_eq!(chain, [56, 28, 14, 7]);
        assert_eq!(p.output_extent(2), 1);
    }

    #[test]
    fn increasing_plane_picks_bottom_right() {
        let x = Tensor::from_vec(&[1, 1, 5, 5], (0..25).map(|v| v as f32).collect()).unwrap();
        let (y, cache) = MaxPool::default().forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 14.0, 22.0, 24.0]);
        assert_eq!(cache.argmax, vec![12, 14, 22, 24]);
    }

    #[test]
    fn ties_pick_first_in_window() {
        let x = Tensor::full(&[1, 1, 5, 5], 1.0f32).unwrap();
        let (_, cache) = MaxPool::default().forward(&x).unwrap();
        assert_eq!(cache.argmax, vec![0, 2, 10, 12]);
    }

    #[test]
    fn overrunning_windows_at_the_edge() {
        // 4x4 -> 2x2; second window column covers x = 2..3 only
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| -(v as f32)).collect()).unwrap();
        let (y, _) = MaxPool::default().forward(&x).unwrap();
        assert_eq!(y.data(), &[0.0, -2.0, -8.0, -10.0]);
    }

    #[test]
    fn matches_window_scan_oracle() {
        let mut rng = Rng::new(1);
        let (h, w) = (9, 7);
        let x = Tensor::from_vec(&[2, 2, h, w], (0..2 * 2 * h * w).map(|_| rng.next_gaussian()).collect()).unwrap();
        let pool = MaxPool::default();
        let (y, _) = pool.forward(&x).unwrap();
        let (oh, ow) = (pool.output_extent(h), pool.output_extent(w));
        for plane in 0..4 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                            if iy < h && ix < w {
                                best = best.max(x.data()[plane * h * w + iy * w + ix]);
                            }
                        }
                    }
                    assert_eq!(y.data()[(plane * oh + oy) * ow + ox], best);
                }
            }
        }
    }

    #[test]
    fn backward_routes_to_winners() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0f64, 9.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let pool = MaxPool { window: 2, stride: 1 };
        let (y, cache) = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[9.0, 9.0, 7.0, 8.0]);
        let g = pool
            .backward(&cache, &Tensor::full(&[1, 1, 2, 2], 1.0).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn global_pool_examples() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        let y = global_avgpool_forward(&x).unwrap();
        assert_eq!(y.data(), &[2.5, 7.0]);
        let g = global_avgpool_backward(x.dims(), &Tensor::from_vec(&[1, 2], vec![4.0, 8.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
