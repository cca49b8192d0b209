//! Dense row-major tensors and the numerical kernels the layers are built on.
//!
//! Activations always use the `batch x channels x height x width` layout.
//! Every reduction and matrix product accumulates in a fixed order (ascending
//! over the reduced index), so results are bit-reproducible for a given input.

use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicU8, Ordering};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type a tensor can hold. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Execution mode for the heavy kernels.
///
/// `Deterministic` runs everything on the calling thread. `Fast` lets the
/// convolution kernels fan out over the images of a batch with rayon; per-image
/// partial results are still merged in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Deterministic,
    Fast,
}

static EXEC_MODE: AtomicU8 = AtomicU8::new(0);

pub fn set_exec_mode(mode: ExecMode) {
    EXEC_MODE.store(
        match mode {
            ExecMode::Deterministic => 0,
            ExecMode::Fast => 1,
        },
        Ordering::Relaxed,
    );
}

pub fn exec_mode() -> ExecMode {
    match EXEC_MODE.load(Ordering::Relaxed) {
        0 => ExecMode::Deterministic,
        _ => ExecMode::Fast,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::InvalidShape(format!("rank {} not in 1..=4", dims.len())));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape(format!("zero extent in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or_else(|| Error::InvalidShape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "({})", parts.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

fn check_finite<T: Real>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        check_finite(&[value], "full")?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!("{} values for shape {shape}", data.len())));
        }
        check_finite(&data, "from_vec")?;
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from kernel output, rejecting non-finite values.
    pub(crate) fn from_op(dims: &[usize], data: Vec<T>, op: &'static str) -> Result<Self> {
        let shape = Shape::new(dims)?;
        debug_assert_eq!(data.len(), shape.numel());
        check_finite(&data, op)?;
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-place parameter updates. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.dims().to_vec(),
                right: dims.to_vec(),
            });
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_op(self.dims(), data, op)
    }

    fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        Tensor::from_op(self.dims(), self.data.iter().map(|&a| f(a)).collect(), op)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        self.map("scale", |a| a * c)
    }

    pub fn relu(&self) -> Result<Self> {
        self.map("relu", |a| if a > T::zero() { a } else { T::zero() })
    }

    /// Passes `grad` through where `input > 0`, zero elsewhere.
    pub fn relu_backward(grad: &Tensor<T>, input: &Tensor<T>) -> Result<Self> {
        grad.zip_with(input, "relu_backward", |g, x| if x > T::zero() { g } else { T::zero() })
    }

    fn channel_plane(&self, op: &'static str, per_channel: &[T]) -> Result<(usize, usize, usize)> {
        let d = self.dims();
        if d.len() != 4 || d[1] != per_channel.len() {
            return Err(Error::ShapeMismatch {
                op,
                left: d.to_vec(),
                right: vec![per_channel.len()],
            });
        }
        Ok((d[0], d[1], d[2] * d[3]))
    }

    /// Multiplies every element of channel `c` by `factors[c]` (layout batch x N x h x w).
    pub fn mul_channels(&self, factors: &[T]) -> Result<Self> {
        let (_, n, plane) = self.channel_plane("mul_channels", factors)?;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[(i / plane) % n])
            .collect();
        Tensor::from_op(self.dims(), data, "mul_channels")
    }

    pub fn add_channels(&self, offsets: &[T]) -> Result<Self> {
        let (_, n, plane) = self.channel_plane("add_channels", offsets)?;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + offsets[(i / plane) % n])
            .collect();
        Tensor::from_op(self.dims(), data, "add_channels")
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = two_d(self, "transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_op(&[c, r], out, "transpose")
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let [m, k] = two_d(self, "matmul")?;
        let [k2, n] = two_d(other, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &self.data, &other.data, &mut out);
        Tensor::from_op(&[m, n], out, "matmul")
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self> {
        let d = self.dims();
        if count == 0 || start + count > d[0] {
            return Err(Error::InvalidShape(format!(
                "slice {start}..{} of leading extent {}",
                start + count,
                d[0]
            )));
        }
        let stride = self.len() / d[0];
        let mut dims = d.to_vec();
        dims[0] = count;
        Ok(Tensor {
            shape: Shape::new(&dims)?,
            data: self.data[start * stride..(start + count) * stride].to_vec(),
        })
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn stack_outer(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("stack of zero tensors".into()))?;
        let tail = &first.dims()[1..];
        let mut data = Vec::new();
        let mut lead = 0;
        for p in parts {
            if &p.dims()[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "stack_outer",
                    left: first.dims().to_vec(),
                    right: p.dims().to_vec(),
                });
            }
            lead += p.dims()[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(tail);
        Ok(Tensor {
            shape: Shape::new(&dims)?,
            data,
        })
    }
}

fn two_d<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 2]> {
    match t.dims() {
        &[r, c] => Ok([r, c]),
        d => Err(Error::ShapeMismatch {
            op,
            left: d.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// `c += a (m x k) * b (k x n)`. Each output accumulates over `k` in ascending order.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a^T * b` with `a` stored `k x m` and `b` stored `k x n`.
pub(crate) fn gemm_at<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a * b^T` with `a` stored `m x k` and `b` stored `n x k`.
pub(crate) fn gemm_bt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// Patch geometry for a square kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl PatchGeometry {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let extent = |size: usize| -> Result<usize> {
            let padded = size + 2 * pad;
            if stride == 0 || kernel == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
                return Err(Error::InvalidShape(format!(
                    "kernel {kernel}, stride {stride}, pad {pad} does not tile extent {size}"
                )));
            }
            Ok((padded - kernel) / stride + 1)
        };
        Ok(PatchGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: extent(height)?,
            out_width: extent(width)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Unfolds one image (`channels x height x width`) into a `rows x positions` matrix.
    pub(crate) fn unfold<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let positions = self.positions();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_height {
                        let iy = (oy * s + ky) as isize - p;
                        for ox in 0..self.out_width {
                            let ix = (ox * s + kx) as isize - p;
                            dst[oy * self.out_width + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.height && (ix as usize) < self.width {
                                    plane[iy as usize * self.width + ix as usize]
                                } else {
                                    T::zero()
                                };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `unfold`: scatters columns back onto the image, accumulating overlaps.
    pub(crate) fn fold<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let positions = self.positions();
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_height {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_width {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && (ix as usize) < self.width {
                                plane[iy as usize * self.width + ix as usize] += src[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn four_d<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match t.dims() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        d => Err(Error::InvalidShape(format!("{op} expects a 4-D tensor, got {d:?}"))),
    }
}

/// Unfolds a `b x c x h x w` batch into a `(c*k*k) x (b*oh*ow)` matrix.
///
/// Column `(n * oh + oy) * ow + ox` holds the receptive field of output
/// position `(oy, ox)` of image `n`; padding contributes zeros.
pub fn im2col<T: Real>(input: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = four_d(input, "im2col")?;
    let geo = PatchGeometry::new(c, h, w, kernel, stride, pad)?;
    let (rows, pos) = (geo.rows(), geo.positions());
    let mut out = vec![T::zero(); rows * b * pos];
    let mut cols = vec![T::zero(); rows * pos];
    let img = c * h * w;
    for n in 0..b {
        geo.unfold(&input.data()[n * img..(n + 1) * img], &mut cols);
        for r in 0..rows {
            out[r * b * pos + n * pos..r * b * pos + (n + 1) * pos].copy_from_slice(&cols[r * pos..(r + 1) * pos]);
        }
    }
    Tensor::from_op(&[rows, b * pos], out, "im2col")
}

/// Inverse accumulation of [`im2col`] back onto a tensor of shape `input_dims`.
pub fn col2im<T: Real>(
    cols: &Tensor<T>,
    input_dims: &[usize],
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let &[b, c, h, w] = input_dims else {
        return Err(Error::InvalidShape(format!("col2im target {input_dims:?} is not 4-D")));
    };
    let geo = PatchGeometry::new(c, h, w, kernel, stride, pad)?;
    let (rows, pos) = (geo.rows(), geo.positions());
    if cols.dims() != [rows, b * pos] {
        return Err(Error::ShapeMismatch {
            op: "col2im",
            left: cols.dims().to_vec(),
            right: vec![rows, b * pos],
        });
    }
    let img = c * h * w;
    let mut out = vec![T::zero(); b * img];
    let mut per_image = vec![T::zero(); rows * pos];
    for n in 0..b {
        for r in 0..rows {
            per_image[r * pos..(r + 1) * pos]
                .copy_from_slice(&cols.data()[r * b * pos + n * pos..r * b * pos + (n + 1) * pos]);
        }
        geo.fold(&per_image, &mut out[n * img..(n + 1) * img]);
    }
    Tensor::from_op(input_dims, out, "col2im")
}

/// Per-channel mean and raw second moment over all `m * h * w` positions.
///
/// Sums are accumulated in `f64` in storage order.
pub fn channel_moments<T: Real>(input: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let [m, n, h, w] = four_d(input, "channel_moments")?;
    let plane = h * w;
    let mut sum = vec![0f64; n];
    let mut sq = vec![0f64; n];
    for b in 0..m {
        for c in 0..n {
            let base = (b * n + c) * plane;
            for &v in &input.data()[base..base + plane] {
                let v = v.as_f64();
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let count = (m * plane) as f64;
    Ok((
        sum.iter().map(|s| T::lit(s / count)).collect(),
        sq.iter().map(|s| T::lit(s / count)).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.next_gaussian()).collect()).unwrap()
    }

    #[test]
    fn zeros_and_identity() {
        let z = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert_eq!(z.data(), &[0.0; 6]);
        assert_eq!(Tensor::<f32>::zeros(&[1]).unwrap().data(), &[0.0]);
        let t = Tensor::from_vec(&[2, 3], vec![1.0f32, -2.0, 3.0, 4.5, 0.0, 7.0]).unwrap();
        assert_eq!(z.add(&t).unwrap(), t);
    }

    #[test]
    fn shape_validation() {
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[2, 0]).is_err());
        assert!(Shape::new(&[1, 2, 3, 4, 5]).is_err());
        assert!(Shape::new(&[usize::MAX, 2]).is_err());
        assert_eq!(Shape::new(&[2, 3, 4]).unwrap().numel(), 24);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(matches!(
            Tensor::from_vec(&[2], vec![1.0f32, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        let big = Tensor::from_vec(&[1], vec![f32::MAX]).unwrap();
        assert!(big.add(&big).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let a = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let r = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(r.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::from_vec(&[3], vec![5.0f32, 5.0, 5.0]).unwrap();
        assert_eq!(Tensor::relu_backward(&g, &r).unwrap().data(), &[0.0, 0.0, 5.0]);
        let c = Tensor::from_vec(&[3], vec![0.0f32; 3]).unwrap();
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn per_channel_broadcast_matches_loop() {
        let mut rng = Rng::new(3);
        let x = random(&[2, 3, 2, 2], &mut rng);
        let f = [1.0, 10.0, 100.0];
        let y = x.mul_channels(&f).unwrap();
        for b in 0..2 {
            for (c, &fc) in f.iter().enumerate() {
                for i in 0..4 {
                    let idx = (b * 3 + c) * 4 + i;
                    assert_eq!(y.data()[idx], x.data()[idx] * fc);
                }
            }
        }
        assert!(x.mul_channels(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0f64, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        let eye = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
        assert!(b.matmul(&a).is_err());
    }

    #[test]
    fn matmul_transpose_identity() {
        let mut rng = Rng::new(11);
        let a = random(&[3, 5], &mut rng);
        let b = random(&[5, 4], &mut rng);
        let left = a.matmul(&b).unwrap().transpose().unwrap();
        let right = b.transpose().unwrap().matmul(&a.transpose().unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let mut rng = Rng::new(5);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let reference = a.matmul(&b).unwrap();
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        let mut c1 = vec![0.0; 6];
        gemm_at(3, 4, 2, at.data(), b.data(), &mut c1);
        let mut c2 = vec![0.0; 6];
        gemm_bt(3, 4, 2, a.data(), bt.data(), &mut c2);
        for i in 0..6 {
            assert!((c1[i] - reference.data()[i]).abs() < 1e-12);
            assert!((c2[i] - reference.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_single_window() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&x, 2, 1, 0).unwrap();
        assert_eq!(cols.dims(), &[4, 1]);
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_padded_matches_sliding_window() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let cols = im2col(&x, 3, 1, 1).unwrap();
        assert_eq!(cols.dims(), &[9, 9]);
        // brute force: column j = window centered at output (j / 3, j % 3)
        for j in 0..9 {
            let (oy, ox) = ((j / 3) as isize, (j % 3) as isize);
            for r in 0..9 {
                let (ky, kx) = ((r / 3) as isize, (r % 3) as isize);
                let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                let expect = if (0..3).contains(&iy) && (0..3).contains(&ix) {
                    x.data()[(iy * 3 + ix) as usize]
                } else {
                    0.0
                };
                assert_eq!(cols.data()[r * 9 + j], expect);
            }
        }
        let center: Vec<f64> = (0..9).map(|j| cols.data()[4 * 9 + j]).collect();
        assert_eq!(center, x.data());
    }

    #[test]
    fn col2im_inverts_identity_kernel() {
        let mut rng = Rng::new(9);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let cols = im2col(&x, 1, 1, 0).unwrap();
        assert_eq!(col2im(&cols, x.dims(), 1, 1, 0).unwrap(), x);
    }

    #[test]
    fn im2col_rejects_non_integral_extent() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]).unwrap();
        assert!(im2col(&x, 3, 2, 0).is_err());
    }

    #[test]
    fn moments_examples() {
        let x = Tensor::full(&[3, 1, 2, 2], 2.0f32).unwrap();
        let (mean, sq) = channel_moments(&x).unwrap();
        assert_eq!((mean[0], sq[0]), (2.0, 4.0));
        let y = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (mean, sq) = channel_moments(&y).unwrap();
        assert_eq!((mean[0], sq[0]), (2.5, 7.5));
    }

    #[test]
    fn moments_match_naive_loop() {
        let mut rng = Rng::new(21);
        for _ in 0..5 {
            let x = random(&[3, 4, 2, 5], &mut rng);
            let (mean, sq) = channel_moments(&x).unwrap();
            for c in 0..4 {
                let mut vals = Vec::new();
                for b in 0..3 {
                    for i in 0..10 {
                        vals.push(x.data()[(b * 4 + c) * 10 + i]);
                    }
                }
                let m: f64 = vals.iter().sum::<f64>() / 30.0;
                let s: f64 = vals.iter().map(|v| v * v).sum::<f64>() / 30.0;
                assert!((mean[c] - m).abs() <= 1e-5 * m.abs().max(1e-12) + 1e-12);
                assert!((sq[c] - s).abs() <= 1e-5 * s.abs());
            }
        }
    }

    #[test]
    fn moments_are_permutation_invariant() {
        let mut rng = Rng::new(4);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let mut perm: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut perm);
        let y = Tensor::from_vec(&[1, 1, 4, 4], perm.iter().map(|&i| x.data()[i]).collect()).unwrap();
        let a = channel_moments(&x).unwrap().0[0];
        let b = channel_moments(&y).unwrap().0[0];
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn stack_and_slice_roundtrip() {
        let mut rng = Rng::new(1);
        let x = random(&[4, 2, 3, 3], &mut rng);
        let parts: Vec<_> = (0..4).map(|i| x.slice_outer(i, 1).unwrap()).collect();
        assert_eq!(Tensor::stack_outer(&parts).unwrap(), x);
    }
}
