//! Dense row-major tensors and the convolution / elementwise kernels the
//! network layers are built from.

use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};

/// Dense n-dimensional array with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("tensor extents must be positive");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("tensor extents must be positive");
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// One-dimensional tensor from a slice.
    pub fn vector(values: &[T]) -> Self {
        Self {
            shape: vec![values.len().max(1)],
            data: if values.is_empty() {
                vec![T::zero()]
            } else {
                values.to_vec()
            },
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {} out of bounds for extent {}", i, d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Number of entries different from zero.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|x| !x.is_zero()).count()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        same_shape("axpy", &self.shape, &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    /// Borrow channel `c` of a rank-3 tensor.
    pub fn channel(&self, c: usize) -> &[T] {
        assert_eq!(self.rank(), 3, "channel() needs a rank-3 tensor");
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidTensor("rank must be at least 1".into()));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidTensor(format!(
            "extent {} of shape {:?} is zero",
            pos, shape
        )));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            "rank",
            format!("{:?} vs {:?}", a, b),
        ));
    }
    if let Some(d) = a.iter().zip(b).position(|(x, y)| x != y) {
        return Err(Error::shape(
            op,
            AXIS_NAMES.get(d).copied().unwrap_or("axis"),
            format!("axis {} differs: {:?} vs {:?}", d, a, b),
        ));
    }
    Ok(())
}

const AXIS_NAMES: [&str; 4] = ["axis 0", "axis 1", "axis 2", "axis 3"];

/// Geometry of a valid (unpadded) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if input.len() != 3 {
            return Err(Error::shape(OP, "input rank", format!("expected [C,H,W], got {:?}", input)));
        }
        if kernels.len() != 4 {
            return Err(Error::shape(
                OP,
                "kernel rank",
                format!("expected [C_out,C_in,k,k], got {:?}", kernels),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(OP, "stride", "stride must be positive"));
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (o, ci, kh, kw) = (kernels[0], kernels[1], kernels[2], kernels[3]);
        if ci != c {
            return Err(Error::shape(
                OP,
                "input channels",
                format!("input has {} channels, kernels expect {}", c, ci),
            ));
        }
        if kh != kw {
            return Err(Error::shape(OP, "kernel width", format!("kernel is {}x{}, must be square", kh, kw)));
        }
        if kh > h {
            return Err(Error::shape(OP, "height", format!("kernel {} exceeds input height {}", kh, h)));
        }
        if kw > w {
            return Err(Error::shape(OP, "width", format!("kernel {} exceeds input width {}", kw, w)));
        }
        Ok(Self {
            in_channels: c,
            out_channels: o,
            height: h,
            width: w,
            kernel: kh,
            stride,
            out_height: (h - kh) / stride + 1,
            out_width: (w - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_height, self.out_width]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Unfolds the input into a `[C_in*k*k, H'*W']` matrix.
    fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let k = self.kernel;
        let s = self.stride;
        let n = self.out_len();
        let mut cols = vec![T::zero(); self.patch_len() * n];
        for c in 0..self.in_channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for u in 0..k {
                for v in 0..k {
                    let row = (c * k + u) * k + v;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for i in 0..self.out_height {
                        let src = &plane[(i * s + u) * self.width + v..];
                        let out = &mut dst[i * self.out_width..(i + 1) * self.out_width];
                        if s == 1 {
                            out.copy_from_slice(&src[..self.out_width]);
                        } else {
                            for (j, o) in out.iter_mut().enumerate() {
                                *o = src[j * s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds columns back into an image.
    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let k = self.kernel;
        let s = self.stride;
        let n = self.out_len();
        let mut image = vec![T::zero(); self.in_channels * self.height * self.width];
        for c in 0..self.in_channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for u in 0..k {
                for v in 0..k {
                    let row = (c * k + u) * k + v;
                    let src = &cols[row * n..(row + 1) * n];
                    for i in 0..self.out_height {
                        let base = (i * s + u) * self.width + v;
                        let line = &src[i * self.out_width..(i + 1) * self.out_width];
                        if s == 1 {
                            for (dst, &x) in plane[base..base + self.out_width].iter_mut().zip(line) {
                                *dst += x;
                            }
                        } else {
                            for (j, &x) in line.iter().enumerate() {
                                plane[base + j * s] += x;
                            }
                        }
                    }
                }
            }
        }
        image
    }
}

/// Valid 2-D cross-correlation:
/// `out[o,i,j] = bias[o] + sum_{c,u,v} input[c, i*s+u, j*s+v] * kernels[o,c,u,v]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride)?;
    if bias.len() != g.out_channels {
        return Err(Error::shape(
            "conv2d",
            "bias",
            format!("bias has {} entries for {} output channels", bias.len(), g.out_channels),
        ));
    }
    let n = g.out_len();
    let mut out = Vec::with_capacity(g.out_channels * n);
    for &b in bias.data() {
        out.extend(std::iter::repeat(b).take(n));
    }
    let cols = g.im2col(input.data());
    gemm(
        g.out_channels,
        g.patch_len(),
        n,
        kernels.data(),
        Layout::Normal,
        &cols,
        Layout::Normal,
        T::one(),
        &mut out,
    );
    Tensor::new(g.output_shape().to_vec(), out)
}

/// Gradients of `sum(grad_out * conv2d_forward(..))` with respect to each
/// argument of the convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv2d_backward_impl(input, kernels, stride, grad_out, true)?;
    Ok((g.input.expect("input gradient requested"), g.kernels, g.bias))
}

/// Backward pass that can skip the input gradient (first layer).
pub(crate) fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride)?;
    same_shape("conv2d_backward", grad_out.shape(), &g.output_shape())?;
    let n = g.out_len();
    let go = grad_out.data();

    let bias: Vec<T> = go.chunks(n).map(|row| row.iter().copied().sum()).collect();

    let cols = g.im2col(input.data());
    let mut gk = vec![T::zero(); g.out_channels * g.patch_len()];
    gemm(
        g.out_channels,
        n,
        g.patch_len(),
        go,
        Layout::Normal,
        &cols,
        Layout::Transposed,
        T::zero(),
        &mut gk,
    );

    let grad_input = if need_input {
        let mut gcols = vec![T::zero(); g.patch_len() * n];
        gemm(
            g.patch_len(),
            g.out_channels,
            n,
            kernels.data(),
            Layout::Transposed,
            go,
            Layout::Normal,
            T::zero(),
            &mut gcols,
        );
        Some(Tensor::new(input.shape().to_vec(), g.col2im(&gcols))?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        kernels: Tensor::new(kernels.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![g.out_channels], bias)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Mul,
    Add,
}

pub fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    same_shape("elementwise", a.shape(), b.shape())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match op {
            BinaryOp::Mul => x * y,
            BinaryOp::Add => x + y,
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// 1 where `preact > 0`, else 0 (including at exactly 0).
pub fn relu_grad<T: Scalar>(preact: &Tensor<T>) -> Tensor<T> {
    preact.map(|x| if x > T::zero() { T::one() } else { T::zero() })
}

/// Dense matrix-vector product `weights * x + bias`, `weights` is `[out, in]`.
pub fn dense_forward<T: Scalar>(weights: &Tensor<T>, bias: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    if weights.rank() != 2 {
        return Err(Error::shape("dense", "weight rank", format!("{:?}", weights.shape())));
    }
    let (out, inp) = (weights.shape()[0], weights.shape()[1]);
    if x.len() != inp {
        return Err(Error::shape(
            "dense",
            "input length",
            format!("weights expect {} inputs, got {}", inp, x.len()),
        ));
    }
    if bias.len() != out {
        return Err(Error::shape(
            "dense",
            "bias",
            format!("bias has {} entries for {} outputs", bias.len(), out),
        ));
    }
    let mut y = bias.data().to_vec();
    gemm(out, inp, 1, weights.data(), Layout::Normal, x, Layout::Normal, T::one(), &mut y);
    Ok(y)
}

/// Returns `(grad_x, grad_weights)`; the bias gradient equals `grad_y`.
pub fn dense_backward<T: Scalar>(
    weights: &Tensor<T>,
    x: &[T],
    grad_y: &[T],
    need_input: bool,
) -> Result<(Option<Vec<T>>, Tensor<T>)> {
    let (out, inp) = (weights.shape()[0], weights.shape()[1]);
    if x.len() != inp || grad_y.len() != out {
        return Err(Error::shape(
            "dense_backward",
            "vector length",
            format!("weights {:?}, x {}, grad {}", weights.shape(), x.len(), grad_y.len()),
        ));
    }
    let mut gw = vec![T::zero(); out * inp];
    gemm(out, 1, inp, grad_y, Layout::Normal, x, Layout::Normal, T::zero(), &mut gw);
    let gx = if need_input {
        let mut gx = vec![T::zero(); inp];
        gemm(inp, out, 1, weights.data(), Layout::Transposed, grad_y, Layout::Normal, T::zero(), &mut gx);
        Some(gx)
    } else {
        None
    };
    Ok((gx, Tensor::new(vec![out, inp], gw)?))
}

const TNT_MAGIC: &[u8; 4] = b"TNT1";

/// Serializes as `TNT1\n<rank> <d0> ... <dn>\n` followed by little-endian
/// `f32` payload. Wider scalars are narrowed to `f32`.
pub fn encode_tnt<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * t.len());
    buf.extend_from_slice(TNT_MAGIC);
    buf.push(b'\n');
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    buf.extend_from_slice(format!("{} {}\n", t.rank(), dims.join(" ")).as_bytes());
    for &x in t.data() {
        let v = x.to_f32().unwrap_or(f32::NAN);
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tnt(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut reader = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 5];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::format("TNT1 tensor", "truncated magic"))?;
    if &magic[..4] != TNT_MAGIC || magic[4] != b'\n' {
        return Err(Error::format("TNT1 tensor", "bad magic"));
    }
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| Error::format("TNT1 tensor", e.to_string()))?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("TNT1 tensor", format!("header {:?}: {}", header.trim(), e)))?;
    let (&rank, dims) = fields
        .split_first()
        .ok_or_else(|| Error::format("TNT1 tensor", "empty header"))?;
    if dims.len() != rank {
        return Err(Error::format(
            "TNT1 tensor",
            format!("rank {} but {} extents", rank, dims.len()),
        ));
    }
    let start = reader.position() as usize;
    let payload = &bytes[start..];
    let count: usize = dims.iter().product();
    if payload.len() != 4 * count {
        return Err(Error::format(
            "TNT1 tensor",
            format!("expected {} payload bytes, found {}", 4 * count, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(dims.to_vec(), data)
}

pub fn write_tnt<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tnt(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tnt(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tnt(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    // Straight quadruple loop, kept independent of the im2col path.
    fn naive_conv(input: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, s: usize) -> Tensor<f64> {
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (o, ks) = (k.shape()[0], k.shape()[2]);
        let (oh, ow) = ((h - ks) / s + 1, (w - ks) / s + 1);
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for u in 0..ks {
                            for v in 0..ks {
                                acc += input.get(&[ic, i * s + u, j * s + v]) * k.get(&[oc, ic, u, v]);
                            }
                        }
                    }
                    out.set(&[oc, i, j], acc);
                }
            }
        }
        out
    }

    #[test]
    fn constant_input_sums_kernel() {
        let input = Tensor::<f64>::filled(&[1, 8, 8], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(&input, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(out.shape(), &[1, 6, 6]);
        assert!(out.data().iter().all(|&x| x == 9.0));
    }

    #[test]
    fn strided_output_extent() {
        let input = Tensor::<f64>::filled(&[1, 8, 8], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(&input, &k, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
    }

    #[test]
    fn random_case_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let got = conv2d_forward(&input, &k, &b, 1).unwrap();
        let want = naive_conv(&input, &k, &b, 1);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let input = Tensor::<f64>::zeros(&[2, 5, 5]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&input, &k, &Tensor::zeros(&[1]), 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{}", err);

        let k = Tensor::zeros(&[1, 2, 7, 7]);
        let err = conv2d_forward(&input, &k, &Tensor::zeros(&[1]), 1).unwrap_err();
        assert!(err.to_string().contains("height"), "{}", err);

        let k = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d_forward(&input, &k, &Tensor::zeros(&[3]), 1).unwrap_err();
        assert!(err.to_string().contains("bias"), "{}", err);

        let k = Tensor::zeros(&[1, 2, 3, 3]);
        let bad = Tensor::zeros(&[1, 2, 2]);
        let err = conv2d_backward(&input, &k, 1, &bad).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random(&[2, 6, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let (gi, gk, gb) = conv2d_backward(&input, &k, 1, &Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(gi.data().iter().chain(gk.data()).chain(gb.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn pointwise_kernel_gradient_is_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = random(&[2, 4, 4], &mut rng);
        let k = random(&[3, 2, 1, 1], &mut rng);
        let go = random(&[3, 4, 4], &mut rng);
        let (_, gk, _) = conv2d_backward(&input, &k, 1, &go).unwrap();
        for o in 0..3 {
            for c in 0..2 {
                let mut want = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        want += input.get(&[c, i, j]) * go.get(&[o, i, j]);
                    }
                }
                assert!((gk.get(&[o, c, 0, 0]) - want).abs() < 1e-12);
            }
        }
    }

    fn weighted_sum(input: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, s: usize, go: &Tensor<f64>) -> f64 {
        let out = conv2d_forward(input, k, b, s).unwrap();
        out.data().iter().zip(go.data()).map(|(a, b)| a * b).sum()
    }

    fn check_fd(
        value: &Tensor<f64>,
        analytic: &Tensor<f64>,
        eval: impl Fn(&Tensor<f64>) -> f64,
    ) {
        let eps = 1e-6;
        for idx in 0..value.len() {
            let mut plus = value.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = value.clone();
            minus.data_mut()[idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            assert!(rel <= 1e-6, "coordinate {}: analytic {} numeric {} rel {}", idx, a, numeric, rel);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &stride in &[1usize, 2] {
            let input = random(&[2, 7, 7], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let oh = (7 - 3) / stride + 1;
            let go = random(&[3, oh, oh], &mut rng);
            let (gi, gk, gb) = conv2d_backward(&input, &k, stride, &go).unwrap();
            check_fd(&input, &gi, |x| weighted_sum(x, &k, &b, stride, &go));
            check_fd(&k, &gk, |kk| weighted_sum(&input, kk, &b, stride, &go));
            check_fd(&b, &gb, |bb| weighted_sum(&input, &k, bb, stride, &go));
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random(&[4, 6], &mut rng);
        let b = random(&[4], &mut rng);
        let x = random(&[6], &mut rng);
        let gy = random(&[4], &mut rng);
        let eval = |w: &Tensor<f64>, x: &Tensor<f64>| -> f64 {
            dense_forward(w, &b, x.data())
                .unwrap()
                .iter()
                .zip(gy.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (gx, gw) = dense_backward(&w, x.data(), gy.data(), true).unwrap();
        let gx = Tensor::new(vec![6], gx.unwrap()).unwrap();
        check_fd(&w, &gw, |ww| eval(ww, &x));
        check_fd(&x, &gx, |xx| eval(&w, xx));
    }

    #[test]
    fn relu_and_its_derivative() {
        let a = Tensor::vector(&[-1.0f64, 0.0, 2.0]);
        assert_eq!(relu(&a).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_grad(&a).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::vector(&[1.0f64, -2.0, 3.0]);
        let b = Tensor::vector(&[0.5, 1.0, 0.0]);
        assert_eq!(elementwise(&a, &b, BinaryOp::Mul).unwrap().data(), &[0.5, -2.0, 0.0]);
        assert_eq!(elementwise(&a, &b, BinaryOp::Add).unwrap().data(), &[1.5, -1.0, 3.0]);
        let c = Tensor::vector(&[1.0, 2.0]);
        assert!(elementwise(&a, &c, BinaryOp::Mul).is_err());
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn tnt_header_layout() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_tnt(&t);
        assert!(bytes.starts_with(b"TNT1\n2 2 3\n"));
        assert_eq!(bytes.len(), 11 + 24);
        assert_eq!(&bytes[11..15], &1.0f32.to_le_bytes());
        assert!(decode_tnt(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tnt(b"TNT2\n1 1\n\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn conv_matches_naive_oracle(
            c in 1usize..=3, o in 1usize..=3, h in 3usize..=9, w in 3usize..=9,
            k in 1usize..=3, s in 1usize..=3, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random(&[c, h, w], &mut rng);
            let kern = random(&[o, c, k, k], &mut rng);
            let b = random(&[o], &mut rng);
            let got = conv2d_forward(&input, &kern, &b, s).unwrap();
            let want = naive_conv(&input, &kern, &b, s);
            prop_assert_eq!(got.shape(), want.shape());
            for (x, y) in got.data().iter().zip(want.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn tnt_roundtrip_is_bit_exact(dims in proptest::collection::vec(1usize..5, 1..4),
                                      seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f32>::from_fn(&dims, |_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff));
            let back = decode_tnt(&encode_tnt(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
