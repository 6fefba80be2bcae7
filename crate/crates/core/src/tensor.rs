//! Dense row-major `f64` tensors and the handful of kernels the networks need.
//!
//! Every operation that produces values checks them for finiteness and
//! returns [`Error::NonFinite`] instead of propagating NaN or infinity.

use crate::error::{Error, Result};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(shape));
        }
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        check_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Applies `f` pointwise; fails if any result is non-finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite("map", &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(op, &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Row-major matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        matmul_impl(self, rhs, false)
    }

    /// `self · rhsᵀ` without materialising the transpose.
    pub fn matmul_transposed(&self, rhs: &Self) -> Result<Self> {
        matmul_impl(self, rhs, true)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0, 0, 0],
            }),
        }
    }
}

fn matmul_impl(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (n, k) = a.dims2("matmul")?;
    let (br, bc) = b.dims2("matmul")?;
    let (bk, m) = if transpose_b { (bc, br) } else { (br, bc) };
    if k != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; n * m];
    if transpose_b {
        for i in 0..n {
            let row = &a.data[i * k..(i + 1) * k];
            for j in 0..m {
                let col = &b.data[j * k..(j + 1) * k];
                out[i * m + j] = row.iter().zip(col).map(|(x, y)| x * y).sum();
            }
        }
    } else {
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b.data[p * m..(p + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    check_finite("matmul", &out)?;
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Geometry of a 2-D cross-correlation, shared by the forward and adjoint kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, in_ch, in_h, in_w], &[out_ch, k_in, kh, kw]) = (input, kernel) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        };
        if k_in != in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let (Some(out_h), Some(out_w)) = (
            conv_output_extent(in_h, kh, stride, padding),
            conv_output_extent(in_w, kw, stride, padding),
        ) else {
            return Err(Error::InvalidArgument(format!(
                "conv2d output extent is not positive for input {input:?}, kernel {kernel:?}, stride {stride}, padding {padding}"
            )));
        };
        Ok(Self {
            batch,
            in_ch,
            out_ch,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    /// Input coordinate hit by output `o` and kernel offset `k`, if inside the unpadded image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// NCHW cross-correlation with zero padding (no kernel flip).
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            for c in 0..g.in_ch {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let w = kernel.data[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                        if w == 0.0 {
                            continue;
                        }
                        for oy in 0..g.out_h {
                            let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                            let in_row = ((n * g.in_ch + c) * g.in_h + iy) * g.in_w;
                            let out_row = ((n * g.out_ch + o) * g.out_h + oy) * g.out_w;
                            for ox in 0..g.out_w {
                                if let Some(ix) = g.source(ox, kx, g.in_w) {
                                    out[out_row + ox] += w * input.data[in_row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    check_finite("conv2d", &out)?;
    Ok(Tensor {
        shape: vec![g.batch, g.out_ch, g.out_h, g.out_w],
        data: out,
    })
}

/// Adjoints of [`conv2d`] with respect to its input and its kernel.
pub fn conv2d_adjoint(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != [g.batch, g.out_ch, g.out_h, g.out_w] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_adjoint",
            lhs: grad_out.shape.clone(),
            rhs: vec![g.batch, g.out_ch, g.out_h, g.out_w],
        });
    }
    let mut gin = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            for c in 0..g.in_ch {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((o * g.in_ch + c) * g.kh + ky) * g.kw + kx;
                        let w = kernel.data[widx];
                        let mut acc = 0.0;
                        for oy in 0..g.out_h {
                            let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                            let in_row = ((n * g.in_ch + c) * g.in_h + iy) * g.in_w;
                            let out_row = ((n * g.out_ch + o) * g.out_h + oy) * g.out_w;
                            for ox in 0..g.out_w {
                                if let Some(ix) = g.source(ox, kx, g.in_w) {
                                    let go = grad_out.data[out_row + ox];
                                    acc += go * input.data[in_row + ix];
                                    gin[in_row + ix] += go * w;
                                }
                            }
                        }
                        gk[widx] += acc;
                    }
                }
            }
        }
    }
    check_finite("conv2d_adjoint", &gin)?;
    check_finite("conv2d_adjoint", &gk)?;
    Ok((
        Tensor {
            shape: input.shape.clone(),
            data: gin,
        },
        Tensor {
            shape: kernel.shape.clone(),
            data: gk,
        },
    ))
}

/// Windowed sum over NCHW spatial dims, scaled by `coefficient` (1/k² gives average pooling).
pub fn pool2d(input: &Tensor, k: usize, stride: usize, coefficient: f64) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("pool2d")?;
    let (Some(oh), Some(ow)) = (conv_output_extent(h, k, stride, 0), conv_output_extent(w, k, stride, 0)) else {
        return Err(Error::InvalidArgument(format!("pool window {k} does not fit {h}x{w}")));
    };
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += input.data[(plane * h + oy * stride + dy) * w + ox * stride + dx];
                    }
                }
                out[(plane * oh + oy) * ow + ox] = acc * coefficient;
            }
        }
    }
    check_finite("pool2d", &out)?;
    Ok(Tensor {
        shape: vec![n, c, oh, ow],
        data: out,
    })
}

pub fn pool2d_adjoint(input_shape: &[usize], grad_out: &Tensor, k: usize, stride: usize, coefficient: f64) -> Result<Tensor> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::InvalidShape(input_shape.to_vec()));
    };
    let (_, _, oh, ow) = grad_out.dims4("pool2d_adjoint")?;
    let mut gin = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = grad_out.data[(plane * oh + oy) * ow + ox] * coefficient;
                for dy in 0..k {
                    for dx in 0..k {
                        gin[(plane * h + oy * stride + dy) * w + ox * stride + dx] += go;
                    }
                }
            }
        }
    }
    check_finite("pool2d_adjoint", &gin)?;
    Ok(Tensor {
        shape: input_shape.to_vec(),
        data: gin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Square,
    Abs,
    Relu,
    /// `1.0` where the input is strictly positive, `0.0` elsewhere (zero counts as closed).
    ReluIndicator,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

pub fn elementwise(kind: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (kind.is_binary(), b) {
        (true, Some(b)) => {
            let f = match kind {
                Elementwise::Add => |x: f64, y: f64| x + y,
                Elementwise::Sub => |x: f64, y: f64| x - y,
                _ => |x: f64, y: f64| x * y,
            };
            a.zip_map(b, "elementwise", f)
        }
        (true, None) => Err(Error::InvalidArgument(format!("{kind:?} needs two operands"))),
        (false, Some(_)) => Err(Error::InvalidArgument(format!("{kind:?} takes one operand"))),
        (false, None) => a.map(match kind {
            Elementwise::Square => |x: f64| x * x,
            Elementwise::Abs => f64::abs,
            Elementwise::Relu => |x: f64| if x > 0.0 { x } else { 0.0 },
            _ => |x: f64| if x > 0.0 { 1.0 } else { 0.0 },
        }),
    }
}

/// Sums along `axes`; an empty list reduces to a single-element tensor.
pub fn reduce_sum(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    if axes.is_empty() {
        return Ok(Tensor::scalar(a.data.iter().sum()));
    }
    let mut reduced = vec![false; rank];
    for &axis in axes {
        if axis >= rank || reduced[axis] {
            return Err(Error::InvalidAxis { axis, rank });
        }
        reduced[axis] = true;
    }
    let mut out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| a.shape[i]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * a.shape[i + 1];
    }
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..rank).rev() {
        if !reduced[i] {
            out_strides[i] = stride;
            stride *= a.shape[i];
        }
    }
    let mut out = vec![0.0; numel(&out_shape)];
    for (flat, &v) in a.data.iter().enumerate() {
        let mut target = 0;
        for i in 0..rank {
            target += (flat / strides[i]) % a.shape[i] * out_strides[i];
        }
        out[target] += v;
    }
    check_finite("reduce_sum", &out)?;
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; the parent advances by one draw.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.random())
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        rand_distr::StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidArgument(format!("normal std must be positive, got {std}")));
        }
        let dist = Normal::new(mean, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let data = (0..numel(shape)).map(|_| dist.sample(&mut self.inner)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn uniform_tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(|_| self.uniform()).collect(),
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn rng_normal(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    rng.normal(shape, mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let m = b.shape()[1];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a.data()[i * k + p] * b.data()[p * m + j];
                }
            }
        }
        out
    }

    fn im2col_conv(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Tensor {
        let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding).unwrap();
        let patch = g.in_ch * g.kh * g.kw;
        let cols = g.out_h * g.out_w;
        let kmat = kernel.reshape(&[g.out_ch, patch]).unwrap();
        let mut out = Vec::new();
        for n in 0..g.batch {
            let mut col = vec![0.0; patch * cols];
            for c in 0..g.in_ch {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let row = (c * g.kh + ky) * g.kw + kx;
                        for oy in 0..g.out_h {
                            for ox in 0..g.out_w {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                    col[row * cols + oy * g.out_w + ox] = input.data()
                                        [((n * g.in_ch + c) * g.in_h + iy as usize) * g.in_w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            let colm = Tensor::new(vec![patch, cols], col).unwrap();
            out.extend(naive_matmul(&kmat, &colm));
        }
        Tensor::new(vec![g.batch, g.out_ch, g.out_h, g.out_w], out).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let v = t(&[2, 1], &[3., 4.]);
        assert_eq!(id.matmul(&v).unwrap().data(), &[3., 4.]);
        let r = t(&[1, 2], &[1., 2.]).matmul(&v).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.]);
        assert!(matches!(v.matmul(&v), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = rng.normal(&[5, 7], 0.0, 1.0).unwrap();
        let b = rng.normal(&[7, 3], 0.0, 1.0).unwrap();
        let fast = a.matmul(&b).unwrap();
        for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
        let bt = b.transpose().unwrap();
        let via_t = a.matmul_transposed(&bt).unwrap();
        for (x, y) in via_t.data().iter().zip(fast.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv2d_fixtures() {
        let ones = Tensor::ones(&[1, 1, 3, 3]);
        let k = t(&[1, 1, 1, 1], &[2.]);
        let out = conv2d(&ones, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));

        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let out = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.]);

        let k3 = Tensor::ones(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k3, 1, 0).is_err());
    }

    #[test]
    fn conv2d_matches_im2col_on_random_shapes() {
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let n = 1 + rng.below(2);
            let c = 1 + rng.below(3);
            let o = 1 + rng.below(3);
            let kh = 1 + rng.below(3);
            let kw = 1 + rng.below(3);
            let stride = 1 + rng.below(2);
            let padding = rng.below(2);
            let h = kh + rng.below(4);
            let w = kw + rng.below(4);
            let x = rng.normal(&[n, c, h, w], 0.0, 1.0).unwrap();
            let k = rng.normal(&[o, c, kh, kw], 0.0, 1.0).unwrap();
            let fast = conv2d(&x, &k, stride, padding).unwrap();
            let reference = im2col_conv(&x, &k, stride, padding);
            assert_eq!(fast.shape(), reference.shape());
            for (a, b) in fast.data().iter().zip(reference.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_adjoint_is_transpose() {
        // <conv(x, k), y> = <x, adj_x(y)> = <k, adj_k(y)>
        let mut rng = Rng::new(5);
        let x = rng.normal(&[2, 2, 5, 4], 0.0, 1.0).unwrap();
        let k = rng.normal(&[3, 2, 3, 2], 0.0, 1.0).unwrap();
        let out = conv2d(&x, &k, 2, 1).unwrap();
        let y = rng.normal(out.shape(), 0.0, 1.0).unwrap();
        let (gx, gk) = conv2d_adjoint(&x, &k, &y, 2, 1).unwrap();
        let lhs: f64 = out.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rx: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        let rk: f64 = k.data().iter().zip(gk.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - rk).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn elementwise_kinds() {
        let a = t(&[2], &[-2., 3.]);
        assert_eq!(elementwise(Elementwise::Square, &a, None).unwrap().data(), &[4., 9.]);
        let z = t(&[3], &[-1., 0., 5.]);
        assert_eq!(elementwise(Elementwise::ReluIndicator, &z, None).unwrap().data(), &[0., 0., 1.]);
        let m = elementwise(Elementwise::Mul, &t(&[2], &[1., 2.]), Some(&t(&[2], &[3., 4.]))).unwrap();
        assert_eq!(m.data(), &[3., 8.]);
        assert!(elementwise(Elementwise::Add, &a, Some(&z)).is_err());
        assert!(elementwise(Elementwise::Add, &a, None).is_err());
    }

    #[test]
    fn relu_equals_input_times_indicator() {
        let mut rng = Rng::new(9);
        let x = rng.normal(&[64], 0.0, 1.0).unwrap();
        let ind = elementwise(Elementwise::ReluIndicator, &x, None).unwrap();
        let relu = elementwise(Elementwise::Relu, &x, None).unwrap();
        let prod = elementwise(Elementwise::Mul, &x, Some(&ind)).unwrap();
        assert!(ind.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for (a, b) in relu.data().iter().zip(prod.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reduce_sum_cases() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(reduce_sum(&a, &[]).unwrap().data(), &[10.]);
        assert_eq!(reduce_sum(&a, &[0, 1]).unwrap().data(), &[10.]);
        assert_eq!(reduce_sum(&a, &[0]).unwrap().data(), &[4., 6.]);
        assert_eq!(reduce_sum(&a, &[1]).unwrap().data(), &[3., 7.]);
        assert_eq!(reduce_sum(&Tensor::zeros(&[3, 3]), &[]).unwrap().data(), &[0.]);
        assert!(matches!(reduce_sum(&a, &[2]), Err(Error::InvalidAxis { .. })));
        assert!(matches!(reduce_sum(&a, &[0, 0]), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn reduce_sum_matches_sequential_accumulation() {
        let mut rng = Rng::new(21);
        let a = rng.normal(&[3, 4, 5], 0.0, 1.0).unwrap();
        let mut seq = 0.0;
        for v in a.data() {
            seq += v;
        }
        let s = reduce_sum(&a, &[]).unwrap().data()[0];
        assert!((s - seq).abs() <= 1e-12 * seq.abs().max(1.0));
        let mid = reduce_sum(&a, &[1]).unwrap();
        assert_eq!(mid.shape(), &[3, 5]);
        for i in 0..3 {
            for k in 0..5 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += a.data()[(i * 4 + j) * 5 + k];
                }
                assert!((mid.data()[i * 5 + k] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rng_normal_determinism_and_moments() {
        let mut r = Rng::new(42);
        let first = rng_normal(&mut r, &[16], 0.0, 1.0).unwrap();
        let second = rng_normal(&mut r, &[16], 0.0, 1.0).unwrap();
        assert_ne!(first, second);
        let again = rng_normal(&mut Rng::new(42), &[16], 0.0, 1.0).unwrap();
        assert_eq!(first, again);

        let big = rng_normal(&mut Rng::new(7), &[100_000], 0.0, 1.0).unwrap();
        let mean = big.sum() / 1e5;
        let var = big.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.02);
        assert!((var.sqrt() - 1.0).abs() < 0.02);

        assert!(rng_normal(&mut r, &[2], 0.0, 0.0).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        let big = t(&[1], &[1e200]);
        assert!(matches!(big.zip_map(&big, "mul", |a, b| a * b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn pool_adjoint_is_transpose() {
        let mut rng = Rng::new(1);
        let x = rng.normal(&[2, 3, 6, 4], 0.0, 1.0).unwrap();
        let out = pool2d(&x, 2, 2, 0.25).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3, 2]);
        let y = rng.normal(out.shape(), 0.0, 1.0).unwrap();
        let g = pool2d_adjoint(x.shape(), &y, 2, 2, 0.25).unwrap();
        let lhs: f64 = out.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
