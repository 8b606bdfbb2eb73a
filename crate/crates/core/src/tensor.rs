//! Dense row-major `f64` tensors and the numeric kernels the graph evaluates.
//!
//! Every kernel here is a pure function of its inputs. Matrix products go
//! through `matrixmultiply::dgemm` with explicit strides, so transposed
//! operands never need to be materialized.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!("shape {shape:?} holds {n} values but {} were given", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!("expected a scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(format!("expected NCHW, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::from_parts(shape, self.data[start * row..end * row].to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entrywise difference; `inf` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn check_same(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("{what}: shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// Strided view description for [`gemm`]: (row stride, column stride).
type Strides = (isize, isize);

/// `c = a·b + beta·c` for an `m×k` by `k×n` product over strided slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    fn reach(rows: usize, cols: usize, s: Strides) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        ((rows - 1) as isize * s.0 + (cols - 1) as isize * s.1) as usize + 1
    }
    assert!(reach(m, k, sa) <= a.len(), "gemm: lhs out of bounds");
    assert!(reach(k, n, sb) <= b.len(), "gemm: rhs out of bounds");
    assert!(reach(m, n, sc) <= c.len(), "gemm: output out of bounds");
    assert!(sa.0 >= 0 && sa.1 >= 0 && sb.0 >= 0 && sb.1 >= 0 && sc.0 >= 0 && sc.1 >= 0);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index dgemm touches within the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul: {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, (k as isize, 1), &b.data, (n as isize, 1), 0.0, &mut out, (n as isize, 1));
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `g[m×n] · bᵀ` where `b` is `k×n`: the gradient of a matmul w.r.t. its lhs.
pub(crate) fn matmul_nt(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = g.dims2()?;
    let (k, n2) = b.dims2()?;
    if n != n2 {
        return Err(Error::dim("matmul_nt: inner extents differ"));
    }
    let mut out = vec![0.0; m * k];
    gemm(m, n, k, &g.data, (n as isize, 1), &b.data, (1, n as isize), 0.0, &mut out, (k as isize, 1));
    Ok(Tensor::from_parts(vec![m, k], out))
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`: the gradient w.r.t. the rhs.
pub(crate) fn matmul_tn(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (m2, n) = g.dims2()?;
    if m != m2 {
        return Err(Error::dim("matmul_tn: outer extents differ"));
    }
    let mut out = vec![0.0; k * n];
    gemm(k, m, n, &a.data, (1, k as isize), &g.data, (n as isize, 1), 0.0, &mut out, (n as isize, 1));
    Ok(Tensor::from_parts(vec![k, n], out))
}

/// Adds `bias[n]` to every row of `x[m×n]`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    if bias.shape() != [n] {
        return Err(Error::dim(format!("bias {:?} for {} columns", bias.shape(), n)));
    }
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Convolution geometry shared by forward and backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub pad: usize,
    pub stride: usize,
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor, geo: Conv2dGeometry) -> Result<ConvDims> {
    let (n, c, h, wd) = x.dims4()?;
    let (f, c2, kh, kw) = w.dims4()?;
    if c != c2 {
        return Err(Error::dim(format!("conv2d: input has {c} channels, kernel expects {c2}")));
    }
    if geo.stride == 0 {
        return Err(Error::dim("conv2d: stride must be positive"));
    }
    let (ph, pw) = (h + 2 * geo.pad, wd + 2 * geo.pad);
    if kh > ph || kw > pw {
        return Err(Error::dim(format!("conv2d: kernel {kh}x{kw} larger than padded {ph}x{pw}")));
    }
    if (ph - kh) % geo.stride != 0 || (pw - kw) % geo.stride != 0 {
        return Err(Error::dim("conv2d: output extent is not integral for this stride"));
    }
    Ok(ConvDims { n, c, h, w: wd, f, kh, kw, ho: (ph - kh) / geo.stride + 1, wo: (pw - kw) / geo.stride + 1 })
}

/// Unfolds one image into a `[c·kh·kw, ho·wo]` patch matrix.
fn im2col(img: &[f64], d: &ConvDims, geo: Conv2dGeometry, cols: &mut [f64]) {
    let spatial = d.ho * d.wo;
    for ch in 0..d.c {
        let plane = &img[ch * d.h * d.w..(ch + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (ch * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..d.ho {
                    let y = (oy * geo.stride + i) as isize - geo.pad as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if y < 0 || y >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * d.w..(y as usize + 1) * d.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let x = (ox * geo.stride + j) as isize - geo.pad as isize;
                        *v = if x < 0 || x >= d.w as isize { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(cols: &[f64], d: &ConvDims, geo: Conv2dGeometry, img: &mut [f64]) {
    let spatial = d.ho * d.wo;
    for ch in 0..d.c {
        let plane = &mut img[ch * d.h * d.w..(ch + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (ch * d.kh + i) * d.kw + j;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..d.ho {
                    let y = (oy * geo.stride + i) as isize - geo.pad as isize;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.wo {
                        let x = (ox * geo.stride + j) as isize - geo.pad as isize;
                        if x >= 0 && x < d.w as isize {
                            plane[y as usize * d.w + x as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation of `x[N,C,H,W]` with `w[F,C,kh,kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, geo: Conv2dGeometry) -> Result<Tensor> {
    let d = conv_dims(x, w, geo)?;
    let ckk = d.c * d.kh * d.kw;
    let spatial = d.ho * d.wo;
    let mut cols = vec![0.0; ckk * spatial];
    let mut out = vec![0.0; d.n * d.f * spatial];
    let img_len = d.c * d.h * d.w;
    for (img, y) in x.data.chunks_exact(img_len).zip(out.chunks_exact_mut(d.f * spatial)) {
        im2col(img, &d, geo, &mut cols);
        gemm(
            d.f,
            ckk,
            spatial,
            &w.data,
            (ckk as isize, 1),
            &cols,
            (spatial as isize, 1),
            0.0,
            y,
            (spatial as isize, 1),
        );
    }
    Ok(Tensor::from_parts(vec![d.n, d.f, d.ho, d.wo], out))
}

/// Gradients of [`conv2d`] w.r.t. its input and kernel.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    geo: Conv2dGeometry,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let d = conv_dims(x, w, geo)?;
    let ckk = d.c * d.kh * d.kw;
    let spatial = d.ho * d.wo;
    let img_len = d.c * d.h * d.w;
    let mut cols = vec![0.0; ckk * spatial];
    let mut gx = need_input.then(|| vec![0.0; x.numel()]);
    let mut gw = need_kernel.then(|| vec![0.0; w.numel()]);
    for n in 0..d.n {
        let gy = &grad.data[n * d.f * spatial..(n + 1) * d.f * spatial];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data[n * img_len..(n + 1) * img_len], &d, geo, &mut cols);
            // gw[F, ckk] += gy[F, S] · colsᵀ
            gemm(
                d.f,
                spatial,
                ckk,
                gy,
                (spatial as isize, 1),
                &cols,
                (1, spatial as isize),
                1.0,
                gw,
                (ckk as isize, 1),
            );
        }
        if let Some(gx) = gx.as_mut() {
            // dcols[ckk, S] = wᵀ · gy
            gemm(
                ckk,
                d.f,
                spatial,
                &w.data,
                (1, ckk as isize),
                gy,
                (spatial as isize, 1),
                0.0,
                &mut cols,
                (spatial as isize, 1),
            );
            col2im(&cols, &d, geo, &mut gx[n * img_len..(n + 1) * img_len]);
        }
    }
    Ok((gx.map(|g| Tensor::from_parts(x.shape.clone(), g)), gw.map(|g| Tensor::from_parts(w.shape.clone(), g))))
}

/// Max pooling over `window×window` patches. Returns the pooled tensor and,
/// for every output element, the flat input index it was taken from. Ties go
/// to the lowest flat index.
pub fn maxpool2d(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::dim(format!("maxpool2d: window {window} over {h}x{w}")));
    }
    let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x.data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), argmax))
}

/// Reverses the width axis of an NCHW tensor.
pub fn flip_width(x: &Tensor) -> Result<Tensor> {
    let (_, _, _, w) = x.dims4()?;
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}
