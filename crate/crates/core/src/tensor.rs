//! Dense row-major `f32` tensors and the raw kernels behind the autodiff ops.
//!
//! Storage is reference counted so clones are cheap and tensors can be shared
//! across threads. Reductions accumulate in `f64` and round once at the end.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor({:?}, {:?})", self.dims, self.data)
        } else {
            write!(f, "Tensor({:?}, [{} values])", self.dims, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dims must be non-empty and positive, got {dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "dims {dims:?} hold {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor {
            dims,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels whose output length is correct by construction.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor {
            dims,
            data: Arc::new(data),
        }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let n = dims.iter().product();
        Tensor::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Tensor::full(dims, 1.0)
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn vector(values: &[f32]) -> Self {
        Tensor::from_parts(vec![values.len()], values.to_vec())
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Tensor::from_parts(vec![len], v)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on a tensor with dims {:?}",
            self.dims
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        if dims.iter().product::<usize>() != self.len() || dims.contains(&0) {
            return Err(Error::shape("reshape", &self.dims, dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        Ok(Tensor::from_parts(
            self.dims.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape("dot", &self.dims, &other.dims));
        }
        Ok(dot64(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot64(&self.data, &self.data).sqrt()
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Interprets the tensor as `[C, H, W]`, treating 2-D as one channel and 1-D
    /// as a single row.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.dims.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            [n] => (1, 1, *n),
            d => {
                let w = d[d.len() - 1];
                let h = d[d.len() - 2];
                (d[..d.len() - 2].iter().product(), h, w)
            }
        }
    }
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn expect_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if t.dims.len() != rank {
        return Err(Error::invalid(format!(
            "{op} expects a rank-{rank} tensor, got dims {:?}",
            t.dims
        )));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims.len() != 2 || b.dims.len() != 2 || a.dims[1] != b.dims[0] {
        return Err(Error::shape("matmul", &a.dims, &b.dims));
    }
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    let mut acc = vec![0f64; m * n];
    for i in 0..m {
        let row = &mut acc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv as f64;
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        acc.into_iter().map(|v| v as f32).collect(),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose")?;
    let (m, n) = (a.dims[0], a.dims[1]);
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output positions `o` with `o*stride + kk - pad` inside `0..len`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= len - 1
        let hi_num = len as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_len as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn from_tensors(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        if input.dims.len() != 3 || kernels.dims.len() != 4 || input.dims[0] != kernels.dims[1] {
            return Err(Error::shape("conv2d", &input.dims, &kernels.dims));
        }
        if kernels.dims[2] != kernels.dims[3] {
            return Err(Error::invalid(format!(
                "conv2d kernels must be square, got {:?}",
                kernels.dims
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let g = ConvGeom {
            c_in: input.dims[0],
            c_out: kernels.dims[0],
            in_h: input.dims[1],
            in_w: input.dims[2],
            k: kernels.dims[2],
            stride,
            pad,
        };
        if g.k > g.in_h + 2 * pad || g.k > g.in_w + 2 * pad {
            return Err(Error::shape("conv2d", &input.dims, &kernels.dims));
        }
        Ok(g)
    }
}

/// Cross-correlation of `[C_in, H, W]` input with `[C_out, C_in, k, k]` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::from_tensors(input, kernels, stride, pad)?;
    Ok(conv2d_raw(&g, &input.data, &kernels.data))
}

pub(crate) fn conv2d_raw(g: &ConvGeom, x: &[f32], k: &[f32]) -> Tensor {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut acc = vec![0f64; g.c_out * oh * ow];
    let kk = g.k;
    for co in 0..g.c_out {
        let out = &mut acc[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let xc = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..kk {
                let (oy0, oy1) = g.valid(ky, g.in_h, oh);
                for kx in 0..kk {
                    let w = k[((co * g.c_in + ci) * kk + ky) * kk + kx] as f64;
                    if w == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid(kx, g.in_w, ow);
                    let oy1 = if ox0 < ox1 { oy1 } else { oy0 };
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &xc[iy * g.in_w..(iy + 1) * g.in_w];
                        let orow = &mut out[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let base = ox0 + kx - g.pad;
                            for (o, &xv) in orow[ox0..ox1]
                                .iter_mut()
                                .zip(&xrow[base..base + (ox1 - ox0)])
                            {
                                *o += w * xv as f64;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += w * xrow[ox * g.stride + kx - g.pad] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(
        vec![g.c_out, oh, ow],
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// tensor back onto the `[C_in, in_h, in_w]` input grid.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    kernels: &Tensor,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if kernels.dims.len() != 4 || grad_out.dims.len() != 3 || grad_out.dims[0] != kernels.dims[0] {
        return Err(Error::shape(
            "conv2d_input_grad",
            &grad_out.dims,
            &kernels.dims,
        ));
    }
    let g = ConvGeom {
        c_in: kernels.dims[1],
        c_out: kernels.dims[0],
        in_h,
        in_w,
        k: kernels.dims[2],
        stride,
        pad,
    };
    if g.out_h() != grad_out.dims[1] || g.out_w() != grad_out.dims[2] {
        return Err(Error::shape(
            "conv2d_input_grad",
            &grad_out.dims,
            &[g.c_out, g.out_h(), g.out_w()],
        ));
    }
    Ok(conv2d_input_grad_raw(&g, &grad_out.data, &kernels.data))
}

pub(crate) fn conv2d_input_grad_raw(g: &ConvGeom, gy: &[f32], k: &[f32]) -> Tensor {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.k;
    let mut acc = vec![0f64; g.c_in * g.in_h * g.in_w];
    for ci in 0..g.c_in {
        let xc = &mut acc[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for co in 0..g.c_out {
            let gyc = &gy[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kk {
                let (oy0, oy1) = g.valid(ky, g.in_h, oh);
                for kx in 0..kk {
                    let w = k[((co * g.c_in + ci) * kk + ky) * kk + kx] as f64;
                    if w == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid(kx, g.in_w, ow);
                    let oy1 = if ox0 < ox1 { oy1 } else { oy0 };
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gyc[oy * ow..(oy + 1) * ow];
                        let xrow = &mut xc[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let base = ox0 + kx - g.pad;
                            for (xv, &gv) in xrow[base..base + (ox1 - ox0)]
                                .iter_mut()
                                .zip(&grow[ox0..ox1])
                            {
                                *xv += w * gv as f64;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                xrow[ox * g.stride + kx - g.pad] += w * grow[ox] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(
        vec![g.c_in, g.in_h, g.in_w],
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// Gradient of [`conv2d`] with respect to its kernels: correlates the input
/// with an output-shaped tensor.
pub fn conv2d_kernel_grad(
    input: &Tensor,
    grad_out: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if input.dims.len() != 3 || grad_out.dims.len() != 3 {
        return Err(Error::shape(
            "conv2d_kernel_grad",
            &input.dims,
            &grad_out.dims,
        ));
    }
    let g = ConvGeom {
        c_in: input.dims[0],
        c_out: grad_out.dims[0],
        in_h: input.dims[1],
        in_w: input.dims[2],
        k,
        stride,
        pad,
    };
    if k > g.in_h + 2 * pad
        || k > g.in_w + 2 * pad
        || g.out_h() != grad_out.dims[1]
        || g.out_w() != grad_out.dims[2]
    {
        return Err(Error::shape(
            "conv2d_kernel_grad",
            &input.dims,
            &grad_out.dims,
        ));
    }
    Ok(conv2d_kernel_grad_raw(&g, &input.data, &grad_out.data))
}

pub(crate) fn conv2d_kernel_grad_raw(g: &ConvGeom, x: &[f32], gy: &[f32]) -> Tensor {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.k;
    let mut out = vec![0f32; g.c_out * g.c_in * kk * kk];
    for co in 0..g.c_out {
        let gyc = &gy[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let xc = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..kk {
                let (oy0, oy1) = g.valid(ky, g.in_h, oh);
                for kx in 0..kk {
                    let (ox0, ox1) = g.valid(kx, g.in_w, ow);
                    let mut acc = 0f64;
                    let oy1 = if ox0 < ox1 { oy1 } else { oy0 };
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gyc[oy * ow..(oy + 1) * ow];
                        let xrow = &xc[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let base = ox0 + kx - g.pad;
                            acc += dot64(&grow[ox0..ox1], &xrow[base..base + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                acc += grow[ox] as f64 * xrow[ox * g.stride + kx - g.pad] as f64;
                            }
                        }
                    }
                    out[((co * g.c_in + ci) * kk + ky) * kk + kx] = acc as f32;
                }
            }
        }
    }
    Tensor::from_parts(vec![g.c_out, g.c_in, kk, kk], out)
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 3, "avg_pool2")?;
    let (c, h, w) = (x.dims[0], x.dims[1], x.dims[2]);
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "avg_pool2 needs H, W >= 2, got {:?}",
            x.dims
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                let s = x.data[base] as f64
                    + x.data[base + 1] as f64
                    + x.data[base + w] as f64
                    + x.data[base + w + 1] as f64;
                out[(ch * oh + oy) * ow + ox] = (0.25 * s) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Adjoint of [`avg_pool2`]: spreads each value over its 2×2 block scaled by ¼.
pub fn avg_pool2_adjoint(g: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    expect_rank(g, 3, "avg_pool2_adjoint")?;
    let (c, oh, ow) = (g.dims[0], g.dims[1], g.dims[2]);
    if oh != h / 2 || ow != w / 2 {
        return Err(Error::shape("avg_pool2_adjoint", &g.dims, &[c, h, w]));
    }
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = 0.25 * g.data[(ch * oh + oy) * ow + ox];
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                out[base] = v;
                out[base + 1] = v;
                out[base + w] = v;
                out[base + w + 1] = v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Keeps every second row and column starting at 0: `[C,H,W] -> [C,⌈H/2⌉,⌈W/2⌉]`.
pub fn subsample2(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 3, "subsample2")?;
    let (c, h, w) = (x.dims[0], x.dims[1], x.dims[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(x.data[ch * h * w + 2 * oy * w + 2 * ox]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Adjoint of [`subsample2`]: scatters into a zero `[C,h,w]` grid.
pub fn subsample2_adjoint(g: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    expect_rank(g, 3, "subsample2_adjoint")?;
    let (c, oh, ow) = (g.dims[0], g.dims[1], g.dims[2]);
    if oh != h.div_ceil(2) || ow != w.div_ceil(2) {
        return Err(Error::shape("subsample2_adjoint", &g.dims, &[c, h, w]));
    }
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[ch * h * w + 2 * oy * w + 2 * ox] = g.data[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Sums each channel of `[C,H,W]` into a `[C]` vector.
pub fn sum_spatial(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 3, "sum_spatial")?;
    let hw = x.dims[1] * x.dims[2];
    Ok(Tensor::from_parts(
        vec![x.dims[0]],
        x.data
            .chunks(hw)
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect(),
    ))
}

/// Broadcasts a `[C]` vector across an `h×w` grid.
pub fn expand_channels(v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    expect_rank(v, 1, "expand_channels")?;
    let mut out = Vec::with_capacity(v.len() * h * w);
    for &x in v.data.iter() {
        out.extend(std::iter::repeat_n(x, h * w));
    }
    Ok(Tensor::from_parts(vec![v.len(), h, w], out))
}

/// Zero-pads along the channel axis: `before` empty channels, then `x`, up to `total`.
pub fn pad_channels(x: &Tensor, before: usize, total: usize) -> Result<Tensor> {
    expect_rank(x, 3, "pad_channels")?;
    let (c, h, w) = (x.dims[0], x.dims[1], x.dims[2]);
    if before + c > total {
        return Err(Error::invalid(format!(
            "cannot pad {c} channels at offset {before} into {total}"
        )));
    }
    let mut out = vec![0f32; total * h * w];
    out[before * h * w..(before + c) * h * w].copy_from_slice(&x.data);
    Ok(Tensor::from_parts(vec![total, h, w], out))
}

pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    expect_rank(x, 3, "slice_channels")?;
    let (c, h, w) = (x.dims[0], x.dims[1], x.dims[2]);
    if start + len > c || len == 0 {
        return Err(Error::invalid(format!(
            "channel slice {start}..{} out of 0..{c}",
            start + len
        )));
    }
    Ok(Tensor::from_parts(
        vec![len, h, w],
        x.data[start * h * w..(start + len) * h * w].to_vec(),
    ))
}

/// Forward differences along rows (`axis = 0`, output `[C,H-1,W]`) or columns
/// (`axis = 1`, output `[C,H,W-1]`).
pub fn shift_diff(x: &Tensor, axis: usize) -> Result<Tensor> {
    expect_rank(x, 3, "shift_diff")?;
    let (c, h, w) = (x.dims[0], x.dims[1], x.dims[2]);
    let (oh, ow) = match axis {
        0 if h >= 2 => (h - 1, w),
        1 if w >= 2 => (h, w - 1),
        _ => {
            return Err(Error::invalid(format!(
                "shift_diff axis {axis} invalid for {:?}",
                x.dims
            )))
        }
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let xc = &x.data[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let (ni, nj) = if axis == 0 { (i + 1, j) } else { (i, j + 1) };
                out.push(xc[ni * w + nj] - xc[i * w + j]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Adjoint of [`shift_diff`] for an original `[C,h,w]` grid.
pub fn shift_diff_adjoint(g: &Tensor, axis: usize, h: usize, w: usize) -> Result<Tensor> {
    expect_rank(g, 3, "shift_diff_adjoint")?;
    let c = g.dims[0];
    let (oh, ow) = if axis == 0 { (h - 1, w) } else { (h, w - 1) };
    if g.dims[1] != oh || g.dims[2] != ow {
        return Err(Error::shape("shift_diff_adjoint", &g.dims, &[c, h, w]));
    }
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        let oc = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let v = g.data[(ch * oh + i) * ow + j];
                let (ni, nj) = if axis == 0 { (i + 1, j) } else { (i, j + 1) };
                oc[ni * w + nj] += v;
                oc[i * w + j] -= v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

pub fn softmax(z: &Tensor) -> Tensor {
    let m = z.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = z.data.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Tensor::from_parts(
        z.dims.clone(),
        e.into_iter().map(|v| (v / s) as f32).collect(),
    )
}

pub fn log_softmax(z: &Tensor) -> Tensor {
    let m = z.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = m + z
        .data
        .iter()
        .map(|&v| (v as f64 - m).exp())
        .sum::<f64>()
        .ln();
    z.map(|v| (v as f64 - lse) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_cases() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &id).unwrap(), a);
        let z = matmul(&Tensor::zeros(&[2, 3]), &Tensor::ones(&[3, 4])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
        let err = matmul(&a, &Tensor::ones(&[3, 1])).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn conv_window_sum() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2]);
        assert_eq!(y.data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn conv_identity_and_zero() {
        let x = t(
            &[2, 2, 3],
            &[1., -2., 3., 4., 5., 6., 0.5, 0.25, -1., 2., 2., 9.],
        );
        let mut k = vec![0f32; 4];
        k[0] = 1.0;
        k[3] = 1.0;
        let k = t(&[2, 2, 1, 1], &k);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
        let y = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), 1, 1).unwrap();
        assert_eq!(y, Tensor::zeros(&[3, 2, 3]));
    }

    #[test]
    fn conv_output_geometry() {
        let x = Tensor::ones(&[1, 7, 6]);
        let y = conv2d(&x, &Tensor::ones(&[1, 1, 3, 3]), 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 4, 3]);
        assert!(conv2d(
            &Tensor::ones(&[1, 2, 2]),
            &Tensor::ones(&[1, 1, 3, 3]),
            1,
            0
        )
        .is_err());
        assert!(conv2d(&x, &Tensor::ones(&[1, 1, 3, 3]), 0, 0).is_err());
    }

    #[test]
    fn adjoint_pairs_satisfy_inner_product_identity() {
        // <A x, y> == <x, A^T y> for each linear kernel pair.
        let x = Tensor::new(
            vec![2, 5, 4],
            (0..40).map(|i| ((i * 7 % 11) as f32) - 5.0).collect(),
        )
        .unwrap();
        let k = Tensor::new(
            vec![3, 2, 3, 3],
            (0..54).map(|i| ((i * 5 % 13) as f32) * 0.1 - 0.6).collect(),
        )
        .unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let u = y.map(|v| v * 0.3 + 1.0);
            let lhs = y.dot(&u).unwrap();
            let rhs = x
                .dot(&conv2d_input_grad(&u, &k, 5, 4, stride, pad).unwrap())
                .unwrap();
            assert!(
                (lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0),
                "{stride} {pad}"
            );
            let rhs_k = k
                .dot(&conv2d_kernel_grad(&x, &u, 3, stride, pad).unwrap())
                .unwrap();
            assert!((lhs - rhs_k).abs() < 1e-3 * lhs.abs().max(1.0));
        }
        let p = avg_pool2(&x).unwrap();
        let u = p.map(|v| v + 0.5);
        let lhs = p.dot(&u).unwrap();
        assert!((lhs - x.dot(&avg_pool2_adjoint(&u, 5, 4).unwrap()).unwrap()).abs() < 1e-4);
        let s = subsample2(&x).unwrap();
        assert_eq!(s.dims(), &[2, 3, 2]);
        assert!(
            (s.dot(&s).unwrap() - x.dot(&subsample2_adjoint(&s, 5, 4).unwrap()).unwrap()).abs()
                < 1e-6
        );
        for axis in 0..2 {
            let d = shift_diff(&x, axis).unwrap();
            let lhs = d.dot(&d).unwrap();
            let rhs = x.dot(&shift_diff_adjoint(&d, axis, 5, 4).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_stable() {
        let z = Tensor::vector(&[1000.0, 1000.0]);
        assert_eq!(softmax(&z).data(), &[0.5, 0.5]);
        let l = log_softmax(&Tensor::vector(&[20.0, 0.0]));
        assert!(l.data()[0].abs() < 1e-8);
    }

    #[test]
    fn pad_and_slice_channels_invert() {
        let x = Tensor::ones(&[2, 2, 2]);
        let p = pad_channels(&x, 1, 4).unwrap();
        assert_eq!(p.dims(), &[4, 2, 2]);
        assert_eq!(slice_channels(&p, 1, 2).unwrap(), x);
        assert_eq!(p.sum(), 8.0);
    }
}
