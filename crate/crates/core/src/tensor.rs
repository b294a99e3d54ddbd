//! Dense row-major `f64` tensors and the forward kernels shared by the
//! differentiable graph and the pure (inference-side) code paths.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        match checked_numel(&shape) {
            Some(n) if n == data.len() => Ok(Tensor { shape, data }),
            _ => Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} does not hold {} values", data.len()),
            )),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Row-major reinterpretation; the flat buffer is untouched.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || checked_numel(shape) != Some(self.data.len()) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// In-place `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(&self.data, &other.data, m, k, n, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, c) = self.dims2("softmax_rows")?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    fn split_at_axis(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Sum over one axis, which is removed. Accumulation runs in increasing
    /// index order along the axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.split_at_axis(axis, "sum_axis")?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let base = (o * len + a) * inner;
                for (d, s) in dst.iter_mut().zip(&self.data[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// `sum_axis(axis) / len`, divided (not multiplied by a reciprocal).
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = self.shape.get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.map(|v| v / len))
    }

    /// Inverse of `sum_axis` for gradients: repeat along a new axis.
    pub fn broadcast_axis(&self, axis: usize, len: usize) -> Result<Tensor> {
        if axis > self.shape.len() {
            return Err(Error::invalid("broadcast_axis", format!("axis {axis}")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..len {
                data.extend_from_slice(src);
            }
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, len);
        Ok(Tensor { shape, data })
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (outer, dim, inner) = self.split_at_axis(axis, "narrow")?;
        if len == 0 || start + len > dim {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {:?}", start + len, self.shape),
            ));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let (outer, _, inner) = first.split_at_axis(axis, "concat")?;
        let mut total = 0;
        for p in parts {
            let same_rank = p.shape.len() == first.shape.len();
            let same_other = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
            total += p.shape[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "no inputs"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Slice `index` of the leading axis.
    pub fn index(&self, index: usize) -> Result<Tensor> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::invalid("index", "rank-0 tensor"))?;
        if index >= lead {
            return Err(Error::invalid(
                "index",
                format!("{index} out of range for leading axis {lead}"),
            ));
        }
        let inner = self.numel() / lead;
        let shape = if self.shape.len() == 1 {
            Vec::new()
        } else {
            self.shape[1..].to_vec()
        };
        Ok(Tensor {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Global average pooling of a `[c, h, w]` map to `[c]`.
    pub fn gap(&self) -> Result<Tensor> {
        let [c, h, w] = self.shape[..] else {
            return Err(Error::invalid(
                "gap",
                format!("expected [c, h, w], got {:?}", self.shape),
            ));
        };
        let area = (h * w) as f64;
        let data = self
            .data
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / area)
            .collect();
        Ok(Tensor {
            shape: vec![c],
            data,
        })
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2("add_row")?;
        if bias.shape != [n] {
            return Err(Error::shape("add_row", &self.shape, &bias.shape));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }
}

/// `out += a[m×k] · b[k×n]`; each output cell accumulates in increasing `k`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a zero-padded 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [c, h, wd] = x.shape[..] else {
            return Err(Error::invalid(
                "conv2d",
                format!("input must be [c, h, w], got {:?}", x.shape),
            ));
        };
        let [o, wc, kh, kw] = w.shape[..] else {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be [o, c, kh, kw], got {:?}", w.shape),
            ));
        };
        if wc != c {
            return Err(Error::shape("conv2d", &x.shape, &w.shape));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
            ));
        }
        Ok(ConvGeometry {
            in_channels: c,
            height: h,
            width: wd,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Unfold the input into `[c·kh·kw, out_h·out_w]` columns.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut cols = vec![0.0; self.patch_len() * oh * ow];
        let mut row = 0;
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            dst[oy * ow + ox] =
                                x[(c * self.height + iy as usize) * self.width + ix as usize];
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut x = vec![0.0; self.in_channels * self.height * self.width];
        let mut row = 0;
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            x[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                src[oy * ow + ox];
                        }
                    }
                    row += 1;
                }
            }
        }
        x
    }
}

/// Zero-padded strided convolution: `x[c,h,w] ⊛ w[o,c,kh,kw] + b[o]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x, w, stride, pad)?;
    if b.shape != [g.out_channels] {
        return Err(Error::shape("conv2d", &w.shape, &b.shape));
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = g.im2col(&x.data);
    let mut out = vec![0.0; g.out_channels * oh * ow];
    matmul_kernel(&w.data, &cols, g.out_channels, g.patch_len(), oh * ow, &mut out);
    for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
        let bias = b.data[o];
        for v in chunk {
            *v += bias;
        }
    }
    Ok(Tensor {
        shape: vec![g.out_channels, oh, ow],
        data: out,
    })
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    upstream: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(x, w, stride, pad)?;
    let spatial = g.out_h() * g.out_w();
    let expected = [g.out_channels, g.out_h(), g.out_w()];
    if upstream.shape != expected {
        return Err(Error::shape("conv2d_backward", &upstream.shape, &expected));
    }
    let up = Tensor {
        shape: vec![g.out_channels, spatial],
        data: upstream.data.clone(),
    };
    let cols = Tensor {
        shape: vec![g.patch_len(), spatial],
        data: g.im2col(&x.data),
    };
    let w_mat = Tensor {
        shape: vec![g.out_channels, g.patch_len()],
        data: w.data.clone(),
    };
    let dw = up.matmul(&cols.transpose()?)?.reshape(&w.shape)?;
    let dcols = w_mat.transpose()?.matmul(&up)?;
    let dx = Tensor {
        shape: x.shape.clone(),
        data: g.col2im(&dcols.data),
    };
    let db = Tensor {
        shape: vec![g.out_channels],
        data: up.data.chunks(spatial).map(|c| c.iter().sum()).collect(),
    };
    Ok((dx, dw, db))
}

/// Cut `[c, h, w]` into non-overlapping `p×p` patches, enumerated row-major,
/// each flattened in `(c, dy, dx)` order: `[(h/p)·(w/p), c·p·p]`.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let [c, h, w] = x.shape[..] else {
        return Err(Error::invalid(
            "patchify",
            format!("expected [c, h, w], got {:?}", x.shape),
        ));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("{h}x{w} is not divisible into {patch}x{patch} patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let len = c * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * len);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    data.extend_from_slice(&x.data[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![gh * gw, len],
        data,
    })
}

/// Adjoint of [`patchify`]: scatter patch rows back into `[c, h, w]`.
pub fn unpatchify(patches: &Tensor, shape: &[usize], patch: usize) -> Result<Tensor> {
    let [c, h, w] = shape[..] else {
        return Err(Error::invalid("unpatchify", format!("target {shape:?}")));
    };
    let (gh, gw) = (h / patch, w / patch);
    if patches.shape != [gh * gw, c * patch * patch] {
        return Err(Error::shape("unpatchify", &patches.shape, shape));
    }
    let mut out = vec![0.0; c * h * w];
    let mut src = patches.data.chunks(patch);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    let chunk = src.next().expect("patch rows exhausted");
                    out[row..row + patch].copy_from_slice(chunk);
                }
            }
        }
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(&[i, p]) * b.at(&[p, j]);
            }
            acc
        })
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
        let sel = t(&[2, 2], &[1., 0., 0., 0.]);
        let y = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(sel.matmul(&y).unwrap().data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::zeros(&[1, 3]).softmax_rows().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[1, 2], &[0.0, 3f64.ln()]).softmax_rows().unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let s = t(&[1, 2], &[1000.0, 1000.0]).softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::full(&[1, 3, 3], 2.0);
        assert_eq!(x.gap().unwrap().data(), &[2.0]);
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(x.gap().unwrap().data(), &[2.5]);
    }

    #[test]
    fn identity_1x1_conv_reproduces_input() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.5 - 2.0);
        let w = t(&[2, 2, 1, 1], &[1., 0., 0., 1.]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[2]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_stencil_counts() {
        let x = Tensor::ones(&[1, 4, 4]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn strided_conv_lands_on_grid() {
        let x = Tensor::ones(&[3, 16, 16]);
        let w = Tensor::ones(&[4, 3, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[4]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 8, 8]);
    }

    #[test]
    fn relu_examples() {
        assert_eq!(t(&[2], &[-2.0, 3.0]).relu().data(), &[0.0, 3.0]);
    }

    #[test]
    fn narrow_concat_and_stack() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64);
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
        let s = Tensor::stack(&[&x, &x]).unwrap();
        assert_eq!(s.shape(), &[2, 3, 4]);
        assert_eq!(s.index(1).unwrap(), x);
        assert!(x.narrow(0, 2, 2).is_err());
    }

    #[test]
    fn sum_and_broadcast_axis() {
        let x = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        let s = x.sum_axis(1).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[6., 9., 24., 27.]);
        let b = s.broadcast_axis(1, 3).unwrap();
        assert_eq!(b.shape(), &[2, 3, 2]);
        assert_eq!(b.at(&[1, 2, 0]), 24.0);
    }

    #[test]
    fn patchify_round_trip() {
        let x = Tensor::from_fn(&[3, 8, 8], |i| i as f64);
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.shape(), &[4, 48]);
        // second patch starts at column 4 of row 0, channel 0
        assert_eq!(p.at(&[1, 0]), 4.0);
        assert_eq!(unpatchify(&p, x.shape(), 4).unwrap(), x);
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::zeros(&[2, 3]).reshape(&[5]).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-50.0..50.0));
            let s = x.softmax_rows().unwrap();
            for row in s.data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0 || v == 0.0));
            }
        }

        #[test]
        fn matmul_matches_triple_loop(
            (a, b) in (2usize..=8, 2usize..=8, 2usize..=8)
                .prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
        ) {
            let fast = a.matmul(&b).unwrap();
            prop_assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        }

        #[test]
        fn reshape_preserves_bytes(data in prop::collection::vec(-1e3f64..1e3, 12)) {
            let x = Tensor::new(vec![3, 4], data.clone()).unwrap();
            let r = x.reshape(&[2, 6]).unwrap();
            let bits: Vec<u64> = r.data().iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
        }
    }
}
