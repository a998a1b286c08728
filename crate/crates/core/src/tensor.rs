//! Dense row-major tensors and the numeric kernels layers build on.
//!
//! Everything is 64-bit: the gradient-check suite targets 1e-4 relative
//! error against central finite differences, which single precision cannot
//! hit reliably. Kernels are pure functions over immutable inputs and are
//! bit-deterministic in single-threaded mode.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, row-major (last index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("shape {shape:?} wants {expect} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zero tensor. Panics on an invalid shape (programmer error).
    pub fn zeros(shape: &[usize]) -> Self {
        validate_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        validate_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Row-major 2-D constructor, mostly for tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::InvalidShape {
                op: "from_rows",
                detail: "empty row set".into(),
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::InvalidShape {
                    op: "from_rows",
                    detail: format!("row {i} has {} values, expected {cols}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), cols], data)
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
        false // invariant: every extent >= 1
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

    /// Same data, new shape (element count must match).
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                detail: format!(
                    "cannot view {:?} ({} values) as {shape:?} ({expect} values)",
                    self.shape,
                    self.data.len()
                ),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// `self += factor * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_scaled",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Frobenius norm, used in abort diagnostics.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape {
            op: "tensor",
            detail: format!("extents must be >= 1 and rank >= 1, got {shape:?}"),
        });
    }
    Ok(())
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major slices.
/// `ta`/`tb` read the buffer as the transpose without copying.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, out.data_mut());
    Ok(out)
}

/// Output extent of a convolution axis; the division must be exact.
pub(crate) fn conv_extent(input: usize, pad: usize, kernel: usize, stride: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if kernel > span {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!("kernel {kernel} exceeds padded input {span}"),
        });
    }
    if (span - kernel) % stride != 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!(
                "non-integral output extent: ({input} + 2*{pad} - {kernel}) not divisible by stride {stride}"
            ),
        });
    }
    Ok((span - kernel) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }
    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if input.rank() != 4 || kernels.rank() != 4 || input.shape()[1] != kernels.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: "stride must be >= 1".into(),
        });
    }
    let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (f, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
    Ok(ConvGeom {
        channels: c,
        height: h,
        width: w,
        filters: f,
        kh,
        kw,
        stride,
        pad,
        out_h: conv_extent(h, pad, kh, stride)?,
        out_w: conv_extent(w, pad, kw, stride)?,
    })
}

/// Unfold one sample (`C*H*W` slice) into a `patch_len x out_area` matrix.
pub(crate) fn im2col(sample: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let area = g.out_area();
    debug_assert_eq!(cols.len(), g.patch_len() * area);
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..g.channels {
        let plane = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * area;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if g.stride == 1 {
                        // Contiguous span: ix = ox + kx - pad for ox in [lo, hi).
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (g.width + g.pad - kx).min(g.out_w);
                        if lo < hi {
                            let src_lo = lo + kx - g.pad;
                            dst[lo..hi].copy_from_slice(&src_row[src_lo..src_lo + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`]: fold patch gradients back onto the
/// sample gradient.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, sample_grad: &mut [f64]) {
    let area = g.out_area();
    for c in 0..g.channels {
        let plane = &mut sample_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * area;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
///
/// `input` is `N x C x H x W`, `kernels` is `F x C x kh x kw`; the result is
/// `N x F x H' x W'`. Single-threaded; see [`conv2d_threaded`] for the
/// optional batch-parallel path.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_threaded(input, kernels, stride, pad, 1)
}

/// [`conv2d`] with an explicit worker count. With `threads > 1` the batch is
/// split into contiguous chunks processed in parallel; each sample's result
/// is bit-identical to the single-threaded path.
pub fn conv2d_threaded(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
    threads: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, stride, pad)?;
    let n = input.shape()[0];
    let mut out = Tensor::zeros(&[n, g.filters, g.out_h, g.out_w]);
    let in_stride = g.channels * g.height * g.width;
    let out_stride = g.filters * g.out_area();

    let run = |samples: &[f64], dst: &mut [f64]| {
        let mut cols = vec![0.0; g.patch_len() * g.out_area()];
        for (sample, out_s) in samples.chunks(in_stride).zip(dst.chunks_mut(out_stride)) {
            im2col(sample, &g, &mut cols);
            // out[F x L] = kernels[F x KK] * cols[KK x L]
            gemm(
                g.filters,
                g.patch_len(),
                g.out_area(),
                1.0,
                kernels.data(),
                false,
                &cols,
                false,
                0.0,
                out_s,
            );
        }
    };

    if threads <= 1 || n == 1 {
        run(input.data(), out.data_mut());
    } else {
        let chunk = n.div_ceil(threads.min(n));
        let in_chunks: Vec<&[f64]> = input.data().chunks(chunk * in_stride).collect();
        let out_chunks: Vec<&mut [f64]> = out.data_mut().chunks_mut(chunk * out_stride).collect();
        rayon::scope(|s| {
            for (src, dst) in in_chunks.into_iter().zip(out_chunks) {
                s.spawn(move |_| run(src, dst));
            }
        });
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input and kernels.
///
/// Returns `(grad_input, grad_kernels)`. `grad_input` is bit-identical
/// across thread counts; `grad_kernels` may differ by summation order only
/// (within 1e-9 for realistic magnitudes).
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    threads: usize,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geometry(input, kernels, stride, pad)?;
    let n = input.shape()[0];
    let expect = [n, g.filters, g.out_h, g.out_w];
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let in_stride = g.channels * g.height * g.width;
    let out_stride = g.filters * g.out_area();
    let mut grad_input = Tensor::zeros(input.shape());

    let run = |samples: &[f64], gout: &[f64], gin: &mut [f64]| -> Vec<f64> {
        let mut cols = vec![0.0; g.patch_len() * g.out_area()];
        let mut dcols = vec![0.0; g.patch_len() * g.out_area()];
        let mut dkern = vec![0.0; kernels.len()];
        for ((sample, gout_s), gin_s) in samples
            .chunks(in_stride)
            .zip(gout.chunks(out_stride))
            .zip(gin.chunks_mut(in_stride))
        {
            im2col(sample, &g, &mut cols);
            // dK[F x KK] += gout[F x L] * cols^T[L x KK]
            gemm(
                g.filters,
                g.out_area(),
                g.patch_len(),
                1.0,
                gout_s,
                false,
                &cols,
                true,
                1.0,
                &mut dkern,
            );
            // dcols[KK x L] = kernels^T[KK x F] * gout[F x L]
            gemm(
                g.patch_len(),
                g.filters,
                g.out_area(),
                1.0,
                kernels.data(),
                true,
                gout_s,
                false,
                0.0,
                &mut dcols,
            );
            col2im_add(&dcols, &g, gin_s);
        }
        dkern
    };

    let grad_kernels_data = if threads <= 1 || n == 1 {
        run(input.data(), grad_out.data(), grad_input.data_mut())
    } else {
        let chunk = n.div_ceil(threads.min(n));
        let in_chunks: Vec<&[f64]> = input.data().chunks(chunk * in_stride).collect();
        let gout_chunks: Vec<&[f64]> = grad_out.data().chunks(chunk * out_stride).collect();
        let gin_chunks: Vec<&mut [f64]> =
            grad_input.data_mut().chunks_mut(chunk * in_stride).collect();
        let mut partials: Vec<Option<Vec<f64>>> = (0..in_chunks.len()).map(|_| None).collect();
        rayon::scope(|s| {
            for (((src, gos), gis), slot) in in_chunks
                .into_iter()
                .zip(gout_chunks)
                .zip(gin_chunks)
                .zip(partials.iter_mut())
            {
                s.spawn(move |_| *slot = Some(run(src, gos, gis)));
            }
        });
        // Fold partial kernel gradients in chunk order so the result does
        // not depend on thread scheduling.
        let mut acc = vec![0.0; kernels.len()];
        for part in partials.into_iter().flatten() {
            for (a, p) in acc.iter_mut().zip(&part) {
                *a += p;
            }
        }
        acc
    };

    let grad_kernels = Tensor::new(kernels.shape(), grad_kernels_data)?;
    Ok((grad_input, grad_kernels))
}

/// Per-window maximum with argmax indices (flat indices into `input`).
///
/// Windows that would overrun the input are dropped (floor semantics); ties
/// go to the lowest flat index.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 4 {
        return Err(Error::InvalidShape {
            op: "maxpool2d",
            detail: format!("expected rank-4 input, got {:?}", input.shape()),
        });
    }
    if window == 0 || stride == 0 {
        return Err(Error::InvalidShape {
            op: "maxpool2d",
            detail: "window and stride must be >= 1".into(),
        });
    }
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    if window > h || window > w {
        return Err(Error::InvalidShape {
            op: "maxpool2d",
            detail: format!("window {window} larger than input {h}x{w}"),
        });
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let data = input.data();
    let out_data = out.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for dx in 0..window {
                        let v = data[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                let o = nc * oh * ow + oy * ow + ox;
                out_data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Square root of the sum of squares along `axis`. The axis is removed from
/// the shape (a rank-1 input reduces to shape `[1]`). A zero vector reduces
/// to 0; consumers that need positivity must guard.
pub fn reduce_l2_norm(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidShape {
            op: "reduce_l2_norm",
            detail: format!("axis {axis} out of range for shape {:?}", x.shape()),
        });
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let axis_len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = x
        .shape()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &e)| e)
        .collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut out = vec![0.0; outer * inner];
    let data = x.data();
    for o in 0..outer {
        for a in 0..axis_len {
            let base = (o * axis_len + a) * inner;
            for i in 0..inner {
                let v = data[base + i];
                out[o * inner + i] += v * v;
            }
        }
    }
    for v in &mut out {
        *v = v.sqrt();
    }
    Tensor::new(&out_shape, out)
}
