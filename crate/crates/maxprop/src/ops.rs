//! Pure forward/backward compute kernels over [`Tensor`].
//!
//! The tape records which kernel produced each node and replays the matching
//! backward rule. Kernels never mutate their inputs; convolution re-derives
//! its im2col buffer in the backward pass instead of caching it, trading a
//! little compute for a much smaller live set.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Elementwise binary op. `Max` breaks ties toward the first operand,
/// `Min` toward the second, so `max(a,b) + min(a,b) == a + b` holds exactly
/// (gradients included).
pub fn elementwise<E: Scalar>(kind: BinaryKind, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    a.same_shape(b, "elementwise")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
            BinaryKind::Min => {
                if x < y {
                    x
                } else {
                    y
                }
            }
        })
        .collect();
    Ok(Tensor::new(a.shape().to_vec(), data).expect("same length"))
}

/// Smallest |a - b| over all elements; the distance to the nearest max/min
/// tie, used by gradient checks to reject samples near a kink.
pub fn min_abs_diff<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(f64::INFINITY, f64::min)
}

pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::ZERO { v } else { E::ZERO })
}

/// Gradient passes only where the input was strictly positive.
pub fn relu_backward<E: Scalar>(x: &Tensor<E>, g: &Tensor<E>) -> Tensor<E> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| if v > E::ZERO { gv } else { E::ZERO })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same length")
}

pub fn scale<E: Scalar>(x: &Tensor<E>, factor: E) -> Tensor<E> {
    x.map(|v| v * factor)
}

// ---------------------------------------------------------------------------
// matmul / dense
// ---------------------------------------------------------------------------

fn as_matrix<E: Scalar>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::RankMismatch {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        }),
    }
}

/// Row-major `a(m x k) · b(k x n)`.
pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, ka) = as_matrix(a, "matmul")?;
    let (kb, n) = as_matrix(b, "matmul")?;
    if ka != kb {
        return Err(Error::DimMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    unsafe {
        E::gemm(
            m,
            ka,
            n,
            E::ONE,
            a.data().as_ptr(),
            ka as isize,
            1,
            b.data().as_ptr(),
            n as isize,
            1,
            E::ZERO,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of `matmul`: `da = g·bᵀ`, `db = aᵀ·g`.
pub fn matmul_backward<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    g: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[k, n]);
    unsafe {
        // da = g (m x n) · bᵀ (n x k)
        E::gemm(
            m,
            n,
            k,
            E::ONE,
            g.data().as_ptr(),
            n as isize,
            1,
            b.data().as_ptr(),
            1,
            n as isize,
            E::ZERO,
            da.data_mut().as_mut_ptr(),
            k as isize,
            1,
        );
        // db = aᵀ (k x m) · g (m x n)
        E::gemm(
            k,
            m,
            n,
            E::ONE,
            a.data().as_ptr(),
            1,
            k as isize,
            g.data().as_ptr(),
            n as isize,
            1,
            E::ZERO,
            db.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (da, db)
}

/// Fully connected layer `y = x·wᵀ + bias`, `x: (n, in)`, `w: (out, in)`.
pub fn dense<E: Scalar>(x: &Tensor<E>, w: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, input) = as_matrix(x, "dense")?;
    let (out, win) = as_matrix(w, "dense")?;
    if win != input || bias.shape() != [out] {
        return Err(Error::DimMismatch {
            op: "dense",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(&[n, out]);
    unsafe {
        // x (n x in) · wᵀ (in x out)
        E::gemm(
            n,
            input,
            out,
            E::ONE,
            x.data().as_ptr(),
            input as isize,
            1,
            w.data().as_ptr(),
            1,
            input as isize,
            E::ZERO,
            y.data_mut().as_mut_ptr(),
            out as isize,
            1,
        );
    }
    for row in y.data_mut().chunks_mut(out) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

/// Gradients of `dense`: `dx = g·w`, `dw = gᵀ·x`, `db = column sums of g`.
pub fn dense_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (n, input) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let mut dx = Tensor::zeros(&[n, input]);
    let mut dw = Tensor::zeros(&[out, input]);
    let mut db = Tensor::zeros(&[out]);
    unsafe {
        // dx = g (n x out) · w (out x in)
        E::gemm(
            n,
            out,
            input,
            E::ONE,
            g.data().as_ptr(),
            out as isize,
            1,
            w.data().as_ptr(),
            input as isize,
            1,
            E::ZERO,
            dx.data_mut().as_mut_ptr(),
            input as isize,
            1,
        );
        // dw = gᵀ (out x n) · x (n x in)
        E::gemm(
            out,
            n,
            input,
            E::ONE,
            g.data().as_ptr(),
            1,
            out as isize,
            x.data().as_ptr(),
            input as isize,
            1,
            E::ZERO,
            dw.data_mut().as_mut_ptr(),
            input as isize,
            1,
        );
    }
    for row in g.data().chunks(out) {
        for (acc, &gv) in db.data_mut().iter_mut().zip(row) {
            *acc += gv;
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_dims<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let [batch, in_c, in_h, in_w] = *input.shape() else {
        return Err(Error::RankMismatch {
            op: "conv2d input",
            expected: 4,
            shape: input.shape().to_vec(),
        });
    };
    let [out_c, k_in, k_h, k_w] = *kernel.shape() else {
        return Err(Error::RankMismatch {
            op: "conv2d kernel",
            expected: 4,
            shape: kernel.shape().to_vec(),
        });
    };
    if stride == 0 {
        return Err(Error::ZeroStride);
    }
    if k_in != in_c {
        return Err(Error::DimMismatch {
            op: "conv2d channels",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if k_h > in_h + 2 * pad || k_w > in_w + 2 * pad {
        return Err(Error::KernelTooLarge {
            kernel: kernel.shape().to_vec(),
            input: input.shape().to_vec(),
            pad,
        });
    }
    Ok(ConvDims {
        batch,
        in_c,
        in_h,
        in_w,
        out_c,
        k_h,
        k_w,
        out_h: (in_h + 2 * pad - k_h) / stride + 1,
        out_w: (in_w + 2 * pad - k_w) / stride + 1,
    })
}

/// Lower one sample into a (in_c*k_h*k_w) x (out_h*out_w) patch matrix.
fn im2col<E: Scalar>(sample: &[E], d: &ConvDims, stride: usize, pad: usize, cols: &mut [E]) {
    let (oh, ow) = (d.out_h, d.out_w);
    let span = oh * ow;
    for c in 0..d.in_c {
        let plane = &sample[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ki in 0..d.k_h {
            for kj in 0..d.k_w {
                let row = ((c * d.k_h + ki) * d.k_w + kj) * span;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= d.in_h as isize {
                        dst.fill(E::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.in_w..(iy as usize + 1) * d.in_w];
                    for (ox, out) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *out = if ix < 0 || ix >= d.in_w as isize {
                            E::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto one input sample.
fn col2im<E: Scalar>(cols: &[E], d: &ConvDims, stride: usize, pad: usize, sample: &mut [E]) {
    let (oh, ow) = (d.out_h, d.out_w);
    let span = oh * ow;
    for c in 0..d.in_c {
        let plane = &mut sample[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ki in 0..d.k_h {
            for kj in 0..d.k_w {
                let row = ((c * d.k_h + ki) * d.k_w + kj) * span;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= d.in_h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * d.in_w..(iy as usize + 1) * d.in_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < d.in_w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, NCHW input and OIHW kernel.
/// Samples are lowered and multiplied independently, in parallel; every
/// output element is produced by exactly one task, so results do not depend
/// on the thread count.
pub fn conv2d<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let d = conv_dims(input, kernel, stride, pad)?;
    let k = d.in_c * d.k_h * d.k_w;
    let span = d.out_h * d.out_w;
    let in_sz = d.in_c * d.in_h * d.in_w;
    let out_sz = d.out_c * span;

    let mut out = Tensor::zeros(&[d.batch, d.out_c, d.out_h, d.out_w]);
    let kdata = kernel.data();
    out.data_mut()
        .par_chunks_mut(out_sz)
        .zip(input.data().par_chunks(in_sz))
        .for_each(|(out_s, in_s)| {
            let mut cols = vec![E::ZERO; k * span];
            im2col(in_s, &d, stride, pad, &mut cols);
            unsafe {
                // kernel (out_c x k) · cols (k x span)
                E::gemm(
                    d.out_c,
                    k,
                    span,
                    E::ONE,
                    kdata.as_ptr(),
                    k as isize,
                    1,
                    cols.as_ptr(),
                    span as isize,
                    1,
                    E::ZERO,
                    out_s.as_mut_ptr(),
                    span as isize,
                    1,
                );
            }
        });
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input and kernel.
pub fn conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    g: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> (Tensor<E>, Tensor<E>) {
    let d = conv_dims(input, kernel, stride, pad).expect("shapes checked at forward");
    let k = d.in_c * d.k_h * d.k_w;
    let span = d.out_h * d.out_w;
    let in_sz = d.in_c * d.in_h * d.in_w;
    let out_sz = d.out_c * span;
    let kdata = kernel.data();

    let mut dinput = Tensor::zeros(&[d.batch, d.in_c, d.in_h, d.in_w]);

    // Per-sample kernel gradients, reduced in index order afterwards so the
    // summation order is fixed.
    let per_sample: Vec<Vec<E>> = dinput
        .data_mut()
        .par_chunks_mut(in_sz)
        .zip(input.data().par_chunks(in_sz))
        .zip(g.data().par_chunks(out_sz))
        .map(|((din_s, in_s), g_s)| {
            let mut cols = vec![E::ZERO; k * span];
            im2col(in_s, &d, stride, pad, &mut cols);
            let mut dk = vec![E::ZERO; d.out_c * k];
            let mut dcols = vec![E::ZERO; k * span];
            unsafe {
                // dk = g (out_c x span) · colsᵀ (span x k)
                E::gemm(
                    d.out_c,
                    span,
                    k,
                    E::ONE,
                    g_s.as_ptr(),
                    span as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    span as isize,
                    E::ZERO,
                    dk.as_mut_ptr(),
                    k as isize,
                    1,
                );
                // dcols = kernelᵀ (k x out_c) · g (out_c x span)
                E::gemm(
                    k,
                    d.out_c,
                    span,
                    E::ONE,
                    kdata.as_ptr(),
                    1,
                    k as isize,
                    g_s.as_ptr(),
                    span as isize,
                    1,
                    E::ZERO,
                    dcols.as_mut_ptr(),
                    span as isize,
                    1,
                );
            }
            col2im(&dcols, &d, stride, pad, din_s);
            dk
        })
        .collect();

    let mut dkernel = Tensor::zeros(&[d.out_c, d.in_c, d.k_h, d.k_w]);
    for dk in per_sample {
        for (acc, v) in dkernel.data_mut().iter_mut().zip(dk) {
            *acc += v;
        }
    }
    (dinput, dkernel)
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

fn check_axes(axes: &[usize], rank: usize, op: &'static str, shape: &[usize]) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= rank {
            return Err(Error::InvalidAxis {
                op,
                axis: a,
                shape: shape.to_vec(),
            });
        }
        if axes[..i].contains(&a) {
            return Err(Error::InvalidAxis {
                op,
                axis: a,
                shape: shape.to_vec(),
            });
        }
    }
    Ok(())
}

pub struct ReduceOut<E: Scalar> {
    pub value: Tensor<E>,
    /// For Max: flat input index of the (first) maximum per output cell.
    pub argmax: Option<Vec<usize>>,
    /// For Max: smallest top-1/top-2 gap across output cells (kink distance).
    pub min_gap: f64,
    /// Elements reduced into each output cell.
    pub count: usize,
}

/// Reduce over `axes`, dropping them from the shape. Empty `axes` copies the
/// input. `Max` routes its gradient to the first-encountered maximum.
pub fn reduce<E: Scalar>(kind: ReduceKind, t: &Tensor<E>, axes: &[usize]) -> Result<ReduceOut<E>> {
    check_axes(axes, t.rank(), "reduce", t.shape())?;
    if axes.is_empty() {
        return Ok(ReduceOut {
            value: t.clone(),
            argmax: None,
            min_gap: f64::INFINITY,
            count: 1,
        });
    }
    let shape = t.shape();
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let out_n: usize = out_shape.iter().product::<usize>().max(1);

    // Strides of each input axis within the output tensor (0 for reduced axes).
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        if !axes.contains(&i) {
            out_strides[i] = acc;
            acc *= shape[i];
        }
    }

    let mut out = vec![E::ZERO; out_n];
    let mut argmax = vec![0usize; if kind == ReduceKind::Max { out_n } else { 0 }];
    let mut second = vec![f64::NEG_INFINITY; if kind == ReduceKind::Max { out_n } else { 0 }];
    let mut filled = vec![false; if kind == ReduceKind::Max { out_n } else { 0 }];

    let mut coords = vec![0usize; shape.len()];
    let mut out_idx = 0usize;
    for (flat, &v) in t.data().iter().enumerate() {
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => out[out_idx] += v,
            ReduceKind::Max => {
                if !filled[out_idx] {
                    filled[out_idx] = true;
                    out[out_idx] = v;
                    argmax[out_idx] = flat;
                } else if v > out[out_idx] {
                    second[out_idx] = out[out_idx].to_f64();
                    out[out_idx] = v;
                    argmax[out_idx] = flat;
                } else if v.to_f64() > second[out_idx] {
                    second[out_idx] = v.to_f64();
                }
            }
        }
        // Advance the multi-index and the running output offset.
        for i in (0..shape.len()).rev() {
            coords[i] += 1;
            out_idx += out_strides[i];
            if coords[i] < shape[i] {
                break;
            }
            out_idx -= out_strides[i] * shape[i];
            coords[i] = 0;
        }
    }

    if kind == ReduceKind::Mean {
        let inv = E::from_f64(1.0 / count as f64);
        for v in &mut out {
            *v *= inv;
        }
    }
    let min_gap = if kind == ReduceKind::Max && count > 1 {
        out.iter()
            .zip(&second)
            .map(|(&m, &s)| m.to_f64() - s)
            .fold(f64::INFINITY, f64::min)
    } else {
        f64::INFINITY
    };

    Ok(ReduceOut {
        value: Tensor::new(out_shape, out).expect("constructed consistently"),
        argmax: (kind == ReduceKind::Max).then_some(argmax),
        min_gap,
        count,
    })
}

/// Scatter a reduction gradient back over the input shape.
pub fn reduce_backward<E: Scalar>(
    kind: ReduceKind,
    in_shape: &[usize],
    axes: &[usize],
    g: &Tensor<E>,
    argmax: Option<&[usize]>,
    count: usize,
) -> Tensor<E> {
    if axes.is_empty() {
        return g.clone();
    }
    let mut din = Tensor::zeros(in_shape);
    match kind {
        ReduceKind::Max => {
            for (out_idx, &flat) in argmax.expect("max saves argmax").iter().enumerate() {
                din.data_mut()[flat] += g.data()[out_idx];
            }
        }
        ReduceKind::Sum | ReduceKind::Mean => {
            let inv = if kind == ReduceKind::Mean {
                E::from_f64(1.0 / count as f64)
            } else {
                E::ONE
            };
            let mut out_strides = vec![0usize; in_shape.len()];
            let mut acc = 1usize;
            for i in (0..in_shape.len()).rev() {
                if !axes.contains(&i) {
                    out_strides[i] = acc;
                    acc *= in_shape[i];
                }
            }
            let mut coords = vec![0usize; in_shape.len()];
            let mut out_idx = 0usize;
            for v in din.data_mut().iter_mut() {
                *v = g.data()[out_idx] * inv;
                for i in (0..in_shape.len()).rev() {
                    coords[i] += 1;
                    out_idx += out_strides[i];
                    if coords[i] < in_shape[i] {
                        break;
                    }
                    out_idx -= out_strides[i] * in_shape[i];
                    coords[i] = 0;
                }
            }
        }
    }
    din
}

// ---------------------------------------------------------------------------
// concat / slice along an axis
// ---------------------------------------------------------------------------

pub fn concat<E: Scalar>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = parts.first().ok_or_else(|| {
        Error::InvalidSpec("concat requires at least one input".into())
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::InvalidAxis {
            op: "concat",
            axis,
            shape: first.shape().to_vec(),
        });
    }
    for p in parts {
        if p.rank() != rank
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();

    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    let mut out = vec![E::ZERO; outer * total_axis * inner];
    let row = total_axis * inner;
    let mut offset = 0usize;
    for p in parts {
        let pa = p.shape()[axis];
        let block = pa * inner;
        for o in 0..outer {
            let dst = &mut out[o * row + offset..o * row + offset + block];
            dst.copy_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
        offset += block;
    }
    Ok(Tensor::new(shape, out).expect("constructed consistently"))
}

/// Split a concat gradient back into per-part gradients.
pub fn concat_backward<E: Scalar>(g: &Tensor<E>, part_axis: &[usize], axis: usize) -> Vec<Tensor<E>> {
    let mut parts = Vec::with_capacity(part_axis.len());
    let mut start = 0usize;
    for &len in part_axis {
        parts.push(slice(g, axis, start, len).expect("split within bounds"));
        start += len;
    }
    parts
}

pub fn slice<E: Scalar>(t: &Tensor<E>, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
    if axis >= t.rank() {
        return Err(Error::InvalidAxis {
            op: "slice",
            axis,
            shape: t.shape().to_vec(),
        });
    }
    if len == 0 || start + len > t.shape()[axis] {
        return Err(Error::InvalidSpec(format!(
            "slice [{start}, {}) out of range for axis {axis} of {:?}",
            start + len,
            t.shape()
        )));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let full = t.shape()[axis] * inner;
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    let mut out = vec![E::ZERO; outer * len * inner];
    for o in 0..outer {
        let src = &t.data()[o * full + start * inner..o * full + (start + len) * inner];
        out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    Ok(Tensor::new(shape, out).expect("constructed consistently"))
}

/// Embed a slice gradient into a zero tensor of the sliced shape.
pub fn slice_backward<E: Scalar>(
    g: &Tensor<E>,
    in_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<E> {
    let mut din = Tensor::zeros(in_shape);
    let len = g.shape()[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let full = in_shape[axis] * inner;
    for o in 0..outer {
        let dst = &mut din.data_mut()[o * full + start * inner..o * full + (start + len) * inner];
        dst.copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    din
}

// ---------------------------------------------------------------------------
// batch normalization (NCHW, per channel)
// ---------------------------------------------------------------------------

pub struct BnForward<E: Scalar> {
    pub y: Tensor<E>,
    pub xhat: Tensor<E>,
    pub inv_std: Vec<E>,
    pub mean: Vec<E>,
    /// Biased (population) variance of the batch.
    pub var: Vec<E>,
}

fn bn_shape<E: Scalar>(x: &Tensor<E>, channels: usize) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::RankMismatch {
            op: "batch_norm",
            expected: 4,
            shape: x.shape().to_vec(),
        });
    };
    if c != channels {
        return Err(Error::DimMismatch {
            op: "batch_norm channels",
            lhs: x.shape().to_vec(),
            rhs: vec![channels],
        });
    }
    Ok((n, h, w))
}

/// Normalize by the batch statistics and apply the affine transform.
pub fn bn_train_forward<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<BnForward<E>> {
    let channels = gamma.numel();
    let (n, h, w) = bn_shape(x, channels)?;
    let plane = h * w;
    let m = n * plane;
    let inv_m = E::from_f64(1.0 / m as f64);

    let mut mean = vec![E::ZERO; channels];
    let mut var = vec![E::ZERO; channels];
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * plane;
            let mut acc = E::ZERO;
            for &v in &x.data()[base..base + plane] {
                acc += v;
            }
            mean[c] += acc;
        }
    }
    for v in &mut mean {
        *v *= inv_m;
    }
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * plane;
            let mu = mean[c];
            let mut acc = E::ZERO;
            for &v in &x.data()[base..base + plane] {
                let d = v - mu;
                acc += d * d;
            }
            var[c] += acc;
        }
    }
    for v in &mut var {
        *v *= inv_m;
    }
    let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();

    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * plane;
            let (mu, is, ga, be) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            for i in base..base + plane {
                let xh = (x.data()[i] - mu) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = ga * xh + be;
            }
        }
    }
    Ok(BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    })
}

/// Normalize by fixed (running) statistics.
pub fn bn_eval_forward<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &[E],
    running_var: &[E],
    eps: E,
) -> Result<BnForward<E>> {
    let channels = gamma.numel();
    let (n, h, w) = bn_shape(x, channels)?;
    let plane = h * w;
    let inv_std: Vec<E> = running_var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * plane;
            let (mu, is, ga, be) = (running_mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            for i in base..base + plane {
                let xh = (x.data()[i] - mu) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = ga * xh + be;
            }
        }
    }
    Ok(BnForward {
        y,
        xhat,
        inv_std,
        mean: running_mean.to_vec(),
        var: running_var.to_vec(),
    })
}

/// Backward through train-mode normalization (statistics depend on x).
pub fn bn_train_backward<E: Scalar>(
    g: &Tensor<E>,
    gamma: &Tensor<E>,
    xhat: &Tensor<E>,
    inv_std: &[E],
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let channels = gamma.numel();
    let shape = g.shape();
    let (n, plane) = (shape[0], shape[2] * shape[3]);
    let m = n * plane;
    let inv_m = E::from_f64(1.0 / m as f64);

    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * plane;
            let mut dg = E::ZERO;
            let mut db = E::ZERO;
            for i in base..base + plane {
                dg += g.data()[i] * xhat.data()[i];
                db += g.data()[i];
            }
            dgamma.data_mut()[c] += dg;
            dbeta.data_mut()[c] += db;
        }
    }

    // dx = gamma * inv_std / m * (m*g - sum(g) - xhat * sum(g*xhat))
    let mut dx = Tensor::zeros(shape);
    let m_e = E::from_f64(m as f64);
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * plane;
            let k = gamma.data()[c] * inv_std[c] * inv_m;
            let sg = dbeta.data()[c];
            let sgx = dgamma.data()[c];
            for i in base..base + plane {
                dx.data_mut()[i] = k * (m_e * g.data()[i] - sg - xhat.data()[i] * sgx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward through eval-mode normalization (statistics are constants).
pub fn bn_eval_backward<E: Scalar>(
    g: &Tensor<E>,
    gamma: &Tensor<E>,
    xhat: &Tensor<E>,
    inv_std: &[E],
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let channels = gamma.numel();
    let shape = g.shape();
    let (n, plane) = (shape[0], shape[2] * shape[3]);
    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);
    let mut dx = Tensor::zeros(shape);
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * plane;
            let k = gamma.data()[c] * inv_std[c];
            let mut dg = E::ZERO;
            let mut db = E::ZERO;
            for i in base..base + plane {
                dg += g.data()[i] * xhat.data()[i];
                db += g.data()[i];
                dx.data_mut()[i] = k * g.data()[i];
            }
            dgamma.data_mut()[c] += dg;
            dbeta.data_mut()[c] += db;
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean of -log softmax(logits)[label], stabilized by max subtraction.
/// Returns the scalar loss and the softmax probabilities for the backward.
pub fn softmax_cross_entropy<E: Scalar>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<(E, Tensor<E>)> {
    let (n, classes) = as_matrix(logits, "softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::DimMismatch {
            op: "softmax_cross_entropy labels",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes: classes,
                index: i,
            });
        }
    }
    let mut probs = Tensor::zeros(&[n, classes]);
    let mut total = E::ZERO;
    for (i, row) in logits.data().chunks(classes).enumerate() {
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut sum = E::ZERO;
        let prow = &mut probs.data_mut()[i * classes..(i + 1) * classes];
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - m).exp();
            sum += *p;
        }
        let lse = sum.ln();
        let inv = E::ONE / sum;
        for p in prow.iter_mut() {
            *p *= inv;
        }
        total += lse - (row[labels[i]] - m);
    }
    Ok((total * E::from_f64(1.0 / n as f64), probs))
}

/// dlogits = g * (probs - onehot) / n.
pub fn softmax_cross_entropy_backward<E: Scalar>(
    probs: &Tensor<E>,
    labels: &[usize],
    g: E,
) -> Tensor<E> {
    let (n, classes) = (probs.shape()[0], probs.shape()[1]);
    let scale = g * E::from_f64(1.0 / n as f64);
    let mut d = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        d.data_mut()[i * classes + l] -= E::ONE;
    }
    for v in d.data_mut() {
        *v *= scale;
    }
    d
}

/// Mean absolute error; also reports the distance to the nearest kink
/// (|pred - target| minimum) for gradient checking.
pub fn mae<E: Scalar>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<(E, f64)> {
    pred.same_shape(target, "mae")?;
    let mut total = E::ZERO;
    let mut min_gap = f64::INFINITY;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = (p - t).abs();
        total += d;
        min_gap = min_gap.min(d.to_f64());
    }
    Ok((total * E::from_f64(1.0 / pred.numel() as f64), min_gap))
}

/// dpred = g * sign(pred - target) / n (0 at equality), dtarget = -dpred.
pub fn mae_backward<E: Scalar>(pred: &Tensor<E>, target: &Tensor<E>, g: E) -> (Tensor<E>, Tensor<E>) {
    let scale = g * E::from_f64(1.0 / pred.numel() as f64);
    let mut dp = Tensor::zeros(pred.shape());
    let mut dt = Tensor::zeros(pred.shape());
    for ((&p, &t), (dpv, dtv)) in pred
        .data()
        .iter()
        .zip(target.data())
        .zip(dp.data_mut().iter_mut().zip(dt.data_mut().iter_mut()))
    {
        let s = if p > t {
            scale
        } else if p < t {
            -scale
        } else {
            E::ZERO
        };
        *dpv = s;
        *dtv = -s;
    }
    (dp, dt)
}
