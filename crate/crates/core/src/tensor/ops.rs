//! Eager forward versions of the primitives, plus the shape validation the
//! autodiff graph shares with them.

use super::kernels::{self, ConvGeom, SampleGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

pub(crate) fn conv_geom(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    let &[c_in, h, w] = input else {
        return Err(Error::shape(OP, "input C×H×W", input));
    };
    let &[c_out, wc, k, k2] = weight else {
        return Err(Error::shape(OP, "weight C'×C×k×k", weight));
    };
    if wc != c_in {
        return Err(Error::shape(OP, format!("weight with {c_in} input channels"), weight));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape(OP, "square kernel with odd extent", weight));
    }
    if bias != [c_out] {
        return Err(Error::shape(OP, format!("bias of length {c_out}"), bias));
    }
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be positive"));
    }
    let extent = |n: usize| -> Result<usize> {
        let padded = n + 2 * pad;
        if padded < k {
            return Err(Error::invalid(OP, format!("kernel {k} larger than padded extent {padded}")));
        }
        Ok((padded - k) / stride + 1)
    };
    Ok(ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k,
        stride,
        pad,
        h_out: extent(h)?,
        w_out: extent(w)?,
    })
}

pub(crate) fn pool_shape(shape: &[usize], kernel: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
    if kernel == 0 {
        return Err(Error::invalid("avg_pool2d", "kernel must be positive"));
    }
    if shape.len() < 2 {
        return Err(Error::shape("avg_pool2d", "at least two axes", shape));
    }
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let lead = shape[..r - 2].iter().product();
    let mut out = shape.to_vec();
    out[r - 2] = h.div_ceil(kernel);
    out[r - 1] = w.div_ceil(kernel);
    Ok((lead, h, w, out))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((m, k, n)),
        (&[_, k], _) => Err(Error::shape("matmul", format!("rhs {k}×N"), b)),
        _ => Err(Error::shape("matmul", "lhs M×K", a)),
    }
}

pub(crate) fn sample_geom(input: &[usize], coords: &[usize]) -> Result<(SampleGeom, Vec<usize>)> {
    const OP: &str = "bilinear_sample";
    let (batch, channels, h, w) = match *input {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::shape(OP, "input C×H×W or B×C×H×W", input)),
    };
    let (ho, wo) = match (input.len(), coords) {
        (3, &[ho, wo, 2]) => (ho, wo),
        (4, &[b, ho, wo, 2]) if b == batch => (ho, wo),
        _ => return Err(Error::shape(OP, "coords [B×]H'×W'×2 matching the input batch", coords)),
    };
    let out = if input.len() == 3 {
        vec![channels, ho, wo]
    } else {
        vec![batch, channels, ho, wo]
    };
    Ok((
        SampleGeom {
            batch,
            channels,
            h,
            w,
            ho,
            wo,
        },
        out,
    ))
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
    if axis >= shape.len() || shape.len() < 2 {
        return Err(Error::shape("mean_axis", format!("rank > {axis} and at least 2"), shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    let mut out = shape.to_vec();
    out.remove(axis);
    Ok((outer, shape[axis], inner, out))
}

/// Cross-correlation convolution with zero padding.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let out = kernels::conv2d_forward(input.data(), weight.data(), bias.data(), &g);
    Ok(Tensor::from_parts(vec![g.c_out, g.h_out, g.w_out], out))
}

/// Mean pooling of the last two axes with non-overlapping `kernel×kernel`
/// windows; windows are truncated at the far edges.
pub fn avg_pool2d<T: Element>(input: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    let (lead, h, w, out) = pool_shape(input.shape(), kernel)?;
    Ok(Tensor::from_parts(
        out,
        kernels::avg_pool2d_forward(input.data(), lead, h, w, kernel),
    ))
}

pub fn softmax_lastdim<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *input.shape().last().expect("tensor rank >= 1");
    Ok(Tensor::from_parts(
        input.shape().to_vec(),
        kernels::softmax_forward(input.data(), k),
    ))
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::default(); m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, T::default(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Samples `input` at continuous `(x, y)` positions; coordinates outside the
/// grid are clamped to the border.
pub fn bilinear_sample<T: Element>(input: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let (g, out) = sample_geom(input.shape(), coords.shape())?;
    Ok(Tensor::from_parts(
        out,
        kernels::bilinear_forward(input.data(), coords.data(), &g),
    ))
}

pub fn mean_axis<T: Element>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner, out) = axis_split(input.shape(), axis)?;
    Ok(Tensor::from_parts(
        out,
        kernels::mean_axis_forward(input.data(), outer, n, inner),
    ))
}

pub fn transpose2d<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let &[r, c] = input.shape() else {
        return Err(Error::shape("transpose2d", "matrix", input.shape()));
    };
    Ok(Tensor::from_parts(vec![c, r], kernels::transpose(input.data(), r, c)))
}
