//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Inputs are read in their storage type and widened to `f64`; forward
//! outputs are narrowed back to the storage type once, at the end. Backward
//! kernels consume and produce `f64` gradients.

use super::Element;

/// `c (m×n) = op(a) (m×k) · op(b) (k×n) + beta · c`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = T::from_f64(v.to_f64() * beta.to_f64()));
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the three buffers were length-checked against (m, k, n) above and
    // the strides describe exactly those row-major or transposed layouts.
    unsafe {
        T::gemm_strided(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize);
    }
}

pub fn widen<T: Element>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

pub fn narrow<T: Element>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

// ---------------------------------------------------------------- conv2d

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` lies
/// inside `0..w`.
fn valid_span(g: &ConvGeom, kj: usize, w: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let last = (w + g.pad).saturating_sub(kj).div_ceil(g.stride).min(g.w_out);
    (first.min(last), last)
}

/// Unfolds the input into a `(c_in·k·k) × (h_out·w_out)` matrix.
fn im2col<T: Element>(input: &[T], g: &ConvGeom) -> Vec<T> {
    if g.pointwise() {
        return input.to_vec();
    }
    let p = g.pixels();
    let mut cols = vec![T::default(); g.patch() * p];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kj, g.w);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.w_out + lo..oy * g.w_out + hi];
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out.copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (o, v) in out.iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<f64> {
    if g.pointwise() {
        return widen(cols);
    }
    let p = g.pixels();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kj, g.w);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kj - g.pad;
                    let vals = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(vals) {
                        *d += v.to_f64();
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward<T: Element>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col(input, g);
    let p = g.pixels();
    let mut out = vec![T::default(); g.c_out * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[o]);
    }
    gemm(g.c_out, g.patch(), p, weight, false, &cols, false, T::from_f64(1.0), &mut out);
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Gradients of a convolution; the input and weight terms are computed only
/// when requested.
pub fn conv2d_backward<T: Element>(
    input: &[T],
    weight: &[T],
    g: &ConvGeom,
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
) -> ConvGrads {
    let p = g.pixels();
    let go: Vec<T> = narrow(grad_out.to_vec());
    let weight_grad = want_weight.then(|| {
        let cols = im2col(input, g);
        let mut gw = vec![T::default(); g.c_out * g.patch()];
        gemm(g.c_out, p, g.patch(), &go, false, &cols, true, T::default(), &mut gw);
        widen(&gw)
    });
    let input_grad = want_input.then(|| {
        let mut gcols = vec![T::default(); g.patch() * p];
        gemm(g.patch(), g.c_out, p, weight, true, &go, false, T::default(), &mut gcols);
        col2im(&gcols, g)
    });
    let bias = grad_out.chunks(p).map(|r| r.iter().sum()).collect();
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias,
    }
}

// ---------------------------------------------------------------- pooling

/// Edge-truncated mean pooling over the last two axes.
pub fn avg_pool2d_forward<T: Element>(input: &[T], lead: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    if k == 1 {
        return input.to_vec();
    }
    let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
    let mut out = Vec::with_capacity(lead * ho * wo);
    for plane in input.chunks(h * w).take(lead) {
        for oy in 0..ho {
            let ys = oy * k..((oy + 1) * k).min(h);
            for ox in 0..wo {
                let xs = ox * k..((ox + 1) * k).min(w);
                let mut acc = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += plane[y * w + x].to_f64();
                    }
                }
                out.push(T::from_f64(acc / (ys.len() * xs.len()) as f64));
            }
        }
    }
    out
}

pub fn avg_pool2d_backward(grad_out: &[f64], lead: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    if k == 1 {
        return grad_out.to_vec();
    }
    let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
    let mut gi = vec![0.0; lead * h * w];
    for l in 0..lead {
        for oy in 0..ho {
            let ys = oy * k..((oy + 1) * k).min(h);
            for ox in 0..wo {
                let xs = ox * k..((ox + 1) * k).min(w);
                let share = grad_out[(l * ho + oy) * wo + ox] / (ys.len() * xs.len()) as f64;
                for y in ys.clone() {
                    for x in xs.clone() {
                        gi[(l * h + y) * w + x] += share;
                    }
                }
            }
        }
    }
    gi
}

// ---------------------------------------------------------------- softmax

pub fn softmax_forward<T: Element>(input: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(input.len());
    let mut buf = vec![0.0; k];
    for slice in input.chunks(k) {
        let max = slice.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (b, v) in buf.iter_mut().zip(slice) {
            *b = (v.to_f64() - max).exp();
            sum += *b;
        }
        out.extend(buf.iter().map(|b| T::from_f64(b / sum)));
    }
    out
}

pub fn softmax_backward<T: Element>(output: &[T], grad_out: &[f64], k: usize) -> Vec<f64> {
    let mut gi = Vec::with_capacity(output.len());
    for (s, g) in output.chunks(k).zip(grad_out.chunks(k)) {
        let dot: f64 = s.iter().zip(g).map(|(s, g)| s.to_f64() * g).sum();
        gi.extend(s.iter().zip(g).map(|(s, g)| s.to_f64() * (g - dot)));
    }
    gi
}

// ---------------------------------------------------------------- reductions

/// Mean over the middle axis of an `outer × n × inner` layout.
pub fn mean_axis_forward<T: Element>(input: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let acc = &mut out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let row = &input[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.to_f64();
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    narrow(out)
}

pub fn mean_axis_backward(grad_out: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut gi = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let g = &grad_out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let dst = &mut gi[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (d, v) in dst.iter_mut().zip(g) {
                *d = v / n as f64;
            }
        }
    }
    gi
}

pub fn transpose<T: Copy>(input: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(input.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(input[r * cols + c]);
        }
    }
    out
}

// ---------------------------------------------------------------- bilinear sampling

/// Lower lattice index and fractional offset of a clamped coordinate, plus
/// whether the coordinate lies strictly inside the clamp range.
#[inline]
fn cell(x: f64, n: usize) -> (usize, f64, bool) {
    if n == 1 {
        return (0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    let inside = x > 0.0 && x < hi;
    let xc = x.clamp(0.0, hi);
    let x0 = (xc.floor() as usize).min(n - 2);
    (x0, xc - x0 as f64, inside)
}

#[inline]
fn neighbor(x0: usize, n: usize) -> usize {
    if n == 1 {
        0
    } else {
        x0 + 1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

/// `input: B×C×H×W`, `coords: B×Ho×Wo×2` holding `(x, y)`; output `B×C×Ho×Wo`.
pub fn bilinear_forward<T: Element>(input: &[T], coords: &[T], g: &SampleGeom) -> Vec<T> {
    let (hw, q) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![T::from_f64(0.0); g.batch * g.channels * q];
    for b in 0..g.batch {
        for i in 0..q {
            let x = coords[(b * q + i) * 2].to_f64();
            let y = coords[(b * q + i) * 2 + 1].to_f64();
            let (x0, fx, _) = cell(x, g.w);
            let (y0, fy, _) = cell(y, g.h);
            let (x1, y1) = (neighbor(x0, g.w), neighbor(y0, g.h));
            for c in 0..g.channels {
                let plane = &input[(b * g.channels + c) * hw..][..hw];
                let v00 = plane[y0 * g.w + x0].to_f64();
                let v01 = plane[y0 * g.w + x1].to_f64();
                let v10 = plane[y1 * g.w + x0].to_f64();
                let v11 = plane[y1 * g.w + x1].to_f64();
                let top = v00 + fx * (v01 - v00);
                let bottom = v10 + fx * (v11 - v10);
                out[(b * g.channels + c) * q + i] = T::from_f64(top + fy * (bottom - top));
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Element>(
    input: &[T],
    coords: &[T],
    g: &SampleGeom,
    grad_out: &[f64],
    want_coords: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (hw, q) = (g.h * g.w, g.ho * g.wo);
    let mut gi = vec![0.0; input.len()];
    let mut gc = if want_coords { vec![0.0; coords.len()] } else { Vec::new() };
    for b in 0..g.batch {
        for i in 0..q {
            let x = coords[(b * q + i) * 2].to_f64();
            let y = coords[(b * q + i) * 2 + 1].to_f64();
            let (x0, fx, in_x) = cell(x, g.w);
            let (y0, fy, in_y) = cell(y, g.h);
            let (x1, y1) = (neighbor(x0, g.w), neighbor(y0, g.h));
            let (mut dx, mut dy) = (0.0, 0.0);
            for c in 0..g.channels {
                let base = (b * g.channels + c) * hw;
                let go = grad_out[(b * g.channels + c) * q + i];
                if go == 0.0 {
                    continue;
                }
                gi[base + y0 * g.w + x0] += go * (1.0 - fx) * (1.0 - fy);
                gi[base + y0 * g.w + x1] += go * fx * (1.0 - fy);
                gi[base + y1 * g.w + x0] += go * (1.0 - fx) * fy;
                gi[base + y1 * g.w + x1] += go * fx * fy;
                if want_coords {
                    let v00 = input[base + y0 * g.w + x0].to_f64();
                    let v01 = input[base + y0 * g.w + x1].to_f64();
                    let v10 = input[base + y1 * g.w + x0].to_f64();
                    let v11 = input[base + y1 * g.w + x1].to_f64();
                    dx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if want_coords {
                if in_x {
                    gc[(b * q + i) * 2] = dx;
                }
                if in_y {
                    gc[(b * q + i) * 2 + 1] = dy;
                }
            }
        }
    }
    (gi, gc)
}

// ---------------------------------------------------------------- correlation helpers

/// Broadcast-sum aggregation. `c: P×(H·W)`, `cv: P×W`, `ch: P×H` → `P×2×H×W`.
pub fn aggregate_forward<T: Element>(c: &[T], cv: &[T], ch: &[T], p: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = Vec::with_capacity(p * 2 * hw);
    for i in 0..p {
        out.extend_from_slice(&c[i * hw..(i + 1) * hw]);
        for y2 in 0..h {
            let b = ch[i * h + y2].to_f64();
            for x2 in 0..w {
                out.push(T::from_f64(cv[i * w + x2].to_f64() + b));
            }
        }
    }
    out
}

pub fn aggregate_backward(grad_out: &[f64], p: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut gc = Vec::with_capacity(p * hw);
    let mut gv = vec![0.0; p * w];
    let mut gh = vec![0.0; p * h];
    for i in 0..p {
        let block = &grad_out[i * 2 * hw..(i + 1) * 2 * hw];
        gc.extend_from_slice(&block[..hw]);
        for y2 in 0..h {
            for x2 in 0..w {
                let g = block[hw + y2 * w + x2];
                gv[i * w + x2] += g;
                gh[i * h + y2] += g;
            }
        }
    }
    (gc, gv, gh)
}

/// Which displacement components drive a lookup window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowAxes {
    /// `(2r+1)²` window over `(x + u, y + v)`.
    Both,
    /// `2r+1` samples along a row at `x + u`.
    Horizontal,
    /// `2r+1` samples along a row at `y + v` (the volume's last axis indexes height).
    Vertical,
}

/// Sampling coordinates for every source pixel. `flow: 2×H×W` → `(H·W)×S_y×S_x×2`.
pub fn window_coords_forward<T: Element>(
    flow: &[T],
    h: usize,
    w: usize,
    scale: f64,
    radius: usize,
    axes: WindowAxes,
) -> Vec<T> {
    let s = 2 * radius + 1;
    let sy = if axes == WindowAxes::Both { s } else { 1 };
    let hw = h * w;
    let r = radius as f64;
    let mut out = Vec::with_capacity(hw * sy * s * 2);
    for y in 0..h {
        for x in 0..w {
            let u = flow[y * w + x].to_f64();
            let v = flow[hw + y * w + x].to_f64();
            let cx = (x as f64 + u) / scale;
            let cy = (y as f64 + v) / scale;
            for i in 0..sy {
                for j in 0..s {
                    let off = j as f64 - r;
                    let (px, py) = match axes {
                        WindowAxes::Both => (cx + off, cy + i as f64 - r),
                        WindowAxes::Horizontal => (cx + off, 0.0),
                        WindowAxes::Vertical => (cy + off, 0.0),
                    };
                    out.push(T::from_f64(px));
                    out.push(T::from_f64(py));
                }
            }
        }
    }
    out
}

pub fn window_coords_backward(
    grad_out: &[f64],
    h: usize,
    w: usize,
    scale: f64,
    radius: usize,
    axes: WindowAxes,
) -> Vec<f64> {
    let s = 2 * radius + 1;
    let sy = if axes == WindowAxes::Both { s } else { 1 };
    let hw = h * w;
    let per = sy * s * 2;
    let mut gf = vec![0.0; 2 * hw];
    for p in 0..hw {
        let block = &grad_out[p * per..(p + 1) * per];
        let sx: f64 = block.iter().step_by(2).sum();
        let sy_: f64 = block.iter().skip(1).step_by(2).sum();
        match axes {
            WindowAxes::Both => {
                gf[p] = sx / scale;
                gf[hw + p] = sy_ / scale;
            }
            WindowAxes::Horizontal => gf[p] = sx / scale,
            WindowAxes::Vertical => gf[hw + p] = sx / scale,
        }
    }
    gf
}

// ---------------------------------------------------------------- convex upsampling

/// Offsets `(dy, dx)` of the 3×3 neighborhood, in mask-channel order.
pub const NEIGHBORS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[inline]
fn clamp_index(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

fn neighbor_weights<T: Element>(mask: &[T], hw: usize, dd: usize, sub: usize, pix: usize) -> [f64; 9] {
    let mut l = [0.0; 9];
    for (k, lk) in l.iter_mut().enumerate() {
        *lk = mask[(k * dd + sub) * hw + pix].to_f64();
    }
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for lk in l.iter_mut() {
        *lk = (*lk - max).exp();
        sum += *lk;
    }
    l.iter_mut().for_each(|lk| *lk /= sum);
    l
}

/// `flow: 2×H×W`, `mask: (9·d·d)×H×W` → `2×(H·d)×(W·d)`, values scaled by `d`.
pub fn convex_upsample_forward<T: Element>(flow: &[T], mask: &[T], h: usize, w: usize, d: usize) -> Vec<T> {
    let (hw, dd) = (h * w, d * d);
    let (hf, wf) = (h * d, w * d);
    let mut out = vec![T::from_f64(0.0); 2 * hf * wf];
    let scale = d as f64;
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            for i in 0..d {
                for j in 0..d {
                    let wts = neighbor_weights(mask, hw, dd, i * d + j, pix);
                    let (mut u, mut v) = (0.0, 0.0);
                    for (k, &(dy, dx)) in NEIGHBORS.iter().enumerate() {
                        let n = clamp_index(y, dy, h) * w + clamp_index(x, dx, w);
                        u += wts[k] * flow[n].to_f64();
                        v += wts[k] * flow[hw + n].to_f64();
                    }
                    let o = (y * d + i) * wf + x * d + j;
                    out[o] = T::from_f64(scale * u);
                    out[hf * wf + o] = T::from_f64(scale * v);
                }
            }
        }
    }
    out
}

pub fn convex_upsample_backward<T: Element>(
    flow: &[T],
    mask: &[T],
    h: usize,
    w: usize,
    d: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (hw, dd) = (h * w, d * d);
    let (hf, wf) = (h * d, w * d);
    let scale = d as f64;
    let mut gflow = vec![0.0; 2 * hw];
    let mut gmask = vec![0.0; 9 * dd * hw];
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            for i in 0..d {
                for j in 0..d {
                    let sub = i * d + j;
                    let wts = neighbor_weights(mask, hw, dd, sub, pix);
                    let o = (y * d + i) * wf + x * d + j;
                    let (gu, gv) = (grad_out[o] * scale, grad_out[hf * wf + o] * scale);
                    let mut a = [0.0; 9];
                    for (k, &(dy, dx)) in NEIGHBORS.iter().enumerate() {
                        let n = clamp_index(y, dy, h) * w + clamp_index(x, dx, w);
                        gflow[n] += wts[k] * gu;
                        gflow[hw + n] += wts[k] * gv;
                        a[k] = gu * flow[n].to_f64() + gv * flow[hw + n].to_f64();
                    }
                    let mean: f64 = wts.iter().zip(&a).map(|(w, a)| w * a).sum();
                    for k in 0..9 {
                        gmask[(k * dd + sub) * hw + pix] += wts[k] * (a[k] - mean);
                    }
                }
            }
        }
    }
    (gflow, gmask)
}
