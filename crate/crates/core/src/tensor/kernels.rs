use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{numel, strides, Tensor};

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `ta` the buffer `a` is stored `k×m`; with `tb`, `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let c_row = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == T::zero() {
                        continue;
                    }
                    let c_row = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorises.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, order: &[usize]) -> Tensor<T> {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = order.iter().map(|&o| x.shape()[o]).collect();
    let src_strides: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let data = x.data();
    for _ in 0..x.numel() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor {
        shape: out_shape,
        data: out,
    }
}

/// Inverse of an axis permutation.
pub(crate) fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

pub(crate) fn concat<T: Scalar>(
    parts: &[&Tensor<T>],
    axis: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(numel(out_shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data,
    }
}

pub(crate) fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis] * inner;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor {
        shape: out_shape,
        data,
    }
}

/// Adds `src` into the `start..start+len` slab of `dst` along `axis`.
pub(crate) fn narrow_add_into<T: Scalar>(
    dst: &mut Tensor<T>,
    src: &Tensor<T>,
    axis: usize,
    start: usize,
) {
    let shape = dst.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis] * inner;
    let len = src.shape()[axis];
    let d = dst.data_mut();
    for o in 0..outer {
        let base = o * full + start * inner;
        let s = &src.data()[o * len * inner..(o + 1) * len * inner];
        for (dv, &sv) in d[base..base + len * inner].iter_mut().zip(s) {
            *dv += sv;
        }
    }
}

/// Validated dimensions of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = *x_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be rank 4, got {x_shape:?}"),
            ));
        };
        let [out_channels, per_group, kh, kw] = *w_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be rank 4, got {w_shape:?}"),
            ));
        };
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Grouping(format!(
                "{groups} groups do not divide {in_channels} input and {out_channels} output channels"
            )));
        }
        if per_group != in_channels / groups {
            return Err(Error::Grouping(format!(
                "weight expects {per_group} input channels per group, input provides {}",
                in_channels / groups
            )));
        }
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("square kernels only, got {kh}×{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let span_h = in_h + 2 * padding;
        let span_w = in_w + 2 * padding;
        if span_h < kh || span_w < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} larger than padded input {span_h}×{span_w}"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel: kh,
            stride,
            padding,
            groups,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the patch matrix of one group.
    fn patch_rows(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Multiply-adds in one forward pass, bias excluded.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.patch_rows() * self.positions()) as u64
    }

    /// Source coordinate of kernel tap `k` at output coordinate `o`, if inside the input.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Output columns `ow` whose tap `kj` lands inside the input, as a half-open range.
fn valid_range(geo: &ConvGeometry, kj: usize, out: usize, extent: usize) -> (usize, usize) {
    let (s, p) = (geo.stride, geo.padding);
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    let hi = if extent + p > kj {
        ((extent + p - kj - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gathers the patch matrix of group `g` of image `b` into `col` (`patch_rows × positions`).
fn im2col<T: Scalar>(geo: &ConvGeometry, x: &[T], b: usize, g: usize, col: &mut [T]) {
    let k = geo.kernel;
    let plane = geo.in_h * geo.in_w;
    let positions = geo.positions();
    let (ow_n, s, p) = (geo.out_w, geo.stride, geo.padding);
    for c in 0..geo.in_per_group() {
        let channel = g * geo.in_per_group() + c;
        let src = &x[(b * geo.in_channels + channel) * plane..][..plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * positions..(row + 1) * positions];
                let (lo, hi) = valid_range(geo, kj, ow_n, geo.in_w);
                for oh in 0..geo.out_h {
                    let line = &mut dst[oh * ow_n..(oh + 1) * ow_n];
                    let Some(ih) = geo.source(oh, ki, geo.in_h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let src_row = &src[ih * geo.in_w..(ih + 1) * geo.in_w];
                        let first = lo * s + kj - p;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                        } else {
                            for (d, v) in line[lo..hi]
                                .iter_mut()
                                .zip(src_row[first..].iter().step_by(s))
                            {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto the input gradient.
fn col2im<T: Scalar>(geo: &ConvGeometry, col: &[T], b: usize, g: usize, dx: &mut [T]) {
    let k = geo.kernel;
    let plane = geo.in_h * geo.in_w;
    let positions = geo.positions();
    let (ow_n, s, p) = (geo.out_w, geo.stride, geo.padding);
    for c in 0..geo.in_per_group() {
        let channel = g * geo.in_per_group() + c;
        let dst = &mut dx[(b * geo.in_channels + channel) * plane..][..plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * positions..(row + 1) * positions];
                let (lo, hi) = valid_range(geo, kj, ow_n, geo.in_w);
                if lo >= hi {
                    continue;
                }
                for oh in 0..geo.out_h {
                    let Some(ih) = geo.source(oh, ki, geo.in_h) else {
                        continue;
                    };
                    let line = &src[oh * ow_n + lo..oh * ow_n + hi];
                    let first = lo * s + kj - p;
                    let dst_row = &mut dst[ih * geo.in_w..(ih + 1) * geo.in_w];
                    for (d, v) in dst_row[first..].iter_mut().step_by(s).zip(line) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Patch-gather convolution: per image and group, `out_g = W_g · im2col(x_g)`.
pub(crate) fn conv2d_forward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let rows = geo.patch_rows();
    let positions = geo.positions();
    let opg = geo.out_per_group();
    let mut out = vec![T::zero(); geo.batch * geo.out_channels * positions];
    let mut col = vec![T::zero(); rows * positions];
    for b in 0..geo.batch {
        for g in 0..geo.groups {
            im2col(geo, x, b, g, &mut col);
            let w_g = &w[g * opg * rows..(g + 1) * opg * rows];
            let o_start = (b * geo.out_channels + g * opg) * positions;
            gemm(
                false,
                false,
                opg,
                rows,
                positions,
                w_g,
                &col,
                &mut out[o_start..o_start + opg * positions],
            );
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                let start = (b * geo.out_channels + o) * positions;
                for v in &mut out[start..start + positions] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Input, weight and bias gradients, each present only when requested.
type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Gradients of the patch-gather convolution: `(dx, dw, dbias)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads<T> {
    let rows = geo.patch_rows();
    let positions = geo.positions();
    let opg = geo.out_per_group();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut col = vec![T::zero(); rows * positions];
    let mut dcol = vec![T::zero(); rows * positions];
    for b in 0..geo.batch {
        for g in 0..geo.groups {
            let o_start = (b * geo.out_channels + g * opg) * positions;
            let dout_g = &dout[o_start..o_start + opg * positions];
            let w_range = g * opg * rows..(g + 1) * opg * rows;
            if let Some(dw) = dw.as_mut() {
                im2col(geo, x, b, g, &mut col);
                gemm(
                    false,
                    true,
                    opg,
                    positions,
                    rows,
                    dout_g,
                    &col,
                    &mut dw[w_range.clone()],
                );
            }
            if let Some(dx) = dx.as_mut() {
                dcol.iter_mut().for_each(|v| *v = T::zero());
                gemm(
                    true,
                    false,
                    rows,
                    opg,
                    positions,
                    &w[w_range],
                    dout_g,
                    &mut dcol,
                );
                col2im(geo, &dcol, b, g, dx);
            }
        }
    }
    let db = want_db.then(|| {
        let mut db = vec![T::zero(); geo.out_channels];
        for b in 0..geo.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (b * geo.out_channels + o) * positions;
                *acc += dout[start..start + positions].iter().copied().sum::<T>();
            }
        }
        db
    });
    (dx, dw, db)
}

/// Direct seven-loop convolution. Kept independent of the patch-gather path
/// so it can serve as a cross-check.
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, padding, groups)?;
    let (ipg, opg, k) = (geo.in_per_group(), geo.out_per_group(), geo.kernel);
    let mut out = Tensor::zeros(&geo.output_shape());
    for b in 0..geo.batch {
        for o in 0..geo.out_channels {
            let g = o / opg;
            for oh in 0..geo.out_h {
                for ow in 0..geo.out_w {
                    let mut acc = bias.map_or(T::zero(), |bt| bt.data()[o]);
                    for c in 0..ipg {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (oh * stride + ki) as isize - padding as isize;
                                let iw = (ow * stride + kj) as isize - padding as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih as usize >= geo.in_h
                                    || iw as usize >= geo.in_w
                                {
                                    continue;
                                }
                                acc += w.at(&[o, c, ki, kj])
                                    * x.at(&[b, g * ipg + c, ih as usize, iw as usize]);
                            }
                        }
                    }
                    out.data_mut()
                        [((b * geo.out_channels + o) * geo.out_h + oh) * geo.out_w + ow] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Separable bilinear interpolation weights along one axis, half-pixel-centre
/// convention: output sample `d` reads source coordinate `(d + 0.5)·in/out − 0.5`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AxisPlan {
    pub taps: Vec<(usize, usize, f64, f64)>,
}

impl AxisPlan {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let w1 = (src - i0 as f64).clamp(0.0, 1.0);
                (i0, i1, 1.0 - w1, w1)
            })
            .collect();
        AxisPlan { taps }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub rows: AxisPlan,
    pub cols: AxisPlan,
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            in_h,
            in_w,
            rows: AxisPlan::new(in_h, out_h),
            cols: AxisPlan::new(in_w, out_w),
        }
    }

    pub fn out_h(&self) -> usize {
        self.rows.taps.len()
    }

    pub fn out_w(&self) -> usize {
        self.cols.taps.len()
    }

    pub fn forward<T: Scalar>(&self, x: &[T], planes: usize) -> Vec<T> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let src = &x[p * self.in_h * self.in_w..(p + 1) * self.in_h * self.in_w];
            for &(y0, y1, wy0, wy1) in &self.rows.taps {
                let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                for &(x0, x1, wx0, wx1) in &self.cols.taps {
                    let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                    let top = wx0 * src[y0 * self.in_w + x0] + wx1 * src[y0 * self.in_w + x1];
                    let bot = wx0 * src[y1 * self.in_w + x0] + wx1 * src[y1 * self.in_w + x1];
                    out.push(wy0 * top + wy1 * bot);
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, dout: &[T], planes: usize) -> Vec<T> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut dx = vec![T::zero(); planes * self.in_h * self.in_w];
        for p in 0..planes {
            let dst = &mut dx[p * self.in_h * self.in_w..(p + 1) * self.in_h * self.in_w];
            let src = &dout[p * oh * ow..(p + 1) * oh * ow];
            for (r, &(y0, y1, wy0, wy1)) in self.rows.taps.iter().enumerate() {
                for (c, &(x0, x1, wx0, wx1)) in self.cols.taps.iter().enumerate() {
                    let g = src[r * ow + c];
                    dst[y0 * self.in_w + x0] += T::of(wy0 * wx0) * g;
                    dst[y0 * self.in_w + x1] += T::of(wy0 * wx1) * g;
                    dst[y1 * self.in_w + x0] += T::of(wy1 * wx0) * g;
                    dst[y1 * self.in_w + x1] += T::of(wy1 * wx1) * g;
                }
            }
        }
        dx
    }
}
