// Numerical kernels behind the tape operators. All buffers are row-major and
// all loops run in a fixed order, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output extent of a strided, zero-padded window sweep, or `None` when the
/// window does not fit in the padded input.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[batch, in_ch, height, width] = input else {
            return Err(Error::shape("conv2d", format!("input must be [B,Cin,H,W], got {input:?}")));
        };
        let &[out_ch, k_in, k_h, k_w] = kernel else {
            return Err(Error::shape("conv2d", format!("kernel must be [Cout,Cin,kH,kW], got {kernel:?}")));
        };
        if k_in != in_ch {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: input has {in_ch}, kernel expects {k_in}"),
            ));
        }
        if bias != [out_ch] {
            return Err(Error::shape(
                "conv2d",
                format!("bias: expected [{out_ch}], got {bias:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let out_h = conv_output_extent(height, k_h, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("height: kernel {k_h} exceeds padded input {}", height + 2 * padding),
            )
        })?;
        let out_w = conv_output_extent(width, k_w, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("width: kernel {k_w} exceeds padded input {}", width + 2 * padding),
            )
        })?;
        Ok(Self {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            k_h,
            k_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.padding == 0
    }

    // Input row/col feeding output row/col `o` at kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < extent)
    }

    fn im2col<T: Scalar>(&self, image: &[T], col: &mut [T]) {
        let p_len = self.positions();
        for c in 0..self.in_ch {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.k_h {
                for kj in 0..self.k_w {
                    let row = (c * self.k_h + ki) * self.k_w + kj;
                    let dst = &mut col[row * p_len..(row + 1) * p_len];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ki, self.height) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kj, self.width) {
                                        Some(ix) => plane[iy * self.width + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], image: &mut [T]) {
        let p_len = self.positions();
        for c in 0..self.in_ch {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.k_h {
                for kj in 0..self.k_w {
                    let row = (c * self.k_h + ki) * self.k_w + kj;
                    let src = &col[row * p_len..(row + 1) * p_len];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ki, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kj, self.width) {
                                plane[iy * self.width + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let k_len = g.patch_len();
    let p_len = g.positions();
    let in_len = g.in_ch * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_ch * p_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k_len * p_len] };
    for b in 0..g.batch {
        let image = &input[b * in_len..(b + 1) * in_len];
        let col: &[T] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut col);
            &col
        };
        let out_b = &mut out[b * g.out_ch * p_len..(b + 1) * g.out_ch * p_len];
        for co in 0..g.out_ch {
            let row = &mut out_b[co * p_len..(co + 1) * p_len];
            row.fill(bias[co]);
            let weights = &kernel[co * k_len..(co + 1) * k_len];
            for (k, &wv) in weights.iter().enumerate() {
                let src = &col[k * p_len..(k + 1) * p_len];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o += wv * s;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
) -> ConvGrads<T> {
    let k_len = g.patch_len();
    let p_len = g.positions();
    let in_len = g.in_ch * g.height * g.width;
    let mut d_kernel = vec![T::zero(); g.out_ch * k_len];
    let mut d_bias = vec![T::zero(); g.out_ch];
    let mut d_input = want_input.then(|| vec![T::zero(); g.batch * in_len]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k_len * p_len] };
    let mut d_col = vec![T::zero(); k_len * p_len];
    for b in 0..g.batch {
        let image = &input[b * in_len..(b + 1) * in_len];
        let col: &[T] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut col);
            &col
        };
        let gout = &grad_out[b * g.out_ch * p_len..(b + 1) * g.out_ch * p_len];
        for co in 0..g.out_ch {
            let grow = &gout[co * p_len..(co + 1) * p_len];
            d_bias[co] += grow.iter().copied().sum::<T>();
            let dk = &mut d_kernel[co * k_len..(co + 1) * k_len];
            for (k, acc) in dk.iter_mut().enumerate() {
                let src = &col[k * p_len..(k + 1) * p_len];
                *acc += src.iter().zip(grow).fold(T::zero(), |s, (&a, &b)| s + a * b);
            }
        }
        if let Some(d_input) = d_input.as_mut() {
            d_col.fill(T::zero());
            for co in 0..g.out_ch {
                let grow = &gout[co * p_len..(co + 1) * p_len];
                let weights = &kernel[co * k_len..(co + 1) * k_len];
                for (k, &wv) in weights.iter().enumerate() {
                    let dst = &mut d_col[k * p_len..(k + 1) * p_len];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            }
            let d_image = &mut d_input[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                for (d, &v) in d_image.iter_mut().zip(&d_col) {
                    *d += v;
                }
            } else {
                g.col2im(&d_col, d_image);
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

/// Per-(batch, channel) spatial maximum and the flat spatial index of the
/// first maximal element in row-major order.
pub(crate) fn global_max_pool<T: Scalar>(dims: [usize; 4], input: &[T]) -> (Vec<T>, Vec<usize>) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut out = Vec::with_capacity(b * c);
    let mut arg = Vec::with_capacity(b * c);
    for chunk in input.chunks_exact(plane).take(b * c) {
        let mut best = 0;
        for (i, &v) in chunk.iter().enumerate().skip(1) {
            if v > chunk[best] {
                best = i;
            }
        }
        out.push(chunk[best]);
        arg.push(best);
    }
    (out, arg)
}

/// Mean over the channel axis: `[B,C,H,W] -> [B,1,H,W]`.
pub(crate) fn channel_mean<T: Scalar>(dims: [usize; 4], input: &[T]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let inv = T::one() / T::from_usize_lossy(c);
    let mut out = vec![T::zero(); b * plane];
    for bi in 0..b {
        let dst = &mut out[bi * plane..(bi + 1) * plane];
        for ci in 0..c {
            let src = &input[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

/// Maps every flat index of `full` onto the flat index of a broadcast operand.
pub(crate) fn broadcast_index_map(full: &[usize], small: &[usize]) -> Vec<usize> {
    let rank = full.len();
    let mut small_strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        small_strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let n: usize = full.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&small_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < full[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn check_broadcast(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(Error::shape(
            "broadcast_mul",
            format!("{b:?} does not broadcast onto {a:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn upsample_nearest<T: Scalar>(dims: [usize; 4], input: &[T], factor: usize) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in input.chunks_exact(h * w).take(b * c) {
        for oy in 0..oh {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(
    dims: [usize; 4],
    grad_out: &[T],
    factor: usize,
) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h * factor, w * factor);
    let mut grad = vec![T::zero(); b * c * h * w];
    for (plane, gplane) in grad.chunks_exact_mut(h * w).zip(grad_out.chunks_exact(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                plane[(oy / factor) * w + ox / factor] += gplane[oy * ow + ox];
            }
        }
    }
    grad
}

/// `out[b, m] = bias[m] + sum_n input[b, n] * weight[m, n]`.
pub(crate) fn linear_forward<T: Scalar>(
    batch: usize,
    n_in: usize,
    n_out: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * n_out);
    for row in input.chunks_exact(n_in).take(batch) {
        for m in 0..n_out {
            let wrow = &weight[m * n_in..(m + 1) * n_in];
            out.push(bias[m] + row.iter().zip(wrow).fold(T::zero(), |s, (&a, &b)| s + a * b));
        }
    }
    out
}
