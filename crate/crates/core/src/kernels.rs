//! Raw numeric kernels over flat row-major buffers.
//!
//! These carry no gradient bookkeeping; the tape in [`crate::autograd`] calls
//! them for both the forward and the backward pass.

/// Borrowed strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a * b + beta * c`, with `c` a dense row-major `a.rows × b.cols` buffer.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in &mut c[..m * n] {
            *x *= beta;
        }
        return;
    }
    // SAFETY: every view was bounds-checked on construction against its
    // row-major extent, and transposition only swaps strides within it.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const UNIT: ConvGeom = ConvGeom {
        stride: 1,
        padding: 0,
        dilation: 1,
    };

    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (span <= padded && self.stride >= 1).then(|| (padded - span) / self.stride + 1)
    }
}

/// Dimensions of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom == ConvGeom::UNIT
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(d: &ConvDims, image: &[f64], cols: &mut [f64]) {
    let p = d.positions();
    let g = d.geom;
    for c in 0..d.c {
        let plane = &image[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    for ox in 0..d.ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        out[oy * d.ow + ox] = if iy >= 0
                            && (iy as usize) < d.h
                            && ix >= 0
                            && (ix as usize) < d.w
                        {
                            plane[iy as usize * d.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(d: &ConvDims, cols: &[f64], image: &mut [f64]) {
    let p = d.positions();
    let g = d.geom;
    for c in 0..d.c {
        let plane = &mut image[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            plane[iy as usize * d.w + ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    d: &ConvDims,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let p = d.positions();
    let in_plane = d.c * d.h * d.w;
    let mut out = vec![0.0; d.n * d.o * p];
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; d.col_rows() * p]
    };
    let k = MatRef::new(kernel, d.o, d.col_rows());
    for n in 0..d.n {
        let image = &input[n * in_plane..(n + 1) * in_plane];
        let out_n = &mut out[n * d.o * p..(n + 1) * d.o * p];
        if let Some(bias) = bias {
            for (o, &b) in bias.iter().enumerate() {
                out_n[o * p..(o + 1) * p].fill(b);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if d.is_pointwise() {
            gemm(1.0, k, MatRef::new(image, d.c, p), beta, out_n);
        } else {
            im2col(d, image, &mut cols);
            gemm(1.0, k, MatRef::new(&cols, d.col_rows(), p), beta, out_n);
        }
    }
    out
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    d: &ConvDims,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
) -> ConvGrads {
    let p = d.positions();
    let in_plane = d.c * d.h * d.w;
    let rows = d.col_rows();
    let mut g_input = vec![0.0; input.len()];
    let mut g_kernel = vec![0.0; kernel.len()];
    let mut g_bias = vec![0.0; d.o];
    let mut cols = vec![0.0; rows * p];
    let k = MatRef::new(kernel, d.o, rows);
    for n in 0..d.n {
        let image = &input[n * in_plane..(n + 1) * in_plane];
        let go = &grad_out[n * d.o * p..(n + 1) * d.o * p];
        for (o, gb) in g_bias.iter_mut().enumerate() {
            *gb += go[o * p..(o + 1) * p].iter().sum::<f64>();
        }
        let go_m = MatRef::new(go, d.o, p);
        let gi = &mut g_input[n * in_plane..(n + 1) * in_plane];
        if d.is_pointwise() {
            gemm(1.0, go_m, MatRef::new(image, d.c, p).t(), 1.0, &mut g_kernel);
            gemm(1.0, k.t(), go_m, 1.0, gi);
        } else {
            im2col(d, image, &mut cols);
            gemm(1.0, go_m, MatRef::new(&cols, rows, p).t(), 1.0, &mut g_kernel);
            gemm(1.0, k.t(), go_m, 0.0, &mut cols);
            col2im(d, &cols, gi);
        }
    }
    ConvGrads {
        input: g_input,
        kernel: g_kernel,
        bias: g_bias,
    }
}

/// Average pooling without padding; trailing rows and columns that do not
/// fill a whole window are dropped.
pub(crate) fn avg_pool_forward(
    shape: [usize; 4],
    input: &[f64],
    window: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let [n, c, h, w] = shape;
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let norm = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..window {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        acc += src[row + kx];
                    }
                }
                dst[oy * ow + ox] = acc * norm;
            }
        }
    }
    (out, oh, ow)
}

pub(crate) fn avg_pool_backward(
    shape: [usize; 4],
    grad_out: &[f64],
    window: usize,
    stride: usize,
) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let norm = 1.0 / (window * window) as f64;
    let mut g = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut g[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * norm;
                for ky in 0..window {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        dst[row + kx] += v;
                    }
                }
            }
        }
    }
    g
}

/// Max pooling with implicit `-inf` padding. Returns the output, its spatial
/// extents and, per output cell, the flat input index that won.
pub(crate) fn max_pool_forward(
    shape: [usize; 4],
    input: &[f64],
    window: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let [n, c, h, w] = shape;
    let oh = (h + 2 * padding - window) / stride + 1;
    let ow = (w + 2 * padding - window) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..window {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..window {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if input[idx] > best || best_idx == usize::MAX {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg, oh, ow)
}

/// Per-channel batch statistics over the N, H and W axes.
pub(crate) fn channel_moments(shape: [usize; 4], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            s += input[off..off + hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            v += input[off..off + hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2,3],[4,5,6]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 4];
        gemm(1.0, MatRef::new(&a, 2, 3), MatRef::new(&a, 2, 3).t(), 0.0, &mut c);
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
        let mut c = [0.0; 9];
        gemm(1.0, MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, &mut c);
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn out_extent_formula() {
        let g = ConvGeom::new(2, 3, 1);
        assert_eq!(g.out_extent(64, 7), Some(32));
        assert_eq!(ConvGeom::new(1, 4, 4).out_extent(5, 3), Some(5));
        assert_eq!(ConvGeom::UNIT.out_extent(2, 3), None);
    }
}
