//! Raw numeric kernels shared by the forward and backward passes.

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
///
/// `a` is m×k, `b` is k×n, `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    debug_assert!(c.len() >= (m - 1) * rsc + (n - 1) * csc + 1);
    // SAFETY: extents and strides are checked above against the slice lengths;
    // the callers always pass dense row- or column-major views of those slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of one strided, zero-padded square-kernel convolution over a
/// single `channels×height×width` plane stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    /// Returns `None` when the padded input is smaller than the kernel.
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || kernel > height + 2 * padding || kernel > width + 2 * padding {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds `input` (`channels×height×width`) into `cols`
/// (`channels·k·k × out_h·out_w`).
pub(crate) fn im2col(input: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    if g.is_pointwise() {
        cols.copy_from_slice(input);
        return;
    }
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize, g.padding as isize);
    let ow = g.out_width;
    let plane = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let chan = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = oy as isize * s - p + ki as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *d = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back and accumulates into `out`.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, out: &mut [f32]) {
    if g.is_pointwise() {
        for (o, c) in out.iter_mut().zip(cols) {
            *o += c;
        }
        return;
    }
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize, g.padding as isize);
    let ow = g.out_width;
    let plane = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let chan = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// One-dimensional "valid" correlation along the last axis of `rows×len`.
pub(crate) fn correlate_rows(input: &[f32], len: usize, kernel: &[f32], out: &mut [f32]) {
    let olen = len + 1 - kernel.len();
    for (src, dst) in input.chunks(len).zip(out.chunks_mut(olen)) {
        for (x, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (j, kv) in kernel.iter().enumerate() {
                acc += kv * src[x + j];
            }
            *d = acc;
        }
    }
}

/// Bilinear sample positions for crop-and-resize: for each output index along
/// one axis, the two source indices and their weights.
pub(crate) fn bilinear_taps(lo: f32, hi: f32, out: usize, extent: usize) -> Vec<(usize, usize, f32, f32)> {
    let step = (hi - lo) / out as f32;
    let max = (extent - 1) as f32;
    (0..out)
        .map(|i| {
            let pos = (lo + (i as f32 + 0.5) * step - 0.5).clamp(0.0, max);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            let frac = pos - i0 as f32;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}
