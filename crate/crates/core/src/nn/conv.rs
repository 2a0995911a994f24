//! im2col-based convolution and transposed convolution kernels on NCHW data.

use crate::tensor::gemm;

/// Geometry of one 2-D convolution on a single image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Spatial output size of a convolution, `None` if the kernel does not fit.
pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution.
pub(crate) fn tconv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (size.checked_sub(1)?) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&v| v > 0)
}

pub(crate) fn im2col(src: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * ohw);
    for c in 0..g.channels {
        let plane = &src[c * g.plane()..(c + 1) * g.plane()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_line = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *v = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            src_line[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    let ohw = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.plane()..(c + 1) * g.plane()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let line = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    let dst_line = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst_line[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward over a batch. `weight` is `[out_c, C*kh*kw]`.
pub(crate) fn conv_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    y: &mut [f64],
) {
    let in_len = g.channels * g.plane();
    let ohw = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ohw];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        let yb = &mut y[b * out_c * ohw..(b + 1) * out_c * ohw];
        for (o, chunk) in yb.chunks_mut(ohw).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(out_c, g.col_rows(), ohw, 1.0, weight, false, &cols, false, 1.0, yb);
    }
}

/// Convolution backward. Accumulates into `dw`/`db`; writes `dx` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    out_c: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let in_len = g.channels * g.plane();
    let ohw = g.col_cols();
    let rows = g.col_rows();
    let mut cols = vec![0.0; rows * ohw];
    let mut dcols = vec![0.0; rows * ohw];
    for b in 0..batch {
        let dyb = &dy[b * out_c * ohw..(b + 1) * out_c * ohw];
        for (o, chunk) in dyb.chunks(ohw).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        gemm(out_c, ohw, rows, 1.0, dyb, false, &cols, true, 1.0, dw);
        if let Some(dx) = dx.as_deref_mut() {
            gemm(rows, out_c, ohw, 1.0, weight, true, dyb, false, 0.0, &mut dcols);
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            dxb.fill(0.0);
            col2im(&dcols, g, dxb);
        }
    }
}

/// Transposed convolution forward. `g` describes the *adjoint* convolution
/// mapping the output image (`g.channels` = out channels, `g.height x
/// g.width` = output plane) onto the input grid (`g.out_h x g.out_w`).
/// `weight` is `[in_c, out_c*kh*kw]`.
pub(crate) fn tconv_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: &[f64],
    in_c: usize,
    y: &mut [f64],
) {
    let hw = g.col_cols();
    let out_len = g.channels * g.plane();
    let mut cols = vec![0.0; g.col_rows() * hw];
    for b in 0..batch {
        let xb = &x[b * in_c * hw..(b + 1) * in_c * hw];
        gemm(g.col_rows(), in_c, hw, 1.0, weight, true, xb, false, 0.0, &mut cols);
        let yb = &mut y[b * out_len..(b + 1) * out_len];
        for (o, chunk) in yb.chunks_mut(g.plane()).enumerate() {
            chunk.fill(bias[o]);
        }
        col2im(&cols, g, yb);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn tconv_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    in_c: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let hw = g.col_cols();
    let out_len = g.channels * g.plane();
    let rows = g.col_rows();
    let mut cols = vec![0.0; rows * hw];
    for b in 0..batch {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        for (o, chunk) in dyb.chunks(g.plane()).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        im2col(dyb, g, &mut cols);
        let xb = &x[b * in_c * hw..(b + 1) * in_c * hw];
        gemm(in_c, hw, rows, 1.0, xb, false, &cols, true, 1.0, dw);
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_c * hw..(b + 1) * in_c * hw];
            gemm(in_c, rows, hw, 1.0, weight, false, &cols, false, 0.0, dxb);
        }
    }
}
