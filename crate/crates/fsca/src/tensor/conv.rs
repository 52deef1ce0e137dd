//! im2col-backed 2-d cross-correlation for `[ci,h,w]` inputs.

use super::{mm_nn, mm_nt, mm_tn, GradTensor, Real};
use crate::error::{Error, Result};

pub(crate) struct ConvDims {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    b_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if x_shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "conv2d: input must be [ci,h,w], got {x_shape:?}"
        )));
    }
    if w_shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d: weights must be [co,ci,kh,kw], got {w_shape:?}"
        )));
    }
    let (ci, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (co, wci, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if wci != ci {
        return Err(Error::Dimension(format!(
            "conv2d: weight input channels {wci} do not match input channels {ci}"
        )));
    }
    if b_shape != [co] {
        return Err(Error::Dimension(format!(
            "conv2d: bias shape {b_shape:?} does not match {co} output channels"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Dimension(format!(
            "conv2d: kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::Dimension("conv2d: stride must be positive".into()));
    }
    let span_h = h + 2 * pad;
    let span_w = w + 2 * pad;
    if span_h < kh || span_w < kw {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {span_h}x{span_w}"
        )));
    }
    if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
        return Err(Error::Dimension(format!(
            "conv2d: output extent ({span_h}-{kh})/{stride}+1 is not integral"
        )));
    }
    let ho = (span_h - kh) / stride + 1;
    let wo = (span_w - kw) / stride + 1;
    Ok(ConvDims {
        ci,
        h,
        w,
        co,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Gather input patches into a `[ci*kh*kw, ho*wo]` column matrix,
/// zero-filling out-of-bounds taps.
fn im2col<F: Real>(x: &[F], d: &ConvDims, stride: usize, pad: usize) -> Vec<F> {
    let patch = d.ci * d.kh * d.kw;
    let cols = d.ho * d.wo;
    let mut col = vec![F::zero(); patch * cols];
    for ci in 0..d.ci {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..d.ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src_row = ci * d.h * d.w + iy as usize * d.w;
                    for ox in 0..d.wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        dst[oy * d.wo + ox] = x[src_row + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column-matrix gradient back onto the input grid.
fn col2im<F: Real>(dcol: &[F], d: &ConvDims, stride: usize, pad: usize) -> Vec<F> {
    let cols = d.ho * d.wo;
    let mut dx = vec![F::zero(); d.ci * d.h * d.w];
    for ci in 0..d.ci {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &dcol[row * cols..(row + 1) * cols];
                for oy in 0..d.ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = ci * d.h * d.w + iy as usize * d.w;
                    for ox in 0..d.wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        dx[dst_row + ix as usize] = dx[dst_row + ix as usize] + src[oy * d.wo + ox];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv2d_forward<F: Real>(
    x: &GradTensor<F>,
    w: &GradTensor<F>,
    b: &GradTensor<F>,
    stride: usize,
    pad: usize,
) -> Result<GradTensor<F>> {
    let d = conv_dims(&x.shape(), &w.shape(), &b.shape(), stride, pad)?;
    let col = im2col(&x.data_vec(), &d, stride, pad);
    let patch = d.ci * d.kh * d.kw;
    let cols = d.ho * d.wo;
    let mut out = vec![F::zero(); d.co * cols];
    mm_nn(&w.data_vec(), &col, d.co, patch, cols, &mut out);
    let bias = b.data_vec();
    for co in 0..d.co {
        let bv = bias[co];
        for o in &mut out[co * cols..(co + 1) * cols] {
            *o = *o + bv;
        }
    }
    Ok(GradTensor::new_conv_node(
        vec![d.co, d.ho, d.wo],
        out,
        x,
        w,
        b,
        stride,
        pad,
    ))
}

/// Gradients for input, weights, and bias. The column matrix is rebuilt here
/// instead of being cached on the node.
pub(crate) fn conv2d_backward<F: Real>(
    x: &GradTensor<F>,
    w: &GradTensor<F>,
    g: &[F],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let xs = x.shape();
    let ws = w.shape();
    let d = ConvDims {
        ci: xs[0],
        h: xs[1],
        w: xs[2],
        co: ws[0],
        kh: ws[2],
        kw: ws[3],
        ho: out_shape[1],
        wo: out_shape[2],
    };
    let patch = d.ci * d.kh * d.kw;
    let cols = d.ho * d.wo;

    let mut db = vec![F::zero(); d.co];
    for co in 0..d.co {
        let mut acc = F::zero();
        for &gv in &g[co * cols..(co + 1) * cols] {
            acc = acc + gv;
        }
        db[co] = acc;
    }

    let col = im2col(&x.data_vec(), &d, stride, pad);
    let mut dw = vec![F::zero(); d.co * patch];
    mm_nt(g, &col, d.co, cols, patch, &mut dw);

    let mut dcol = vec![F::zero(); patch * cols];
    mm_tn(&w.data_vec(), g, d.co, patch, cols, &mut dcol);
    let dx = col2im(&dcol, &d, stride, pad);

    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use crate::error::Error;
    use crate::tensor::GradTensor;

    #[test]
    fn one_by_one_identity_kernel() {
        let x = GradTensor::param(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let w = GradTensor::param(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = GradTensor::param(vec![1], vec![0.0]).unwrap();
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 3]);
        assert_eq!(y.data_vec(), x.data_vec());
    }

    #[test]
    fn all_ones_kernel_on_constant_image() {
        let c = 0.7f64;
        let x = GradTensor::param(vec![1, 5, 5], vec![c; 25]).unwrap();
        let w = GradTensor::param(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = GradTensor::param(vec![1], vec![0.0]).unwrap();
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        let d = y.data_vec();
        // center pixel sees the full 3x3 window, a corner only a 2x2 window
        assert!((d[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
        assert!((d[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn non_integral_output_is_dimension_error() {
        // 4x4 input, 3x3 kernel, stride 2, pad 1: (4+2-3)/2 is not integral
        let x = GradTensor::param(vec![1, 4, 4], vec![0.0; 16]).unwrap();
        let w = GradTensor::param(vec![1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let b = GradTensor::param(vec![1], vec![0.0]).unwrap();
        match x.conv2d(&w, &b, 2, 1) {
            Err(Error::Dimension(_)) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let x = GradTensor::param(vec![1, 4, 4], vec![0.0; 16]).unwrap();
        let w = GradTensor::param(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let b = GradTensor::param(vec![1], vec![0.0]).unwrap();
        assert!(matches!(x.conv2d(&w, &b, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn strided_conv_shape() {
        // 5x5 input, 3x3 kernel, stride 2, pad 1: (5+2-3)/2+1 = 3
        let x = GradTensor::param(vec![2, 5, 5], vec![0.25; 50]).unwrap();
        let w = GradTensor::param(vec![3, 2, 3, 3], vec![0.1; 54]).unwrap();
        let b = GradTensor::param(vec![3], vec![0.0; 3]).unwrap();
        let y = x.conv2d(&w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![3, 3, 3]);
    }
}
