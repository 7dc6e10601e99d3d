//! Pure array kernels shared by the tape ops and the frozen-backbone path.
//! Feature maps are `[h, w, c]`; convolution weights are `[kh, kw, cin, cout]`
//! flattened row-major to `[kh*kw*cin, cout]` for the GEMM.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};

pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold `x` into a `[oh*ow, kh*kw*cin]` patch matrix (zero padding).
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (h, w, cin) = x.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::zeros((oh * ow, kh * kw * cin));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col = 0usize;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let src = x.slice(ndarray::s![iy as usize, ix as usize, ..]);
                        cols.slice_mut(ndarray::s![row, col..col + cin]).assign(&src);
                    }
                    col += cin;
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the input grid (adjoint of im2col).
pub fn col2im(
    cols: &ArrayView2<f64>,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut out = Array3::zeros((h, w, cin));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col = 0usize;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let src = cols.slice(ndarray::s![row, col..col + cin]);
                        let mut dst = out.slice_mut(ndarray::s![iy as usize, ix as usize, ..]);
                        dst += &src;
                    }
                    col += cin;
                }
            }
        }
    }
    out
}

/// Forward convolution; returns `[oh, ow, cout]` plus the patch matrix so the
/// backward pass can reuse it.
pub fn conv2d_forward(
    x: &ArrayView3<f64>,
    weight: &ArrayView2<f64>, // [kh*kw*cin, cout]
    bias: &Array1<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (h, w, _) = x.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let cout = weight.dim().1;
    let cols = im2col(x, kh, kw, stride, pad);
    let mut out = cols.dot(weight);
    for mut row in out.rows_mut() {
        row += bias;
    }
    let out3 = out
        .into_shape_with_order((oh, ow, cout))
        .expect("conv output reshape");
    (out3, cols)
}

/// 2x2-style max pool with explicit kernel/stride, used by the frozen
/// backbone path only.
pub fn maxpool2d(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut out = Array3::from_elem((oh, ow, c), f64::NEG_INFINITY);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    for ch in 0..c {
                        let v = x[[iy as usize, ix as usize, ch]];
                        if v > out[[oy, ox, ch]] {
                            out[[oy, ox, ch]] = v;
                        }
                    }
                }
            }
        }
    }
    // Fully padded windows never see data; treat them as zero.
    out.mapv_inplace(|v| if v == f64::NEG_INFINITY { 0.0 } else { v });
    out
}

/// Bilinear upsample of every channel of a `[h, w, c]` map.
pub fn upsample_bilinear3(x: &ArrayView3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (src_h, src_w, c) = x.dim();
    if (src_h, src_w) == (h, w) {
        return x.to_owned();
    }
    let sy = src_h as f64 / h as f64;
    let sx = src_w as f64 / w as f64;
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let ty = fy - y0 as f64;
        for j in 0..w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let top = x[[y0, x0, ch]] * (1.0 - tx) + x[[y0, x1, ch]] * tx;
                let bot = x[[y1, x0, ch]] * (1.0 - tx) + x[[y1, x1, ch]] * tx;
                out[[i, j, ch]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr3, Array3};

    #[test]
    fn conv_identity_1x1() {
        let x = arr3(&[[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]]);
        // 1x1 identity kernel on 2 channels.
        let w = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = ndarray::arr1(&[0.0, 0.0]);
        let (out, _) = conv2d_forward(&x.view(), &w.view(), &b, 1, 1, 1, 0);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_3x3_sum_kernel_counts_neighbors() {
        // All-ones input, single channel, 3x3 all-ones kernel, pad 1: interior
        // cells see 9 neighbors, corners 4.
        let x = Array3::ones((3, 3, 1));
        let w = Array2::ones((9, 1));
        let b = ndarray::arr1(&[0.0]);
        let (out, _) = conv2d_forward(&x.view(), &w.view(), &b, 3, 3, 1, 1);
        assert_eq!(out[[1, 1, 0]], 9.0);
        assert_eq!(out[[0, 0, 0]], 4.0);
        assert_eq!(out[[0, 1, 0]], 6.0);
    }

    #[test]
    fn conv_stride_two_halves_grid() {
        let x = Array3::ones((4, 4, 1));
        let w = Array2::ones((9, 1));
        let b = ndarray::arr1(&[0.0]);
        let (out, _) = conv2d_forward(&x.view(), &w.view(), &b, 3, 3, 2, 1);
        assert_eq!(out.dim(), (2, 2, 1));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random data: the defining
        // property the conv backward pass relies on.
        let mut rng = 0x12345u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x = Array3::from_shape_fn((5, 4, 3), |_| next());
        let cols = im2col(&x.view(), 3, 3, 2, 1);
        let y = Array2::from_shape_fn(cols.dim(), |_| next());
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y.view(), 5, 4, 3, 3, 3, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let mut x = Array3::zeros((4, 4, 1));
        x[[0, 1, 0]] = 5.0;
        x[[3, 3, 0]] = 2.0;
        let out = maxpool2d(&x.view(), 2, 2, 0);
        assert_eq!(out.dim(), (2, 2, 1));
        assert_eq!(out[[0, 0, 0]], 5.0);
        assert_eq!(out[[1, 1, 0]], 2.0);
    }

    use ndarray::Array2;
}
