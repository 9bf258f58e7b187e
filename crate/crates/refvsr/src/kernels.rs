//! Low-level numeric kernels shared by the autodiff tape and the plain
//! image-processing entry points.
//!
//! Convolutions are im2col + GEMM. Tensors are channel-last `(H, W, C)` in
//! standard layout; weights are `(kh, kw, c_in, c_out)`.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};
use num_traits::{Float, FromPrimitive};

/// Element type the numeric stack is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub(crate) fn convt_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n - 1) * stride + k - 2 * pad
}

/// Gather k×k patches anchored at a `pos_h × pos_w` grid (stride/pad in the
/// source image) into rows of a matrix. Out-of-bounds taps stay zero.
fn im2col<T: Scalar>(
    x: &ArrayView3<T>,
    k: usize,
    stride: usize,
    pad: usize,
    pos_h: usize,
    pos_w: usize,
) -> Array2<T> {
    let (h, w, c) = x.dim();
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let row_len = k * k * c;
    let mut cols = Array2::<T>::zeros((pos_h * pos_w, row_len));
    let cs = cols.as_slice_mut().unwrap();
    for py in 0..pos_h {
        let iy0 = (py * stride) as isize - pad as isize;
        for px in 0..pos_w {
            let ix0 = (px * stride) as isize - pad as isize;
            let row = (py * pos_w + px) * row_len;
            for ky in 0..k {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src_row = iy as usize * w;
                for kx in 0..k {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (src_row + ix as usize) * c;
                    let dst = row + (ky * k + kx) * c;
                    cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into an `(h, w, c)` image.
fn col2im_add<T: Scalar>(
    cols: &Array2<T>,
    k: usize,
    stride: usize,
    pad: usize,
    pos_h: usize,
    pos_w: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Array3<T> {
    let row_len = k * k * c;
    debug_assert_eq!(cols.dim(), (pos_h * pos_w, row_len));
    let cols_std = cols.as_standard_layout();
    let cs = cols_std.as_slice().unwrap();
    let mut out = Array3::<T>::zeros((h, w, c));
    let os = out.as_slice_mut().unwrap();
    for py in 0..pos_h {
        let iy0 = (py * stride) as isize - pad as isize;
        for px in 0..pos_w {
            let ix0 = (px * stride) as isize - pad as isize;
            let row = (py * pos_w + px) * row_len;
            for ky in 0..k {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let dst_row = iy as usize * w;
                for kx in 0..k {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (dst_row + ix as usize) * c;
                    let src = row + (ky * k + kx) * c;
                    for ch in 0..c {
                        os[dst + ch] = os[dst + ch] + cs[src + ch];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_fwd<T: Scalar>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    b: &ArrayView1<T>,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let (h, wi, cin) = x.dim();
    let (kh, kw, wcin, cout) = w.dim();
    assert_eq!(kh, kw, "square kernels only");
    assert_eq!(wcin, cin, "conv2d: channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wi, kh, stride, pad);
    let cols = im2col(x, kh, stride, pad, oh, ow);
    let wmat = w
        .into_shape_with_order((kh * kh * cin, cout))
        .expect("conv2d: weight layout");
    let mut y = cols.dot(&wmat);
    y += b;
    y.into_shape_with_order((oh, ow, cout)).unwrap()
}

pub(crate) fn conv2d_bwd<T: Scalar>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    dy: &ArrayView3<T>,
    stride: usize,
    pad: usize,
) -> (Array3<T>, Array4<T>, Array1<T>) {
    let (h, wi, cin) = x.dim();
    let (kh, _, _, cout) = w.dim();
    let (oh, ow, _) = dy.dim();
    let cols = im2col(x, kh, stride, pad, oh, ow);
    let dyf = dy
        .into_shape_with_order((oh * ow, cout))
        .expect("conv2d_bwd: dy layout");
    let wmat = w.into_shape_with_order((kh * kh * cin, cout)).unwrap();
    let dw = cols
        .t()
        .dot(&dyf)
        .into_shape_with_order((kh, kh, cin, cout))
        .unwrap();
    let db = dyf.sum_axis(Axis(0));
    let dcols = dyf.dot(&wmat.t());
    let dx = col2im_add(&dcols, kh, stride, pad, oh, ow, h, wi, cin);
    (dx, dw, db)
}

pub(crate) fn convt2d_fwd<T: Scalar>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    b: &ArrayView1<T>,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let (h, wi, cin) = x.dim();
    let (kh, kw, wcin, cout) = w.dim();
    assert_eq!(kh, kw, "square kernels only");
    assert_eq!(wcin, cin, "convt2d: channel mismatch");
    let oh = convt_out_dim(h, kh, stride, pad);
    let ow = convt_out_dim(wi, kh, stride, pad);
    let xf = x.into_shape_with_order((h * wi, cin)).unwrap();
    // (cin, kh*kw*cout)
    let vmat = w
        .permuted_axes([2, 0, 1, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((cin, kh * kh * cout))
        .unwrap();
    let cols = xf.dot(&vmat);
    let mut out = col2im_add(&cols, kh, stride, pad, h, wi, oh, ow, cout);
    out += b;
    out
}

pub(crate) fn convt2d_bwd<T: Scalar>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    dy: &ArrayView3<T>,
    stride: usize,
    pad: usize,
) -> (Array3<T>, Array4<T>, Array1<T>) {
    let (h, wi, cin) = x.dim();
    let (kh, _, _, cout) = w.dim();
    let (oh, ow, _) = dy.dim();
    let cols_dy = im2col(dy, kh, stride, pad, h, wi);
    // dx[p, ci] = cols_dy[p, (ky,kx,co)] * w[ky,kx,ci,co]
    let m = w
        .permuted_axes([0, 1, 3, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((kh * kh * cout, cin))
        .unwrap();
    let dx = cols_dy
        .dot(&m)
        .into_shape_with_order((h, wi, cin))
        .unwrap();
    let xf = x.into_shape_with_order((h * wi, cin)).unwrap();
    let dvmat = xf.t().dot(&cols_dy); // (cin, kh*kh*cout)
    let dw = dvmat
        .into_shape_with_order((cin, kh, kh, cout))
        .unwrap()
        .permuted_axes([1, 2, 0, 3])
        .as_standard_layout()
        .into_owned();
    let db = dy
        .into_shape_with_order((oh * ow, cout))
        .unwrap()
        .sum_axis(Axis(0));
    (dx, dw, db)
}

/// Bilinear backward warp with border clamp. `flow` is `(H, W, 2)` holding
/// `(dx, dy)`; the output at `(y, x)` samples `src` at `(x + dx, y + dy)`.
pub(crate) fn warp_fwd<T: Scalar>(src: &ArrayView3<T>, flow: &ArrayView3<T>) -> Array3<T> {
    let (sh, sw, c) = src.dim();
    let (h, w, two) = flow.dim();
    assert_eq!(two, 2, "flow must have 2 channels");
    let src_std = src.as_standard_layout();
    let flow_std = flow.as_standard_layout();
    let ss = src_std.as_slice().unwrap();
    let fs = flow_std.as_slice().unwrap();
    let mut out = Array3::<T>::zeros((h, w, c));
    let os = out.as_slice_mut().unwrap();
    let max_x = T::from_usize(sw - 1).unwrap();
    let max_y = T::from_usize(sh - 1).unwrap();
    let one = T::one();
    let zero = T::zero();
    for y in 0..h {
        for x in 0..w {
            let fi = (y * w + x) * 2;
            let sx = T::from_usize(x).unwrap() + fs[fi];
            let sy = T::from_usize(y).unwrap() + fs[fi + 1];
            let sx = if sx < zero {
                zero
            } else if sx > max_x {
                max_x
            } else {
                sx
            };
            let sy = if sy < zero {
                zero
            } else if sy > max_y {
                max_y
            } else {
                sy
            };
            let fx = sx.fract();
            let fy = sy.fract();
            let x0 = sx.floor().to_usize().unwrap();
            let y0 = sy.floor().to_usize().unwrap();
            let x1 = (x0 + 1).min(sw - 1);
            let y1 = (y0 + 1).min(sh - 1);
            let w00 = (one - fx) * (one - fy);
            let w01 = fx * (one - fy);
            let w10 = (one - fx) * fy;
            let w11 = fx * fy;
            let b00 = (y0 * sw + x0) * c;
            let b01 = (y0 * sw + x1) * c;
            let b10 = (y1 * sw + x0) * c;
            let b11 = (y1 * sw + x1) * c;
            let ob = (y * w + x) * c;
            for ch in 0..c {
                os[ob + ch] = w00 * ss[b00 + ch]
                    + w01 * ss[b01 + ch]
                    + w10 * ss[b10 + ch]
                    + w11 * ss[b11 + ch];
            }
        }
    }
    out
}

/// Gradients of [`warp_fwd`] w.r.t. source values and flow. Positions whose
/// raw sample coordinate fell outside the image get zero flow gradient
/// (border clamp has zero derivative there).
pub(crate) fn warp_bwd<T: Scalar>(
    src: &ArrayView3<T>,
    flow: &ArrayView3<T>,
    dy_out: &ArrayView3<T>,
) -> (Array3<T>, Array3<T>) {
    let (sh, sw, c) = src.dim();
    let (h, w, _) = flow.dim();
    let src_std = src.as_standard_layout();
    let flow_std = flow.as_standard_layout();
    let dy_std = dy_out.as_standard_layout();
    let ss = src_std.as_slice().unwrap();
    let fs = flow_std.as_slice().unwrap();
    let gs = dy_std.as_slice().unwrap();
    let mut dsrc = Array3::<T>::zeros((sh, sw, c));
    let mut dflow = Array3::<T>::zeros((h, w, 2));
    let dss = dsrc.as_slice_mut().unwrap();
    let dfs = dflow.as_slice_mut().unwrap();
    let max_x = T::from_usize(sw - 1).unwrap();
    let max_y = T::from_usize(sh - 1).unwrap();
    let one = T::one();
    let zero = T::zero();
    for y in 0..h {
        for x in 0..w {
            let fi = (y * w + x) * 2;
            let rx = T::from_usize(x).unwrap() + fs[fi];
            let ry = T::from_usize(y).unwrap() + fs[fi + 1];
            let in_x = rx >= zero && rx <= max_x;
            let in_y = ry >= zero && ry <= max_y;
            let sx = if rx < zero {
                zero
            } else if rx > max_x {
                max_x
            } else {
                rx
            };
            let sy = if ry < zero {
                zero
            } else if ry > max_y {
                max_y
            } else {
                ry
            };
            let fx = sx.fract();
            let fy = sy.fract();
            let x0 = sx.floor().to_usize().unwrap();
            let y0 = sy.floor().to_usize().unwrap();
            let x1 = (x0 + 1).min(sw - 1);
            let y1 = (y0 + 1).min(sh - 1);
            let w00 = (one - fx) * (one - fy);
            let w01 = fx * (one - fy);
            let w10 = (one - fx) * fy;
            let w11 = fx * fy;
            let b00 = (y0 * sw + x0) * c;
            let b01 = (y0 * sw + x1) * c;
            let b10 = (y1 * sw + x0) * c;
            let b11 = (y1 * sw + x1) * c;
            let ob = (y * w + x) * c;
            let mut gx = zero;
            let mut gy = zero;
            for ch in 0..c {
                let g = gs[ob + ch];
                dss[b00 + ch] = dss[b00 + ch] + w00 * g;
                dss[b01 + ch] = dss[b01 + ch] + w01 * g;
                dss[b10 + ch] = dss[b10 + ch] + w10 * g;
                dss[b11 + ch] = dss[b11 + ch] + w11 * g;
                let v00 = ss[b00 + ch];
                let v01 = ss[b01 + ch];
                let v10 = ss[b10 + ch];
                let v11 = ss[b11 + ch];
                gx = gx + g * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                gy = gy + g * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            if in_x {
                dfs[fi] = gx;
            }
            if in_y {
                dfs[fi + 1] = gy;
            }
        }
    }
    (dsrc, dflow)
}

pub(crate) fn avgpool2_fwd<T: Scalar>(x: &ArrayView3<T>) -> Array3<T> {
    let (h, w, c) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2: dims must be even");
    let quarter = T::from_f64(0.25).unwrap();
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let mut out = Array3::<T>::zeros((h / 2, w / 2, c));
    let os = out.as_slice_mut().unwrap();
    for y in 0..h / 2 {
        for x2 in 0..w / 2 {
            let b00 = ((2 * y) * w + 2 * x2) * c;
            let b01 = b00 + c;
            let b10 = ((2 * y + 1) * w + 2 * x2) * c;
            let b11 = b10 + c;
            let ob = (y * (w / 2) + x2) * c;
            for ch in 0..c {
                os[ob + ch] = (xs[b00 + ch] + xs[b01 + ch] + xs[b10 + ch] + xs[b11 + ch]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avgpool2_bwd<T: Scalar>(dims: (usize, usize, usize), dy: &ArrayView3<T>) -> Array3<T> {
    let (h, w, c) = dims;
    let quarter = T::from_f64(0.25).unwrap();
    let dy_std = dy.as_standard_layout();
    let gs = dy_std.as_slice().unwrap();
    let mut dx = Array3::<T>::zeros((h, w, c));
    let ds = dx.as_slice_mut().unwrap();
    for y in 0..h / 2 {
        for x2 in 0..w / 2 {
            let ob = (y * (w / 2) + x2) * c;
            for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let b = ((2 * y + oy) * w + 2 * x2 + ox) * c;
                for ch in 0..c {
                    ds[b + ch] = gs[ob + ch] * quarter;
                }
            }
        }
    }
    dx
}

/// Reflect-101 index fold (edge sample not duplicated).
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * (n as isize - 1);
    let mut m = i % p;
    if m < 0 {
        m += p;
    }
    if m < n as isize {
        m as usize
    } else {
        (p - m) as usize
    }
}

pub(crate) fn reflect_pad_fwd<T: Scalar>(x: &ArrayView3<T>, pad: [usize; 4]) -> Array3<T> {
    let (h, w, c) = x.dim();
    let [t, b, l, r] = pad;
    let mut out = Array3::<T>::zeros((h + t + b, w + l + r, c));
    for yo in 0..h + t + b {
        let yi = reflect101(yo as isize - t as isize, h);
        for xo in 0..w + l + r {
            let xi = reflect101(xo as isize - l as isize, w);
            for ch in 0..c {
                out[(yo, xo, ch)] = x[(yi, xi, ch)];
            }
        }
    }
    out
}

pub(crate) fn reflect_pad_bwd<T: Scalar>(
    dims: (usize, usize, usize),
    pad: [usize; 4],
    dy: &ArrayView3<T>,
) -> Array3<T> {
    let (h, w, c) = dims;
    let [t, _b, l, _r] = pad;
    let (oh, ow, _) = dy.dim();
    let mut dx = Array3::<T>::zeros((h, w, c));
    for yo in 0..oh {
        let yi = reflect101(yo as isize - t as isize, h);
        for xo in 0..ow {
            let xi = reflect101(xo as isize - l as isize, w);
            for ch in 0..c {
                dx[(yi, xi, ch)] = dx[(yi, xi, ch)] + dy[(yo, xo, ch)];
            }
        }
    }
    dx
}
