//! Dense numeric kernels shared by the autodiff tape and plain inference
//! paths: same-padding convolution via im2col, 2x2 max pooling, and
//! align-corners bilinear resampling.
//!
//! All kernels are generic over the float type and operate on channel-last
//! `(H, W, C)` arrays in standard (row-major) layout.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4};

use crate::tape::Elem;

/// Unfolds `x` `(H, W, C)` into `(H*W, kh*kw*C)` patch rows with zero padding
/// so that a stride-1 "same" convolution becomes a single matrix product.
/// Column order matches the row-major flattening of a `(kh, kw, C)` window.
pub fn im2col<T: Elem>(x: &ArrayView3<T>, kh: usize, kw: usize) -> Array2<T> {
    let (h, w, c) = x.dim();
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernel dims must be odd");
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((h * w, kh * kw * c));
    let out = cols.as_slice_mut().expect("standard layout");
    let row_len = kh * kw * c;
    for y in 0..h {
        for xo in 0..w {
            let base = (y * w + xo) * row_len;
            for ky in 0..kh {
                let sy = y as isize + ky as isize - ph as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let sx = xo as isize + kx as isize - pw as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = base + (ky * kw + kx) * c;
                    out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch-row gradients back onto the
/// zero-padded source image.
pub fn col2im_add<T: Elem>(
    cols: &ArrayView2<T>,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
) -> Array3<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("standard layout");
    let mut dx = Array3::<T>::zeros((h, w, c));
    let out = dx.as_slice_mut().expect("standard layout");
    let row_len = kh * kw * c;
    for y in 0..h {
        for xo in 0..w {
            let base = (y * w + xo) * row_len;
            for ky in 0..kh {
                let sy = y as isize + ky as isize - ph as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let sx = xo as isize + kx as isize - pw as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = base + (ky * kw + kx) * c;
                    for ch in 0..c {
                        out[dst + ch] += cs[src + ch];
                    }
                }
            }
        }
    }
    dx
}

/// Stride-1 same-padding convolution. `x` is `(H, W, Cin)`, `w` is
/// `(kh, kw, Cin, Cout)`, bias `(Cout,)`; returns `(H, W, Cout)`.
pub fn conv2d_same<T: Elem>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    b: Option<&ArrayView1<T>>,
) -> Array3<T> {
    let (h, wid, cin) = x.dim();
    let (kh, kw, wcin, cout) = w.dim();
    assert_eq!(cin, wcin, "conv input channels mismatch");
    let cols = im2col(x, kh, kw);
    let w2 = w
        .to_shape((kh * kw * cin, cout))
        .expect("weight reshape")
        .to_owned();
    let mut out2 = cols.dot(&w2);
    if let Some(b) = b {
        out2 += &b.view().insert_axis(ndarray::Axis(0));
    }
    out2
        .into_shape_with_order((h, wid, cout))
        .expect("conv output reshape")
}

/// Gradients of [`conv2d_same`] with respect to input, weights, and bias.
pub fn conv2d_backward<T: Elem>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    d_out: &ArrayView3<T>,
) -> (Array3<T>, Array4<T>, Array1<T>) {
    let (h, wid, cin) = x.dim();
    let (kh, kw, _, cout) = w.dim();
    let cols = im2col(x, kh, kw);
    let d2 = d_out
        .to_shape((h * wid, cout))
        .expect("grad reshape")
        .to_owned();
    let w2 = w
        .to_shape((kh * kw * cin, cout))
        .expect("weight reshape")
        .to_owned();
    let d_w2 = cols.t().dot(&d2);
    let d_b = d2.sum_axis(ndarray::Axis(0));
    let d_cols = d2.dot(&w2.t());
    let d_x = col2im_add(&d_cols.view(), h, wid, cin, kh, kw);
    let d_w = d_w2
        .into_shape_with_order((kh, kw, cin, cout))
        .expect("weight grad reshape");
    (d_x, d_w, d_b)
}

/// 2x2 max pooling with stride 2. Requires even spatial dims. Returns the
/// pooled map and, per output element, the flat index of the winning input
/// (first occurrence wins ties, scanning the window in row-major order).
pub fn maxpool2<T: Elem>(x: &ArrayView3<T>) -> (Array3<T>, Vec<u32>) {
    let (h, w, c) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<T>::zeros((oh, ow, c));
    let os = out.as_slice_mut().expect("standard layout");
    let mut argmax = vec![0u32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ((oy * 2 + dy) * w + (ox * 2 + dx)) * c + ch;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                }
                os[obase + ch] = best;
                argmax[obase + ch] = best_idx as u32;
            }
        }
    }
    (out, argmax)
}

/// Routes pooled-output gradients back to the winning inputs of [`maxpool2`].
pub fn maxpool2_backward<T: Elem>(
    d_out: &ArrayView3<T>,
    argmax: &[u32],
    h: usize,
    w: usize,
    c: usize,
) -> Array3<T> {
    let mut dx = Array3::<T>::zeros((h, w, c));
    let ds = dx.as_slice_mut().expect("standard layout");
    let gs = d_out.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    for (g, &idx) in gs.iter().zip(argmax.iter()) {
        ds[idx as usize] += *g;
    }
    dx
}

/// Align-corners interpolation weights for resizing a length-`src` axis to
/// `dst`. Entry `t` is `(i0, i1, w0, w1)` with `out[t] = w0*in[i0] + w1*in[i1]`.
/// Exact integer hits produce `(i, i, 1, 0)`, so upsampling by an integer
/// factor copies source samples through unchanged.
pub fn lin_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    assert!(src > 0 && dst > 0);
    if src == 1 {
        return vec![(0, 0, 1.0, 0.0); dst];
    }
    if dst == 1 {
        return vec![(0, 0, 1.0, 0.0)];
    }
    let scale = (src - 1) as f64 / (dst - 1) as f64;
    (0..dst)
        .map(|t| {
            let pos = t as f64 * scale;
            let i0 = (pos.floor() as usize).min(src - 1);
            let frac = pos - i0 as f64;
            if frac == 0.0 {
                (i0, i0, 1.0, 0.0)
            } else {
                (i0, (i0 + 1).min(src - 1), 1.0 - frac, frac)
            }
        })
        .collect()
}

/// Align-corners bilinear resize of `(H, W, C)` to `(th, tw, C)`.
pub fn resize_bilinear<T: Elem>(x: &ArrayView3<T>, th: usize, tw: usize) -> Array3<T> {
    let (h, w, c) = x.dim();
    if (h, w) == (th, tw) {
        return x.to_owned();
    }
    let rows = lin_weights(h, th);
    let cols = lin_weights(w, tw);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut out = Array3::<T>::zeros((th, tw, c));
    let os = out.as_slice_mut().expect("standard layout");
    for (r, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
        for (cc, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
            let dst = (r * tw + cc) * c;
            let s00 = (y0 * w + x0) * c;
            let s01 = (y0 * w + x1) * c;
            let s10 = (y1 * w + x0) * c;
            let s11 = (y1 * w + x1) * c;
            let (wy0, wy1, wx0, wx1) =
                (crate::tape::c::<T>(wy0), crate::tape::c::<T>(wy1), crate::tape::c::<T>(wx0), crate::tape::c::<T>(wx1));
            for ch in 0..c {
                os[dst + ch] = wy0 * (wx0 * xs[s00 + ch] + wx1 * xs[s01 + ch])
                    + wy1 * (wx0 * xs[s10 + ch] + wx1 * xs[s11 + ch]);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters target-space gradients back to
/// source space with the same interpolation weights.
pub fn resize_bilinear_backward<T: Elem>(
    d_out: &ArrayView3<T>,
    sh: usize,
    sw: usize,
) -> Array3<T> {
    let (th, tw, c) = d_out.dim();
    if (th, tw) == (sh, sw) {
        return d_out.to_owned();
    }
    let rows = lin_weights(sh, th);
    let cols = lin_weights(sw, tw);
    let gs = d_out.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let mut dx = Array3::<T>::zeros((sh, sw, c));
    let ds = dx.as_slice_mut().expect("standard layout");
    for (r, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
        for (cc, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
            let src = (r * tw + cc) * c;
            let d00 = (y0 * sw + x0) * c;
            let d01 = (y0 * sw + x1) * c;
            let d10 = (y1 * sw + x0) * c;
            let d11 = (y1 * sw + x1) * c;
            let (wy0, wy1, wx0, wx1) =
                (crate::tape::c::<T>(wy0), crate::tape::c::<T>(wy1), crate::tape::c::<T>(wx0), crate::tape::c::<T>(wx1));
            for ch in 0..c {
                let g = gs[src + ch];
                ds[d00 + ch] += wy0 * wx0 * g;
                ds[d01 + ch] += wy0 * wx1 * g;
                ds[d10 + ch] += wy1 * wx0 * g;
                ds[d11 + ch] += wy1 * wx1 * g;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize for 2-D label masks (align-corners grid).
pub fn resize_nearest2<T: Copy>(x: &ArrayView2<T>, th: usize, tw: usize) -> Array2<T> {
    let (h, w) = x.dim();
    let pick = |src: usize, dst: usize, t: usize| -> usize {
        if src == 1 || dst == 1 {
            return if dst == 1 { 0 } else { 0.min(src - 1) };
        }
        let pos = t as f64 * (src - 1) as f64 / (dst - 1) as f64;
        (pos.round() as usize).min(src - 1)
    };
    Array2::from_shape_fn((th, tw), |(r, c)| x[[pick(h, th, r), pick(w, tw, c)]])
}
