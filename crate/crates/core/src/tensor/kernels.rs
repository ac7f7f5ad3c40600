//! Raw numeric kernels behind the tape ops.
//!
//! Convolution goes through an im2col buffer so that forward, weight
//! gradient, and input gradient are all contiguous axpy/dot sweeps. Every
//! loop is sequential with a fixed accumulation order, so results are
//! deterministic down to the bit.

#![allow(clippy::too_many_arguments)]

/// y += a * x over equal-length slices.
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * *xi;
    }
}

/// Dot product with four independent accumulators; fixed summation order.
#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 4];
    let quads = x.len() / 4;
    for i in 0..quads {
        let xq = &x[i * 4..i * 4 + 4];
        let yq = &y[i * 4..i * 4 + 4];
        acc[0] += xq[0] * yq[0];
        acc[1] += xq[1] * yq[1];
        acc[2] += xq[2] * yq[2];
        acc[3] += xq[3] * yq[3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in quads * 4..x.len() {
        sum += x[i] * y[i];
    }
    sum
}

/// Static geometry of one conv2d call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ic: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn patch_len(&self) -> usize {
        self.ic * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image (ic*h*w) into a patch matrix of patch_len rows by
/// out_pixels columns. Out-of-bounds taps read as zero.
pub(crate) fn im2col(d: &ConvDims, image: &[f64], cols: &mut [f64]) {
    let p = d.out_pixels();
    debug_assert_eq!(cols.len(), d.patch_len() * p);
    debug_assert_eq!(image.len(), d.ic * d.h * d.w);
    for ci in 0..d.ic {
        let chan = &image[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &mut cols[((ci * d.k + ky) * d.k + kx) * p..][..p];
                if d.stride == 1 {
                    im2col_row_s1(d, chan, ky, kx, row);
                } else {
                    im2col_row_generic(d, chan, ky, kx, row);
                }
            }
        }
    }
}

fn im2col_row_s1(d: &ConvDims, chan: &[f64], ky: usize, kx: usize, row: &mut [f64]) {
    // stride 1: each output row is a shifted copy of an input row
    let pad = d.pad as isize;
    let ox0 = (pad - kx as isize).clamp(0, d.ow as isize) as usize;
    let ox1 = (d.w as isize + pad - kx as isize).clamp(ox0 as isize, d.ow as isize) as usize;
    for oy in 0..d.oh {
        let iy = oy as isize + ky as isize - pad;
        let seg = &mut row[oy * d.ow..(oy + 1) * d.ow];
        if iy < 0 || iy >= d.h as isize {
            seg.fill(0.0);
            continue;
        }
        let src = &chan[iy as usize * d.w..(iy as usize + 1) * d.w];
        seg[..ox0].fill(0.0);
        if ox1 > ox0 {
            let ix0 = (ox0 as isize + kx as isize - pad) as usize;
            seg[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
        }
        seg[ox1..].fill(0.0);
    }
}

fn im2col_row_generic(d: &ConvDims, chan: &[f64], ky: usize, kx: usize, row: &mut [f64]) {
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
            row[oy * d.ow + ox] = if iy >= 0 && iy < d.h as isize && ix >= 0 && ix < d.w as isize {
                chan[iy as usize * d.w + ix as usize]
            } else {
                0.0
            };
        }
    }
}

/// Fold a patch-matrix gradient back onto the input image, accumulating.
pub(crate) fn col2im_add(d: &ConvDims, cols: &[f64], image_grad: &mut [f64]) {
    let p = d.out_pixels();
    for ci in 0..d.ic {
        let chan = &mut image_grad[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &cols[((ci * d.k + ky) * d.k + kx) * p..][..p];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            chan[dst_row + ix as usize] += row[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Patch-major unfold: out_pixels rows of patch_len, so each output pixel's
/// receptive field is one contiguous row. Pays off when the patch is longer
/// than the output row (large kernels on small maps).
pub(crate) fn im2col_t(d: &ConvDims, image: &[f64], cols_t: &mut [f64]) {
    let kk = d.patch_len();
    debug_assert_eq!(cols_t.len(), kk * d.out_pixels());
    let pad = d.pad as isize;
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let row = &mut cols_t[(oy * d.ow + ox) * kk..][..kk];
            let ix_base = (ox * d.stride) as isize - pad;
            for ci in 0..d.ic {
                let chan = &image[ci * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - pad;
                    let seg = &mut row[(ci * d.k + ky) * d.k..][..d.k];
                    if iy < 0 || iy >= d.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * d.w..][..d.w];
                    // taps kx cover ix_base .. ix_base + k, clipped to the row
                    let t0 = (-ix_base).clamp(0, d.k as isize) as usize;
                    let t1 = (d.w as isize - ix_base).clamp(t0 as isize, d.k as isize) as usize;
                    seg[..t0].fill(0.0);
                    if t1 > t0 {
                        let sx = (ix_base + t0 as isize) as usize;
                        seg[t0..t1].copy_from_slice(&src[sx..sx + (t1 - t0)]);
                    }
                    seg[t1..].fill(0.0);
                }
            }
        }
    }
}

pub(crate) fn col2im_t_add(d: &ConvDims, cols_t: &[f64], image_grad: &mut [f64]) {
    let kk = d.patch_len();
    let pad = d.pad as isize;
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let row = &cols_t[(oy * d.ow + ox) * kk..][..kk];
            let ix_base = (ox * d.stride) as isize - pad;
            for ci in 0..d.ic {
                let chan = &mut image_grad[ci * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let seg = &row[(ci * d.k + ky) * d.k..][..d.k];
                    let t0 = (-ix_base).clamp(0, d.k as isize) as usize;
                    let t1 = (d.w as isize - ix_base).clamp(t0 as isize, d.k as isize) as usize;
                    if t1 > t0 {
                        let sx = (ix_base + t0 as isize) as usize;
                        let dst = &mut chan[iy as usize * d.w + sx..][..t1 - t0];
                        for (dv, sv) in dst.iter_mut().zip(&seg[t0..t1]) {
                            *dv += sv;
                        }
                    }
                }
            }
        }
    }
}

fn patch_major(d: &ConvDims) -> bool {
    d.patch_len() > d.out_pixels()
}

pub(crate) fn conv2d_forward(d: &ConvDims, input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let kk = d.patch_len();
    let p = d.out_pixels();
    let mut cols = vec![0.0; kk * p];
    for img in 0..d.n {
        let image = &input[img * d.ic * d.h * d.w..][..d.ic * d.h * d.w];
        let out_img = &mut out[img * d.oc * p..][..d.oc * p];
        if patch_major(d) {
            im2col_t(d, image, &mut cols);
            for (pi, patch) in cols.chunks_exact(kk).enumerate() {
                for oc in 0..d.oc {
                    out_img[oc * p + pi] = bias[oc] + dot(&weights[oc * kk..][..kk], patch);
                }
            }
        } else {
            im2col(d, image, &mut cols);
            for oc in 0..d.oc {
                let out_row = &mut out_img[oc * p..][..p];
                out_row.fill(bias[oc]);
                let w_row = &weights[oc * kk..][..kk];
                for (wi, col_row) in w_row.iter().zip(cols.chunks_exact(p)) {
                    if *wi != 0.0 {
                        axpy(*wi, col_row, out_row);
                    }
                }
            }
        }
    }
}

/// Gradients for conv2d. `d_input` may be omitted when the input is a leaf
/// that does not require a gradient (the image).
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    input: &[f64],
    weights: &[f64],
    gout: &[f64],
    mut d_input: Option<&mut [f64]>,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
) {
    let kk = d.patch_len();
    let p = d.out_pixels();
    let mut cols = vec![0.0; kk * p];
    let mut dcols = if d_input.is_some() { vec![0.0; kk * p] } else { Vec::new() };
    for img in 0..d.n {
        let image = &input[img * d.ic * d.h * d.w..][..d.ic * d.h * d.w];
        let g_img = &gout[img * d.oc * p..][..d.oc * p];
        if patch_major(d) {
            im2col_t(d, image, &mut cols);
            for (pi, patch) in cols.chunks_exact(kk).enumerate() {
                for oc in 0..d.oc {
                    let g = g_img[oc * p + pi];
                    if g != 0.0 {
                        d_bias[oc] += g;
                        axpy(g, patch, &mut d_weights[oc * kk..][..kk]);
                    }
                }
            }
            if let Some(dinp) = d_input.as_deref_mut() {
                dcols.fill(0.0);
                for (pi, dpatch) in dcols.chunks_exact_mut(kk).enumerate() {
                    for oc in 0..d.oc {
                        let g = g_img[oc * p + pi];
                        if g != 0.0 {
                            axpy(g, &weights[oc * kk..][..kk], dpatch);
                        }
                    }
                }
                col2im_t_add(d, &dcols, &mut dinp[img * d.ic * d.h * d.w..][..d.ic * d.h * d.w]);
            }
        } else {
            im2col(d, image, &mut cols);
            for oc in 0..d.oc {
                let g_row = &g_img[oc * p..][..p];
                d_bias[oc] += g_row.iter().sum::<f64>();
                let dw_row = &mut d_weights[oc * kk..][..kk];
                for (dw, col_row) in dw_row.iter_mut().zip(cols.chunks_exact(p)) {
                    *dw += dot(g_row, col_row);
                }
            }
            if let Some(dinp) = d_input.as_deref_mut() {
                dcols.fill(0.0);
                for oc in 0..d.oc {
                    let g_row = &g_img[oc * p..][..p];
                    let w_row = &weights[oc * kk..][..kk];
                    for (wi, dcol_row) in w_row.iter().zip(dcols.chunks_exact_mut(p)) {
                        if *wi != 0.0 {
                            axpy(*wi, g_row, dcol_row);
                        }
                    }
                }
                col2im_add(d, &dcols, &mut dinp[img * d.ic * d.h * d.w..][..d.ic * d.h * d.w]);
            }
        }
    }
}

/// 2x2 max pooling; `argmax` receives the flat input index feeding each
/// output cell, first maximum in row-major window order on ties.
pub(crate) fn max_pool_2x2_forward(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    input: &[f64],
    out: &mut [f64],
    argmax: &mut Vec<usize>,
) {
    let (oh, ow) = (h / 2, w / 2);
    argmax.clear();
    argmax.reserve(n * c * oh * ow);
    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = input[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                    out[oi] = best;
                    argmax.push(best_idx);
                    oi += 1;
                }
            }
        }
    }
}

/// Bin edges for adaptive pooling: bin `i` of `bins` over an axis of
/// length `len` covers `[floor(i*len/bins), ceil((i+1)*len/bins))`.
#[inline]
pub(crate) fn adaptive_bin(len: usize, bins: usize, i: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

pub(crate) fn adaptive_max_pool_forward(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    bins: usize,
    input: &[f64],
    out: &mut [f64],
    argmax: &mut Vec<usize>,
) {
    argmax.clear();
    argmax.reserve(n * c * bins * bins);
    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for by in 0..bins {
                let (y0, y1) = adaptive_bin(h, bins, by);
                for bx in 0..bins {
                    let (x0, x1) = adaptive_bin(w, bins, bx);
                    let mut best_idx = base + y0 * w + x0;
                    let mut best = input[best_idx];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = base + y * w + x;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oi] = best;
                    argmax.push(best_idx);
                    oi += 1;
                }
            }
        }
    }
}

/// Source taps for one output index under the half-pixel-center convention:
/// sample position `(i + 0.5) * in_len / out_len - 0.5`, clamped to
/// `[0, in_len - 1]`, blended between its floor/ceil neighbors.
#[inline]
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize, i: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

pub(crate) fn bilinear_upsample_forward(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    input: &[f64],
    out: &mut [f64],
) {
    let ytaps: Vec<_> = (0..oh).map(|i| bilinear_taps(oh, h, i)).collect();
    let xtaps: Vec<_> = (0..ow).map(|i| bilinear_taps(ow, w, i)).collect();
    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for &(y0, y1, fy) in &ytaps {
                for &(x0, x1, fx) in &xtaps {
                    let v00 = input[base + y0 * w + x0];
                    let v01 = input[base + y0 * w + x1];
                    let v10 = input[base + y1 * w + x0];
                    let v11 = input[base + y1 * w + x1];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    out[oi] = top + fy * (bot - top);
                    oi += 1;
                }
            }
        }
    }
}

pub(crate) fn bilinear_upsample_backward(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    gout: &[f64],
    d_input: &mut [f64],
) {
    let ytaps: Vec<_> = (0..oh).map(|i| bilinear_taps(oh, h, i)).collect();
    let xtaps: Vec<_> = (0..ow).map(|i| bilinear_taps(ow, w, i)).collect();
    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for &(y0, y1, fy) in &ytaps {
                for &(x0, x1, fx) in &xtaps {
                    let g = gout[oi];
                    oi += 1;
                    d_input[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    d_input[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                    d_input[base + y1 * w + x0] += g * fy * (1.0 - fx);
                    d_input[base + y1 * w + x1] += g * fy * fx;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let x: Vec<f64> = (0..13).map(|i| i as f64 * 0.5 - 3.0).collect();
        let y: Vec<f64> = (0..13).map(|i| (i as f64).sin()).collect();
        let naive: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot(&x, &y) - naive).abs() < 1e-12);
    }

    #[test]
    fn adaptive_bins_cover_axis() {
        for len in 1..20 {
            for bins in 1..=len {
                let mut covered = vec![false; len];
                for i in 0..bins {
                    let (s, e) = adaptive_bin(len, bins, i);
                    assert!(s < e && e <= len);
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c), "len={len} bins={bins}");
            }
        }
    }

    #[test]
    fn bilinear_identity_taps() {
        for len in 1..10 {
            for i in 0..len {
                let (lo, hi, f) = bilinear_taps(len, len, i);
                assert_eq!(lo, i);
                assert!(f == 0.0 || hi == lo);
            }
        }
    }
}
