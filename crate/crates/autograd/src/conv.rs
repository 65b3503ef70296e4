//! im2col / col2im and the batched convolution kernels built on them.

use crate::gemm::gemm;

#[inline]
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` (`[c, h, w]`) into `cols` (`[c*k*k, oh*ow]`).
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let plane = oh * ow;
    debug_assert!(cols.len() >= c * k * k * plane);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(ow, w, kx, stride, pad);
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    if stride == 1 {
                        let s0 = lo + kx - pad;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = src[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `x` (`[c, h, w]`).
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let plane = oh * ow;
    for ch in 0..c {
        let xc = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(ow, w, kx, stride, pad);
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        drow[ox * stride + kx - pad] += srow[ox];
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox*stride + kx - pad` lies
/// inside `0..w`.
#[inline]
fn valid_range(ow: usize, w: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn oh(&self) -> usize {
        conv_out_len(self.h, self.k, self.stride, self.pad)
    }
    pub fn ow(&self) -> usize {
        conv_out_len(self.w, self.k, self.stride, self.pad)
    }
    fn depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.cin && self.groups == self.cout
    }
}

/// Weight layout `[cout, cin/groups, k, k]`.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (g.oh(), g.ow());
    let plane = oh * ow;
    let mut out = vec![0.0; g.n * g.cout * plane];
    if g.depthwise() {
        depthwise_forward(g, x, wt, &mut out);
    } else if g.groups == 1 {
        let kk = g.cin * g.k * g.k;
        let cols = batched_cols(g, x);
        let mut cn = vec![0.0; g.cout * g.n * plane];
        gemm(g.cout, kk, g.n * plane, wt, false, &cols, false, 0.0, &mut cn);
        from_channel_major(&cn, g.n, g.cout, plane, &mut out);
    } else {
        let cig = g.cin / g.groups;
        let cog = g.cout / g.groups;
        let kk = cig * g.k * g.k;
        let mut cols = vec![0.0; kk * plane];
        for b in 0..g.n {
            for grp in 0..g.groups {
                let xs = &x[(b * g.cin + grp * cig) * g.h * g.w..];
                im2col(xs, cig, g.h, g.w, g.k, g.stride, g.pad, &mut cols);
                let ws = &wt[grp * cog * kk..(grp + 1) * cog * kk];
                let os = &mut out[(b * g.cout + grp * cog) * plane..(b * g.cout + (grp + 1) * cog) * plane];
                gemm(cog, kk, plane, ws, false, &cols, false, 0.0, os);
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.n {
            for co in 0..g.cout {
                let o = &mut out[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane];
                for v in o {
                    *v += bias[co];
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`; `dx` is `None` when not requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.oh(), g.ow());
    let plane = oh * ow;
    let mut dbias = vec![0.0; g.cout];
    for b in 0..g.n {
        for co in 0..g.cout {
            dbias[co] += dout[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    let mut dw = vec![0.0; wt.len()];
    let mut dx = if need_dx {
        Some(vec![0.0; x.len()])
    } else {
        None
    };
    if g.depthwise() {
        depthwise_backward(g, x, wt, dout, &mut dw, dx.as_deref_mut());
        return (dx, dw, dbias);
    }
    if g.groups == 1 {
        let kk = g.cin * g.k * g.k;
        let np = g.n * plane;
        let cols = batched_cols(g, x);
        let dcn = to_channel_major(dout, g.n, g.cout, plane);
        gemm(g.cout, np, kk, &dcn, false, &cols, true, 0.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![0.0; kk * np];
            gemm(kk, g.cout, np, wt, true, &dcn, false, 0.0, &mut dcols);
            let mut img = vec![0.0; kk * plane];
            for b in 0..g.n {
                for r in 0..kk {
                    img[r * plane..(r + 1) * plane].copy_from_slice(&dcols[r * np + b * plane..r * np + (b + 1) * plane]);
                }
                let xoff = b * g.cin * g.h * g.w;
                col2im(&img, g.cin, g.h, g.w, g.k, g.stride, g.pad, &mut dx[xoff..]);
            }
        }
        return (dx, dw, dbias);
    }
    let cig = g.cin / g.groups;
    let cog = g.cout / g.groups;
    let kk = cig * g.k * g.k;
    let mut cols = vec![0.0; kk * plane];
    let mut dcols = vec![0.0; kk * plane];
    for b in 0..g.n {
        for grp in 0..g.groups {
            let xoff = (b * g.cin + grp * cig) * g.h * g.w;
            im2col(&x[xoff..], cig, g.h, g.w, g.k, g.stride, g.pad, &mut cols);
            let ds = &dout[(b * g.cout + grp * cog) * plane..(b * g.cout + (grp + 1) * cog) * plane];
            let dws = &mut dw[grp * cog * kk..(grp + 1) * cog * kk];
            gemm(cog, plane, kk, ds, false, &cols, true, 1.0, dws);
            if let Some(dx) = dx.as_mut() {
                let ws = &wt[grp * cog * kk..(grp + 1) * cog * kk];
                gemm(kk, cog, plane, ws, true, ds, false, 0.0, &mut dcols);
                col2im(&dcols, cig, g.h, g.w, g.k, g.stride, g.pad, &mut dx[xoff..]);
            }
        }
    }
    (dx, dw, dbias)
}

/// Columns of every batch item side by side: `[cin*k*k, n*oh*ow]`.
fn batched_cols(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let plane = g.oh() * g.ow();
    let kk = g.cin * g.k * g.k;
    if g.n == 1 {
        let mut cols = vec![0.0; kk * plane];
        im2col(x, g.cin, g.h, g.w, g.k, g.stride, g.pad, &mut cols);
        return cols;
    }
    let np = g.n * plane;
    let mut cols = vec![0.0; kk * np];
    let mut img = vec![0.0; kk * plane];
    for b in 0..g.n {
        im2col(&x[b * g.cin * g.h * g.w..], g.cin, g.h, g.w, g.k, g.stride, g.pad, &mut img);
        for r in 0..kk {
            cols[r * np + b * plane..r * np + (b + 1) * plane].copy_from_slice(&img[r * plane..(r + 1) * plane]);
        }
    }
    cols
}

/// `[n, c, p]` to `[c, n, p]`.
fn to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(ch * n + b) * p..(ch * n + b + 1) * p].copy_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

/// `[c, n, p]` to `[n, c, p]`.
fn from_channel_major(x: &[f64], n: usize, c: usize, p: usize, out: &mut [f64]) {
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(&x[(ch * n + b) * p..(ch * n + b + 1) * p]);
        }
    }
}

fn depthwise_forward(g: &ConvGeom, x: &[f64], wt: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.oh(), g.ow());
    let k = g.k;
    for b in 0..g.n {
        for c in 0..g.cin {
            let xc = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
            let wc = &wt[c * k * k..(c + 1) * k * k];
            let oc = &mut out[(b * g.cin + c) * oh * ow..(b * g.cin + c + 1) * oh * ow];
            for oy in 0..oh {
                let orow = &mut oc[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for kx in 0..k {
                        let wv = wc[ky * k + kx];
                        let (lo, hi) = valid_range(ow, g.w, kx, g.stride, g.pad);
                        for ox in lo..hi {
                            orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.oh(), g.ow());
    let k = g.k;
    for b in 0..g.n {
        for c in 0..g.cin {
            let base = (b * g.cin + c) * g.h * g.w;
            let xc = &x[base..base + g.h * g.w];
            let wc = &wt[c * k * k..(c + 1) * k * k];
            let dwc = &mut dw[c * k * k..(c + 1) * k * k];
            let dc = &dout[(b * g.cin + c) * oh * ow..(b * g.cin + c + 1) * oh * ow];
            for oy in 0..oh {
                let drow = &dc[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let roff = iy as usize * g.w;
                    let row = &xc[roff..roff + g.w];
                    for kx in 0..k {
                        let (lo, hi) = valid_range(ow, g.w, kx, g.stride, g.pad);
                        let mut acc = 0.0;
                        for ox in lo..hi {
                            acc += drow[ox] * row[ox * g.stride + kx - g.pad];
                        }
                        dwc[ky * k + kx] += acc;
                        if let Some(dx) = dx.as_deref_mut() {
                            let wv = wc[ky * k + kx];
                            let dxr = &mut dx[base + roff..base + roff + g.w];
                            for ox in lo..hi {
                                dxr[ox * g.stride + kx - g.pad] += wv * drow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution geometry: input `[n, cin, h, w]`, weight
/// `[cin, cout, k, k]`, output spatial `(h-1)*stride - 2*pad + k`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvTGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTGeom {
    pub fn oh(&self) -> usize {
        (self.h - 1) * self.stride + self.k - 2 * self.pad
    }
    pub fn ow(&self) -> usize {
        (self.w - 1) * self.stride + self.k - 2 * self.pad
    }
}

pub(crate) fn conv_transpose2d_forward(g: &ConvTGeom, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (g.oh(), g.ow());
    let kk = g.cout * g.k * g.k;
    let hw = g.h * g.w;
    debug_assert_eq!(conv_out_len(oh, g.k, g.stride, g.pad), g.h);
    let mut out = vec![0.0; g.n * g.cout * oh * ow];
    let mut cols = vec![0.0; kk * hw];
    for b in 0..g.n {
        let xs = &x[b * g.cin * hw..(b + 1) * g.cin * hw];
        gemm(kk, g.cin, hw, wt, true, xs, false, 0.0, &mut cols);
        let os = &mut out[b * g.cout * oh * ow..(b + 1) * g.cout * oh * ow];
        col2im(&cols, g.cout, oh, ow, g.k, g.stride, g.pad, os);
        if let Some(bias) = bias {
            for co in 0..g.cout {
                for v in &mut os[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bias[co];
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    g: &ConvTGeom,
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.oh(), g.ow());
    let kk = g.cout * g.k * g.k;
    let hw = g.h * g.w;
    let mut dbias = vec![0.0; g.cout];
    let mut dw = vec![0.0; wt.len()];
    let mut dx = if need_dx {
        Some(vec![0.0; x.len()])
    } else {
        None
    };
    let mut cols = vec![0.0; kk * hw];
    for b in 0..g.n {
        let ds = &dout[b * g.cout * oh * ow..(b + 1) * g.cout * oh * ow];
        for co in 0..g.cout {
            dbias[co] += ds[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
        }
        im2col(ds, g.cout, oh, ow, g.k, g.stride, g.pad, &mut cols);
        let xs = &x[b * g.cin * hw..(b + 1) * g.cin * hw];
        gemm(g.cin, hw, kk, xs, false, &cols, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(g.cin, kk, hw, wt, false, &cols, false, 0.0, &mut dx[b * g.cin * hw..(b + 1) * g.cin * hw]);
        }
    }
    (dx, dw, dbias)
}
