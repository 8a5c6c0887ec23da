//! Raw loops behind the differentiable ops. All buffers are row-major and
//! every routine accumulates into its output.
#![allow(clippy::needless_range_loop)]

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler keep independent FMA chains
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.groups == 1
            && self.kh == 1
            && self.kw == 1
            && self.stride == (1, 1)
            && self.pad == (0, 0)
    }

    /// Output columns `ox` whose input column `ox*s + kx - p` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride.1 as isize, self.pad.1 as isize);
        let kx = kx as isize;
        let lo = if p > kx { (p - kx + s - 1) / s } else { 0 };
        let hi_incl = (self.w as isize - 1 + p - kx).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, self.ow as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride.0 + ky) as isize - self.pad.0 as isize;
        (0..self.h as isize).contains(&iy).then_some(iy as usize)
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    for b in 0..g.batch {
        for oc in 0..g.cout {
            let v = bias.map_or(0.0, |bs| bs[oc]);
            out[(b * g.cout + oc) * ohw..][..ohw].fill(v);
        }
    }
    if g.is_pointwise() {
        for b in 0..g.batch {
            gemm_nn(
                g.cout,
                g.cin,
                hw,
                w,
                &x[b * g.cin * hw..(b + 1) * g.cin * hw],
                &mut out[b * g.cout * ohw..(b + 1) * g.cout * ohw],
            );
        }
        return;
    }
    let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
    let ksz = g.kh * g.kw;
    for b in 0..g.batch {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let o_plane = &mut out[(b * g.cout + oc) * ohw..][..ohw];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let x_plane = &x[(b * g.cin + ic) * hw..][..hw];
                let kern = &w[(oc * cin_g + icg) * ksz..][..ksz];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = kern[ky * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let x_row = &x_plane[iy * g.w..(iy + 1) * g.w];
                            let o_row = &mut o_plane[oy * g.ow..(oy + 1) * g.ow];
                            for ox in lo..hi {
                                let ix = ox * g.stride.1 + kx - g.pad.1;
                                o_row[ox] += wv * x_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of a convolution.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    if g.is_pointwise() {
        for b in 0..g.batch {
            let go = &grad_out[b * g.cout * ohw..(b + 1) * g.cout * ohw];
            let xb = &x[b * g.cin * hw..(b + 1) * g.cin * hw];
            if let Some(gx) = grad_x.as_deref_mut() {
                gemm_tn(g.cin, g.cout, hw, w, go, &mut gx[b * g.cin * hw..(b + 1) * g.cin * hw]);
            }
            if let Some(gw) = grad_w.as_deref_mut() {
                gemm_nt(g.cout, hw, g.cin, go, xb, gw);
            }
        }
        return;
    }
    let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
    let ksz = g.kh * g.kw;
    for b in 0..g.batch {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let go_plane = &grad_out[(b * g.cout + oc) * ohw..][..ohw];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let x_off = (b * g.cin + ic) * hw;
                let k_off = (oc * cin_g + icg) * ksz;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (lo, hi) = g.col_range(kx);
                        let wv = w[k_off + ky * g.kw + kx];
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let go_row = &go_plane[oy * g.ow..(oy + 1) * g.ow];
                            let row_off = x_off + iy * g.w;
                            for ox in lo..hi {
                                let ix = ox * g.stride.1 + kx - g.pad.1;
                                acc += go_row[ox] * x[row_off + ix];
                            }
                            if let Some(gx) = grad_x.as_deref_mut() {
                                if wv != 0.0 {
                                    for ox in lo..hi {
                                        let ix = ox * g.stride.1 + kx - g.pad.1;
                                        gx[row_off + ix] += wv * go_row[ox];
                                    }
                                }
                            }
                        }
                        if let Some(gw) = grad_w.as_deref_mut() {
                            gw[k_off + ky * g.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// `[start, end)` of adaptive-pool bin `i` when `n` cells are split into `bins`.
pub(crate) fn pool_bin(i: usize, n: usize, bins: usize) -> (usize, usize) {
    (i * n / bins, (i + 1) * n / bins)
}
