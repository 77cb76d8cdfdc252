//! Forward and backward kernels over raw slices. The tape in [`super::graph`]
//! owns shapes and dispatch; everything here assumes validated sizes.

use crate::tensor::Float;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn im2col<F: Float>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let n = g.out_len();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub fn col2im_add<F: Float>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let n = g.out_len();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = w * im2col(x[b]) + bias` for every batch item.
pub fn conv2d_forward<F: Float>(
    x: &[F],
    batch: usize,
    g: &ConvGeom,
    w: &[F],
    cout: usize,
    bias: Option<&[F]>,
) -> Vec<F> {
    let (kk, n) = (g.patch_len(), g.out_len());
    let in_len = g.cin * g.h * g.w;
    let mut y = vec![F::zero(); batch * cout * n];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); kk * n]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let rhs: &[F] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let yb = &mut y[b * cout * n..(b + 1) * cout * n];
        F::gemm(cout, kk, n, F::one(), w, false, rhs, false, F::zero(), yb);
        if let Some(bias) = bias {
            for (co, row) in yb.chunks_mut(n).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

pub struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Vec<F>,
    pub db: Vec<F>,
}

pub fn conv2d_backward<F: Float>(
    x: &[F],
    batch: usize,
    g: &ConvGeom,
    w: &[F],
    cout: usize,
    dy: &[F],
    need_dx: bool,
) -> ConvGrads<F> {
    let (kk, n) = (g.patch_len(), g.out_len());
    let in_len = g.cin * g.h * g.w;
    let mut dw = vec![F::zero(); cout * kk];
    let mut db = vec![F::zero(); cout];
    let mut dx = need_dx.then(|| vec![F::zero(); batch * in_len]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![F::zero(); kk * n]
    };
    let mut dcols = if need_dx && !pointwise {
        vec![F::zero(); kk * n]
    } else {
        Vec::new()
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * cout * n..(b + 1) * cout * n];
        let rhs: &[F] = if pointwise {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        F::gemm(
            cout,
            n,
            kk,
            F::one(),
            dyb,
            false,
            rhs,
            true,
            F::one(),
            &mut dw,
        );
        for (co, row) in dyb.chunks(n).enumerate() {
            db[co] += row.iter().copied().sum::<F>();
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                F::gemm(kk, cout, n, F::one(), w, true, dyb, false, F::one(), dxb);
            } else {
                F::gemm(
                    kk,
                    cout,
                    n,
                    F::one(),
                    w,
                    true,
                    dyb,
                    false,
                    F::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, g, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

pub struct GroupStats<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub fn group_norm_forward<F: Float>(
    x: &[F],
    batch: usize,
    channels: usize,
    hw: usize,
    groups: usize,
    gamma: &[F],
    beta: &[F],
) -> (Vec<F>, GroupStats<F>) {
    let cpg = channels / groups;
    let n = F::of((cpg * hw) as f64);
    let eps = F::of(GROUP_NORM_EPS);
    let mut y = vec![F::zero(); x.len()];
    let mut mean = Vec::with_capacity(batch * groups);
    let mut rstd = Vec::with_capacity(batch * groups);
    for b in 0..batch {
        for gi in 0..groups {
            let start = (b * channels + gi * cpg) * hw;
            let seg = &x[start..start + cpg * hw];
            let m = seg.iter().copied().sum::<F>() / n;
            let var = seg.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            mean.push(m);
            rstd.push(r);
            for ci in 0..cpg {
                let c = gi * cpg + ci;
                let off = start + ci * hw;
                for i in 0..hw {
                    y[off + i] = (x[off + i] - m) * r * gamma[c] + beta[c];
                }
            }
        }
    }
    (y, GroupStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<F: Float>(
    x: &[F],
    batch: usize,
    channels: usize,
    hw: usize,
    groups: usize,
    gamma: &[F],
    stats: &GroupStats<F>,
    dy: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let cpg = channels / groups;
    let n = F::of((cpg * hw) as f64);
    let mut dx = vec![F::zero(); x.len()];
    let mut dgamma = vec![F::zero(); channels];
    let mut dbeta = vec![F::zero(); channels];
    for b in 0..batch {
        for gi in 0..groups {
            let idx = b * groups + gi;
            let (m, r) = (stats.mean[idx], stats.rstd[idx]);
            let start = (b * channels + gi * cpg) * hw;
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for ci in 0..cpg {
                let c = gi * cpg + ci;
                let off = start + ci * hw;
                for i in 0..hw {
                    let xhat = (x[off + i] - m) * r;
                    let g = dy[off + i];
                    dgamma[c] += g * xhat;
                    dbeta[c] += g;
                    let dxhat = g * gamma[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            for ci in 0..cpg {
                let c = gi * cpg + ci;
                let off = start + ci * hw;
                for i in 0..hw {
                    let xhat = (x[off + i] - m) * r;
                    let dxhat = dy[off + i] * gamma[c];
                    dx[off + i] = r * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Spatial self-attention over `n` positions. `qkv` holds query, key and
/// value channel blocks of width `c` each, per batch item. Returns the
/// attended values `[batch, c, n]` and the softmax weights for backward.
pub fn attention_forward<F: Float>(
    qkv: &[F],
    batch: usize,
    c: usize,
    n: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>) {
    let d = c / heads;
    let scale = F::one() / F::of(d as f64).sqrt();
    let mut out = vec![F::zero(); batch * c * n];
    let mut probs = vec![F::zero(); batch * heads * n * n];
    for b in 0..batch {
        let base = b * 3 * c * n;
        for h in 0..heads {
            let q = &qkv[base + h * d * n..base + (h + 1) * d * n];
            let k = &qkv[base + (c + h * d) * n..base + (c + (h + 1) * d) * n];
            let v = &qkv[base + (2 * c + h * d) * n..base + (2 * c + (h + 1) * d) * n];
            let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            F::gemm(n, d, n, scale, q, true, k, false, F::zero(), p);
            for row in p.chunks_mut(n) {
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v = *v / s);
            }
            let o = &mut out[(b * c + h * d) * n..(b * c + (h + 1) * d) * n];
            F::gemm(d, n, n, F::one(), v, false, p, true, F::zero(), o);
        }
    }
    (out, probs)
}

pub fn attention_backward<F: Float>(
    qkv: &[F],
    probs: &[F],
    dout: &[F],
    batch: usize,
    c: usize,
    n: usize,
    heads: usize,
) -> Vec<F> {
    let d = c / heads;
    let scale = F::one() / F::of(d as f64).sqrt();
    let mut dqkv = vec![F::zero(); qkv.len()];
    let mut dp = vec![F::zero(); n * n];
    for b in 0..batch {
        let base = b * 3 * c * n;
        for h in 0..heads {
            let q = &qkv[base + h * d * n..base + (h + 1) * d * n];
            let k = &qkv[base + (c + h * d) * n..base + (c + (h + 1) * d) * n];
            let v = &qkv[base + (2 * c + h * d) * n..base + (2 * c + (h + 1) * d) * n];
            let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            let dob = &dout[(b * c + h * d) * n..(b * c + (h + 1) * d) * n];
            {
                let dv = &mut dqkv[base + (2 * c + h * d) * n..base + (2 * c + (h + 1) * d) * n];
                F::gemm(d, n, n, F::one(), dob, false, p, false, F::zero(), dv);
            }
            F::gemm(n, d, n, F::one(), dob, true, v, false, F::zero(), &mut dp);
            for (prow, dprow) in p.chunks(n).zip(dp.chunks_mut(n)) {
                let dot: F = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                for (ds, &pv) in dprow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot);
                }
            }
            {
                let dq = &mut dqkv[base + h * d * n..base + (h + 1) * d * n];
                F::gemm(d, n, n, scale, k, false, &dp, true, F::zero(), dq);
            }
            {
                let dk = &mut dqkv[base + (c + h * d) * n..base + (c + (h + 1) * d) * n];
                F::gemm(d, n, n, scale, q, false, &dp, false, F::zero(), dk);
            }
        }
    }
    dqkv
}
