//! Raw compute kernels over contiguous slices.
//!
//! Every kernel writes disjoint output slices (optionally in parallel) and
//! keeps all floating-point reductions in a fixed sequential order, so results
//! do not depend on thread count.

use super::Scalar;
use crate::exec;

// ---------------------------------------------------------------- matmul

/// C[m,p] = A[m,k] * B[k,p]
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; m * p];
    exec::for_each_chunk_mut(&mut out, p, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// C[m,k] = A[m,p] * B[k,p]^T  (B given row-major [k,p])
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, p: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; m * k];
    exec::for_each_chunk_mut(&mut out, k, |i, row| {
        let arow = &a[i * p..(i + 1) * p];
        for (kk, o) in row.iter_mut().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            let mut acc = S::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    out
}

/// C[k,p] = A[m,k]^T * B[m,p]  (A given row-major [m,k])
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; k * p];
    exec::for_each_chunk_mut(&mut out, p, |kk, row| {
        for i in 0..m {
            let av = a[i * k + kk];
            let brow = &b[i * p..(i + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

// ---------------------------------------------------------------- conv2d

pub struct ConvDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h.div_ceil(self.stride)
    }
    pub fn out_w(&self) -> usize {
        self.w.div_ceil(self.stride)
    }
}

/// Zero-padded "same" convolution over [T,H,W,Cin] with kernel [kh,kw,Cin,Cout].
pub fn conv2d<S: Scalar>(x: &[S], w: &[S], d: &ConvDims) -> Vec<S> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let mut out = vec![S::ZERO; d.t * oh * ow * d.cout];
    // one chunk per output row (t, oy)
    exec::for_each_chunk_mut(&mut out, ow * d.cout, |row_idx, row| {
        let t = row_idx / oh;
        let oy = row_idx % oh;
        for ox in 0..ow {
            let acc = &mut row[ox * d.cout..(ox + 1) * d.cout];
            for dy in 0..d.kh {
                let iy = (oy * d.stride + dy) as isize - ph as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for dx in 0..d.kw {
                    let ix = (ox * d.stride + dx) as isize - pw as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let xoff = ((t * d.h + iy as usize) * d.w + ix as usize) * d.cin;
                    let woff = (dy * d.kw + dx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let xv = x[xoff + ci];
                        let wrow = &w[woff + ci * d.cout..woff + (ci + 1) * d.cout];
                        for (o, &wv) in acc.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient w.r.t. the convolution input (gather form, deterministic).
pub fn conv2d_backward_x<S: Scalar>(g: &[S], w: &[S], d: &ConvDims) -> Vec<S> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let mut dx = vec![S::ZERO; d.t * d.h * d.w * d.cin];
    exec::for_each_chunk_mut(&mut dx, d.w * d.cin, |row_idx, row| {
        let t = row_idx / d.h;
        let iy = row_idx % d.h;
        for ix in 0..d.w {
            let acc = &mut row[ix * d.cin..(ix + 1) * d.cin];
            for dy in 0..d.kh {
                let oy_num = iy as isize + ph as isize - dy as isize;
                if oy_num < 0 || oy_num % d.stride as isize != 0 {
                    continue;
                }
                let oy = (oy_num / d.stride as isize) as usize;
                if oy >= oh {
                    continue;
                }
                for dx_k in 0..d.kw {
                    let ox_num = ix as isize + pw as isize - dx_k as isize;
                    if ox_num < 0 || ox_num % d.stride as isize != 0 {
                        continue;
                    }
                    let ox = (ox_num / d.stride as isize) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let goff = ((t * oh + oy) * ow + ox) * d.cout;
                    let woff = (dy * d.kw + dx_k) * d.cin * d.cout;
                    for (ci, o) in acc.iter_mut().enumerate() {
                        let wrow = &w[woff + ci * d.cout..woff + (ci + 1) * d.cout];
                        let grow = &g[goff..goff + d.cout];
                        let mut s = S::ZERO;
                        for (&gv, &wv) in grow.iter().zip(wrow) {
                            s += gv * wv;
                        }
                        *o += s;
                    }
                }
            }
        }
    });
    dx
}

/// Gradient w.r.t. the convolution weights (one chunk per kernel tap).
pub fn conv2d_backward_w<S: Scalar>(x: &[S], g: &[S], d: &ConvDims) -> Vec<S> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let mut dw = vec![S::ZERO; d.kh * d.kw * d.cin * d.cout];
    exec::for_each_chunk_mut(&mut dw, d.cin * d.cout, |tap, chunk| {
        let dy = tap / d.kw;
        let dx_k = tap % d.kw;
        for t in 0..d.t {
            for oy in 0..oh {
                let iy = (oy * d.stride + dy) as isize - ph as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for ox in 0..ow {
                    let ix = (ox * d.stride + dx_k) as isize - pw as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let xoff = ((t * d.h + iy as usize) * d.w + ix as usize) * d.cin;
                    let goff = ((t * oh + oy) * ow + ox) * d.cout;
                    for ci in 0..d.cin {
                        let xv = x[xoff + ci];
                        let dst = &mut chunk[ci * d.cout..(ci + 1) * d.cout];
                        let grow = &g[goff..goff + d.cout];
                        for (o, &gv) in dst.iter_mut().zip(grow) {
                            *o += xv * gv;
                        }
                    }
                }
            }
        }
    });
    dw
}

// ---------------------------------------------------------------- bilinear

/// Sample `map` [H,W,D] at `coords` [P,2] (row, col), zero outside the grid.
pub fn bilinear_sample<S: Scalar>(map: &[S], coords: &[S], h: usize, w: usize, d: usize) -> Vec<S> {
    let p = coords.len() / 2;
    let mut out = vec![S::ZERO; p * d];
    exec::for_each_chunk_mut(&mut out, d, |pi, dst| {
        let cy = coords[pi * 2];
        let cx = coords[pi * 2 + 1];
        sample_into(map, h, w, d, cy, cx, dst);
    });
    out
}

#[inline]
fn corner_index(c: f64) -> i64 {
    // clamp before the cast so absurd coordinates stay well-defined
    c.floor().clamp(-1e12, 1e12) as i64
}

#[inline]
fn sample_into<S: Scalar>(map: &[S], h: usize, w: usize, d: usize, cy: S, cx: S, dst: &mut [S]) {
    let y0 = corner_index(cy.to_f64());
    let x0 = corner_index(cx.to_f64());
    let ty = cy - S::from_f64(y0 as f64);
    let tx = cx - S::from_f64(x0 as f64);
    for dy in 0..2i64 {
        let y = y0 + dy;
        if y < 0 || y >= h as i64 {
            continue;
        }
        let wy = if dy == 0 { S::ONE - ty } else { ty };
        for dx in 0..2i64 {
            let x = x0 + dx;
            if x < 0 || x >= w as i64 {
                continue;
            }
            let wx = if dx == 0 { S::ONE - tx } else { tx };
            let off = (y as usize * w + x as usize) * d;
            let weight = wy * wx;
            for (o, &m) in dst.iter_mut().zip(&map[off..off + d]) {
                *o += weight * m;
            }
        }
    }
}

/// Backward of bilinear sampling: gradients for the map (scatter, sequential)
/// and for the coordinates (parallel over points).
#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward<S: Scalar>(
    g: &[S],
    map: &[S],
    coords: &[S],
    h: usize,
    w: usize,
    d: usize,
    want_map: bool,
    want_coords: bool,
) -> (Vec<S>, Vec<S>) {
    let p = coords.len() / 2;
    let mut dmap = vec![S::ZERO; if want_map { map.len() } else { 0 }];
    let mut dcoords = vec![S::ZERO; if want_coords { coords.len() } else { 0 }];

    if want_map {
        // scatter-add in point order: kept sequential for determinism
        for pi in 0..p {
            let cy = coords[pi * 2].to_f64();
            let cx = coords[pi * 2 + 1].to_f64();
            let y0 = corner_index(cy);
            let x0 = corner_index(cx);
            let ty = S::from_f64(cy - y0 as f64);
            let tx = S::from_f64(cx - x0 as f64);
            let grow = &g[pi * d..(pi + 1) * d];
            for dy in 0..2i64 {
                let y = y0 + dy;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                let wy = if dy == 0 { S::ONE - ty } else { ty };
                for dx in 0..2i64 {
                    let x = x0 + dx;
                    if x < 0 || x >= w as i64 {
                        continue;
                    }
                    let wx = if dx == 0 { S::ONE - tx } else { tx };
                    let weight = wy * wx;
                    let off = (y as usize * w + x as usize) * d;
                    for (m, &gv) in dmap[off..off + d].iter_mut().zip(grow) {
                        *m += weight * gv;
                    }
                }
            }
        }
    }

    if want_coords {
        exec::for_each_chunk_mut(&mut dcoords, 2, |pi, dst| {
            let cy = coords[pi * 2].to_f64();
            let cx = coords[pi * 2 + 1].to_f64();
            let y0 = corner_index(cy);
            let x0 = corner_index(cx);
            let ty = S::from_f64(cy - y0 as f64);
            let tx = S::from_f64(cx - x0 as f64);
            let grow = &g[pi * d..(pi + 1) * d];
            let mut gy = S::ZERO;
            let mut gx = S::ZERO;
            for dy in 0..2i64 {
                let y = y0 + dy;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                let wy = if dy == 0 { S::ONE - ty } else { ty };
                let dwy = if dy == 0 { -S::ONE } else { S::ONE };
                for dx in 0..2i64 {
                    let x = x0 + dx;
                    if x < 0 || x >= w as i64 {
                        continue;
                    }
                    let wx = if dx == 0 { S::ONE - tx } else { tx };
                    let dwx = if dx == 0 { -S::ONE } else { S::ONE };
                    let off = (y as usize * w + x as usize) * d;
                    let mut dot = S::ZERO;
                    for (&gv, &m) in grow.iter().zip(&map[off..off + d]) {
                        dot += gv * m;
                    }
                    gy += dwy * wx * dot;
                    gx += wy * dwx * dot;
                }
            }
            dst[0] = gy;
            dst[1] = gx;
        });
    }

    (dmap, dcoords)
}

// ---------------------------------------------------------------- attention

pub struct MhaDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub width: usize,
    pub heads: usize,
}

/// Multi-head scaled dot-product attention. Returns (output, probs) with
/// probs laid out [B, heads, Lq, Lk].
pub fn mha_forward<S: Scalar>(q: &[S], k: &[S], v: &[S], d: &MhaDims) -> (Vec<S>, Vec<S>) {
    let dh = d.width / d.heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![S::ZERO; d.batch * d.heads * d.lq * d.lk];
    exec::for_each_chunk_mut(&mut probs, d.heads * d.lq * d.lk, |b, pb| {
        let qb = &q[b * d.lq * d.width..(b + 1) * d.lq * d.width];
        let kb = &k[b * d.lk * d.width..(b + 1) * d.lk * d.width];
        for hh in 0..d.heads {
            let hoff = hh * dh;
            for lq in 0..d.lq {
                let row = &mut pb[(hh * d.lq + lq) * d.lk..(hh * d.lq + lq + 1) * d.lk];
                let qrow = &qb[lq * d.width + hoff..lq * d.width + hoff + dh];
                let mut maxv = S::from_f64(f64::NEG_INFINITY);
                for (lk, r) in row.iter_mut().enumerate() {
                    let krow = &kb[lk * d.width + hoff..lk * d.width + hoff + dh];
                    let mut s = S::ZERO;
                    for (&a, &bg) in qrow.iter().zip(krow) {
                        s += a * bg;
                    }
                    *r = s * scale;
                    maxv = maxv.maximum(*r);
                }
                let mut sum = S::ZERO;
                for r in row.iter_mut() {
                    *r = (*r - maxv).exp();
                    sum += *r;
                }
                let inv = S::ONE / sum;
                for r in row.iter_mut() {
                    *r *= inv;
                }
            }
        }
    });
    let mut out = vec![S::ZERO; d.batch * d.lq * d.width];
    exec::for_each_chunk_mut(&mut out, d.lq * d.width, |b, ob| {
        let vb = &v[b * d.lk * d.width..(b + 1) * d.lk * d.width];
        let pb = &probs[b * d.heads * d.lq * d.lk..(b + 1) * d.heads * d.lq * d.lk];
        for hh in 0..d.heads {
            let hoff = hh * dh;
            for lq in 0..d.lq {
                let prow = &pb[(hh * d.lq + lq) * d.lk..(hh * d.lq + lq + 1) * d.lk];
                let orow = &mut ob[lq * d.width + hoff..lq * d.width + hoff + dh];
                for (lk, &pv) in prow.iter().enumerate() {
                    let vrow = &vb[lk * d.width + hoff..lk * d.width + hoff + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += pv * vv;
                    }
                }
            }
        }
    });
    (out, probs)
}

/// Backward of [`mha_forward`]; returns (dq, dk, dv).
pub fn mha_backward<S: Scalar>(
    g: &[S],
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    d: &MhaDims,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dh = d.width / d.heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let per_b = exec::map_collect(d.batch, |b| {
        let qb = &q[b * d.lq * d.width..(b + 1) * d.lq * d.width];
        let kb = &k[b * d.lk * d.width..(b + 1) * d.lk * d.width];
        let vb = &v[b * d.lk * d.width..(b + 1) * d.lk * d.width];
        let gb = &g[b * d.lq * d.width..(b + 1) * d.lq * d.width];
        let pb = &probs[b * d.heads * d.lq * d.lk..(b + 1) * d.heads * d.lq * d.lk];
        let mut dq = vec![S::ZERO; d.lq * d.width];
        let mut dk = vec![S::ZERO; d.lk * d.width];
        let mut dv = vec![S::ZERO; d.lk * d.width];
        let mut dscores = vec![S::ZERO; d.lk];
        for hh in 0..d.heads {
            let hoff = hh * dh;
            for lq in 0..d.lq {
                let prow = &pb[(hh * d.lq + lq) * d.lk..(hh * d.lq + lq + 1) * d.lk];
                let grow = &gb[lq * d.width + hoff..lq * d.width + hoff + dh];
                // dAttn and softmax backward, one query row at a time
                let mut dot_sum = S::ZERO;
                for (lk, ds) in dscores.iter_mut().enumerate() {
                    let vrow = &vb[lk * d.width + hoff..lk * d.width + hoff + dh];
                    let mut s = S::ZERO;
                    for (&gv, &vv) in grow.iter().zip(vrow) {
                        s += gv * vv;
                    }
                    *ds = s;
                    dot_sum += s * prow[lk];
                }
                for (ds, &pv) in dscores.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot_sum) * scale;
                }
                let qrow = &qb[lq * d.width + hoff..lq * d.width + hoff + dh];
                let dqrow = &mut dq[lq * d.width + hoff..lq * d.width + hoff + dh];
                for (lk, &ds) in dscores.iter().enumerate() {
                    let krow = &kb[lk * d.width + hoff..lk * d.width + hoff + dh];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o += ds * kv;
                    }
                    let dkrow = &mut dk[lk * d.width + hoff..lk * d.width + hoff + dh];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += ds * qv;
                    }
                    let pv = prow[lk];
                    let dvrow = &mut dv[lk * d.width + hoff..lk * d.width + hoff + dh];
                    for (o, &gv) in dvrow.iter_mut().zip(grow) {
                        *o += pv * gv;
                    }
                }
            }
        }
        (dq, dk, dv)
    });
    let mut dq = vec![S::ZERO; q.len()];
    let mut dk = vec![S::ZERO; k.len()];
    let mut dv = vec![S::ZERO; v.len()];
    for (b, (bq, bk, bv)) in per_b.into_iter().enumerate() {
        dq[b * d.lq * d.width..(b + 1) * d.lq * d.width].copy_from_slice(&bq);
        dk[b * d.lk * d.width..(b + 1) * d.lk * d.width].copy_from_slice(&bk);
        dv[b * d.lk * d.width..(b + 1) * d.lk * d.width].copy_from_slice(&bv);
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------- cosine 4D

pub struct CorrDims {
    pub t: usize,
    pub n: usize,
    pub r2: usize,
    pub d: usize,
}

const COS_EPS: f64 = 1e-8;
const NORM_FLOOR: f64 = 1e-20;

/// Window-cell L2 norms: input [rows, r2, d] -> [rows, r2].
fn cell_norms<S: Scalar>(x: &[S], rows: usize, r2: usize, d: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; rows * r2];
    exec::for_each_chunk_mut_cheap(&mut out, r2, |row, dst| {
        for (c, o) in dst.iter_mut().enumerate() {
            let off = (row * r2 + c) * d;
            let mut s = S::ZERO;
            for &v in &x[off..off + d] {
                s += v * v;
            }
            *o = s.sqrt();
        }
    });
    out
}

/// All-pair cosine similarity between query windows [N,r2,d] and per-frame
/// track windows [T,N,r2,d], producing [T,N,r2,r2]. Returns (corr, qn, fn).
pub fn cosine_corr4d<S: Scalar>(q: &[S], f: &[S], d: &CorrDims) -> (Vec<S>, Vec<S>, Vec<S>) {
    let qn = cell_norms(q, d.n, d.r2, d.d);
    let fnn = cell_norms(f, d.t * d.n, d.r2, d.d);
    let eps = S::from_f64(COS_EPS);
    let mut out = vec![S::ZERO; d.t * d.n * d.r2 * d.r2];
    exec::for_each_chunk_mut_cheap(&mut out, d.r2 * d.r2, |tn, dst| {
        let n = tn % d.n;
        for ij in 0..d.r2 {
            let qoff = (n * d.r2 + ij) * d.d;
            let qrow = &q[qoff..qoff + d.d];
            let qnv = qn[n * d.r2 + ij];
            let row = &mut dst[ij * d.r2..(ij + 1) * d.r2];
            for (uv, o) in row.iter_mut().enumerate() {
                let foff = (tn * d.r2 + uv) * d.d;
                let frow = &f[foff..foff + d.d];
                let mut dot = S::ZERO;
                for (&a, &b) in qrow.iter().zip(frow) {
                    dot += a * b;
                }
                *o = dot / (qnv * fnn[tn * d.r2 + uv] + eps);
            }
        }
    });
    (out, qn, fnn)
}

/// Backward of [`cosine_corr4d`]; returns (dq, df).
#[allow(clippy::too_many_arguments)]
pub fn cosine_corr4d_backward<S: Scalar>(
    g: &[S],
    q: &[S],
    f: &[S],
    qn: &[S],
    fnn: &[S],
    corr: &[S],
    d: &CorrDims,
    want_q: bool,
    want_f: bool,
) -> (Vec<S>, Vec<S>) {
    let eps = S::from_f64(COS_EPS);
    let floor = S::from_f64(NORM_FLOOR);
    let mut dq = vec![S::ZERO; if want_q { q.len() } else { 0 }];
    let mut df = vec![S::ZERO; if want_f { f.len() } else { 0 }];

    if want_f {
        exec::for_each_chunk_mut_cheap(&mut df, d.r2 * d.d, |tn, dst| {
            let n = tn % d.n;
            for uv in 0..d.r2 {
                let fnv = fnn[tn * d.r2 + uv];
                let foff = (tn * d.r2 + uv) * d.d;
                let frow = &f[foff..foff + d.d];
                let drow = &mut dst[uv * d.d..(uv + 1) * d.d];
                for ij in 0..d.r2 {
                    let gv = g[(tn * d.r2 + ij) * d.r2 + uv];
                    if gv == S::ZERO {
                        continue;
                    }
                    let qnv = qn[n * d.r2 + ij];
                    let denom = qnv * fnv + eps;
                    let sim = corr[(tn * d.r2 + ij) * d.r2 + uv];
                    let qoff = (n * d.r2 + ij) * d.d;
                    let qrow = &q[qoff..qoff + d.d];
                    let a = gv / denom;
                    let b = gv * sim * qnv / (denom * fnv.maximum(floor));
                    for ((o, &qv), &fv) in drow.iter_mut().zip(qrow).zip(frow) {
                        *o += a * qv - b * fv;
                    }
                }
            }
        });
    }

    if want_q {
        exec::for_each_chunk_mut_cheap(&mut dq, d.r2 * d.d, |n, dst| {
            for ij in 0..d.r2 {
                let qnv = qn[n * d.r2 + ij];
                let qoff = (n * d.r2 + ij) * d.d;
                let qrow = &q[qoff..qoff + d.d];
                let drow = &mut dst[ij * d.d..(ij + 1) * d.d];
                for t in 0..d.t {
                    let tn = t * d.n + n;
                    for uv in 0..d.r2 {
                        let gv = g[(tn * d.r2 + ij) * d.r2 + uv];
                        if gv == S::ZERO {
                            continue;
                        }
                        let fnv = fnn[tn * d.r2 + uv];
                        let denom = qnv * fnv + eps;
                        let sim = corr[(tn * d.r2 + ij) * d.r2 + uv];
                        let foff = (tn * d.r2 + uv) * d.d;
                        let frow = &f[foff..foff + d.d];
                        let a = gv / denom;
                        let b = gv * sim * fnv / (denom * qnv.maximum(floor));
                        for ((o, &fv), &qv) in drow.iter_mut().zip(frow).zip(qrow) {
                            *o += a * fv - b * qv;
                        }
                    }
                }
            }
        });
    }

    (dq, df)
}

// ---------------------------------------------------------------- softmax / norm

/// Row-wise numerically stable softmax over the last dimension.
pub fn softmax_lastdim<S: Scalar>(x: &[S], d: usize) -> Vec<S> {
    let mut out = x.to_vec();
    exec::for_each_chunk_mut_cheap(&mut out, d, |_, row| {
        let mut maxv = row[0];
        for &v in row.iter() {
            maxv = maxv.maximum(v);
        }
        let mut sum = S::ZERO;
        for v in row.iter_mut() {
            *v = (*v - maxv).exp();
            sum += *v;
        }
        let inv = S::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    });
    out
}

pub fn softmax_backward<S: Scalar>(g: &[S], y: &[S], d: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; g.len()];
    exec::for_each_chunk_mut_cheap(&mut out, d, |r, row| {
        let yrow = &y[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        let mut dot = S::ZERO;
        for (&gv, &yv) in grow.iter().zip(yrow) {
            dot += gv * yv;
        }
        for ((o, &gv), &yv) in row.iter_mut().zip(grow).zip(yrow) {
            *o = yv * (gv - dot);
        }
    });
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm over the last dimension; returns (out, xhat, inv_std).
pub fn layer_norm_lastdim<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    d: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = x.len() / d;
    let eps = S::from_f64(LAYER_NORM_EPS);
    let inv_d = S::from_f64(1.0 / d as f64);
    let stats = exec::map_rows(rows, |r| {
        let xrow = &x[r * d..(r + 1) * d];
        let mut mean = S::ZERO;
        for &v in xrow {
            mean += v;
        }
        mean *= inv_d;
        let mut var = S::ZERO;
        for &v in xrow {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        (mean, S::ONE / (var + eps).sqrt())
    });
    let mut xhat = vec![S::ZERO; x.len()];
    exec::for_each_chunk_mut_cheap(&mut xhat, d, |r, row| {
        let (mean, istd) = stats[r];
        for (o, &v) in row.iter_mut().zip(&x[r * d..(r + 1) * d]) {
            *o = (v - mean) * istd;
        }
    });
    let mut out = vec![S::ZERO; x.len()];
    exec::for_each_chunk_mut_cheap(&mut out, d, |r, row| {
        let hrow = &xhat[r * d..(r + 1) * d];
        for ((o, &hv), (&gn, &bs)) in row.iter_mut().zip(hrow).zip(gain.iter().zip(bias)) {
            *o = hv * gn + bs;
        }
    });
    let inv_std = stats.into_iter().map(|(_, s)| s).collect();
    (out, xhat, inv_std)
}

/// Backward of layer norm; returns (dx, dgain, dbias).
pub fn layer_norm_backward<S: Scalar>(
    g: &[S],
    xhat: &[S],
    inv_std: &[S],
    gain: &[S],
    d: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = g.len() / d;
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut dx = vec![S::ZERO; g.len()];
    exec::for_each_chunk_mut_cheap(&mut dx, d, |r, row| {
        let grow = &g[r * d..(r + 1) * d];
        let hrow = &xhat[r * d..(r + 1) * d];
        let mut mean_dh = S::ZERO;
        let mut mean_dh_h = S::ZERO;
        for (i, (&gv, &hv)) in grow.iter().zip(hrow).enumerate() {
            let dh = gv * gain[i];
            mean_dh += dh;
            mean_dh_h += dh * hv;
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        let istd = inv_std[r];
        for (i, (o, &hv)) in row.iter_mut().zip(hrow).enumerate() {
            let dh = grow[i] * gain[i];
            *o = (dh - mean_dh - hv * mean_dh_h) * istd;
        }
    });
    let mut dgain = vec![S::ZERO; d];
    let mut dbias = vec![S::ZERO; d];
    for r in 0..rows {
        let grow = &g[r * d..(r + 1) * d];
        let hrow = &xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dgain[i] += grow[i] * hrow[i];
            dbias[i] += grow[i];
        }
    }
    (dx, dgain, dbias)
}

/// Standardize each channel (last axis) to zero mean / unit variance over all
/// leading positions. Returns (out, per-channel inv_std); `out` doubles as
/// xhat for the backward pass since there is no affine stage.
pub fn standardize_channels<S: Scalar>(x: &[S], c: usize) -> (Vec<S>, Vec<S>) {
    let rows = x.len() / c;
    let eps = S::from_f64(LAYER_NORM_EPS);
    let inv_r = S::from_f64(1.0 / rows as f64);
    let mut mean = vec![S::ZERO; c];
    let mut var = vec![S::ZERO; c];
    for r in 0..rows {
        for (i, m) in mean.iter_mut().enumerate() {
            *m += x[r * c + i];
        }
    }
    for m in mean.iter_mut() {
        *m *= inv_r;
    }
    for r in 0..rows {
        for (i, v) in var.iter_mut().enumerate() {
            let cdev = x[r * c + i] - mean[i];
            *v += cdev * cdev;
        }
    }
    let inv_std: Vec<S> = var
        .iter()
        .map(|&v| S::ONE / (v * inv_r + eps).sqrt())
        .collect();
    let mut out = vec![S::ZERO; x.len()];
    exec::for_each_chunk_mut_cheap(&mut out, c, |r, row| {
        for (i, o) in row.iter_mut().enumerate() {
            *o = (x[r * c + i] - mean[i]) * inv_std[i];
        }
    });
    (out, inv_std)
}

/// Backward of per-channel standardization.
pub fn standardize_backward<S: Scalar>(g: &[S], xhat: &[S], inv_std: &[S], c: usize) -> Vec<S> {
    let rows = g.len() / c;
    let inv_r = S::from_f64(1.0 / rows as f64);
    let mut mean_g = vec![S::ZERO; c];
    let mut mean_gh = vec![S::ZERO; c];
    for r in 0..rows {
        for i in 0..c {
            mean_g[i] += g[r * c + i];
            mean_gh[i] += g[r * c + i] * xhat[r * c + i];
        }
    }
    for i in 0..c {
        mean_g[i] *= inv_r;
        mean_gh[i] *= inv_r;
    }
    let mut dx = vec![S::ZERO; g.len()];
    exec::for_each_chunk_mut_cheap(&mut dx, c, |r, row| {
        for (i, o) in row.iter_mut().enumerate() {
            let idx = r * c + i;
            *o = (g[idx] - mean_g[i] - xhat[idx] * mean_gh[i]) * inv_std[i];
        }
    });
    dx
}
